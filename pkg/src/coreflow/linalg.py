"""Dense kernels: Householder QR, cyclic Jacobi eigensolver, singular values.

All routines operate on float64 numpy arrays and fix signs so that identical
inputs give identical outputs.
"""
from __future__ import annotations

import numpy as np

from .errors import NotSymmetric, RankDeficient, ShapeMismatch

RANK_TOL = 1e-12


def _as_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {A.shape}")
    return A


def qr_thin(A):
    """Thin QR of an ``m x R`` matrix (``m >= R``) by Householder reflections.

    Returns ``(Q, Rfac)`` with ``Q`` of shape ``m x R`` with orthonormal
    columns and ``Rfac`` upper triangular with a nonnegative diagonal.
    """
    A = _as_matrix(A)
    m, r = A.shape
    if m < r:
        raise ShapeMismatch(f"qr_thin needs rows >= cols, got {A.shape}")
    work = A.copy()
    scale = max(float(np.max(np.linalg.norm(A, axis=0))) if r else 0.0, 1.0)
    reflectors = []
    for k in range(r):
        x = work[k:, k]
        norm_x = float(np.sqrt(x @ x))
        if norm_x <= RANK_TOL * scale:
            raise RankDeficient(f"column {k} has pivot norm {norm_x:.3e} after orthogonalization")
        v = x.copy()
        alpha = -norm_x if x[0] >= 0 else norm_x
        v[0] -= alpha
        vn = float(np.sqrt(v @ v))
        if vn == 0.0:
            reflectors.append(None)
            continue
        v /= vn
        work[k:, k:] -= 2.0 * np.outer(v, v @ work[k:, k:])
        reflectors.append(v)
    Rfac = np.triu(work[:r, :])
    Q = np.zeros((m, r))
    Q[:r, :r] = np.eye(r)
    for k in range(r - 1, -1, -1):
        v = reflectors[k]
        if v is not None:
            Q[k:, :] -= 2.0 * np.outer(v, v @ Q[k:, :])
    signs = np.where(np.diag(Rfac) < 0, -1.0, 1.0)
    return Q * signs, Rfac * signs[:, None]


def _round_robin(n: int):
    """Disjoint (p, q) pairings covering every pair once per sweep."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    out = vecs.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        big = np.max(np.abs(col))
        if big == 0:
            continue
        first = np.flatnonzero(np.abs(col) > 1e-12 * big)[0]
        if col[first] < 0:
            out[:, j] = -col
    return out


def sym_eig_desc(A, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues are returned in descending order; each eigenvector has its
    first nonzero component positive.
    """
    A = _as_matrix(A)
    n = A.shape[0]
    if A.shape[1] != n:
        raise ShapeMismatch(f"expected a square matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    amax = float(np.max(np.abs(A))) if A.size else 0.0
    if A.size and float(np.max(np.abs(A - A.T))) > 1e-9 * amax:
        raise NotSymmetric("matrix is not symmetric to 1e-9 relative")
    a = 0.5 * (A + A.T)
    vecs = np.eye(n)
    fro = float(np.linalg.norm(a))
    rounds = _round_robin(n) if n > 1 else []
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tol * fro or fro == 0.0:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            safe = np.where(active, apq, 1.0)
            theta = (a[q, q] - a[p, p]) / (2.0 * safe)
            big = np.abs(theta) > 1e150
            th = np.where(big, 0.0, theta)
            t = np.where(
                big,
                0.5 / np.where(big, theta, 1.0),
                np.where(th >= 0, 1.0, -1.0) / (np.abs(th) + np.sqrt(th * th + 1.0)),
            )
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = vecs[:, p].copy(), vecs[:, q].copy()
            vecs[:, p] = vp * c - vq * s
            vecs[:, q] = vp * s + vq * c
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], _fix_signs(vecs[:, order])


def singular_values(A) -> np.ndarray:
    """Singular values in descending order.

    Accepts a single matrix or a stack ``(..., m, n)``; uses LAPACK's
    divide-and-conquer SVD so small singular values keep full relative accuracy.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2:
        raise ShapeMismatch(f"expected a matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("singular_values: non-finite input")
    return np.linalg.svd(A, compute_uv=False)


def sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)
