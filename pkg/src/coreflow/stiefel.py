"""Stiefel-manifold geometry: projected QR-retraction step, spectral
initialization from second moments, and principal angles."""
from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np

from .data import MatrixBatch
from .errors import BoundInapplicable, RankTooLarge, ShapeMismatch
from .linalg import qr_thin, singular_values, sym, sym_eig_desc


def tangent_project(W: np.ndarray, G: np.ndarray) -> np.ndarray:
    return G - W @ sym(W.T @ G)


def stiefel_step(W: np.ndarray, G: np.ndarray, eta: float) -> np.ndarray:
    """One Riemannian gradient step: project ``G`` onto the tangent space at
    ``W``, step by ``eta`` and retract with a sign-fixed thin QR."""
    W = np.asarray(W, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if W.shape != G.shape:
        raise ShapeMismatch(f"point {W.shape} and gradient {G.shape} differ")
    if not eta > 0:
        raise ValueError("step size must be positive")
    Q, _ = qr_thin(W - eta * tangent_project(W, G))
    return Q


def _stack(batch) -> np.ndarray:
    if isinstance(batch, MatrixBatch):
        return batch.observed()
    arr = np.asarray(batch, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def second_moments(batch) -> tuple[np.ndarray, np.ndarray]:
    """Empirical ``(1/N) sum M M^T`` and ``(1/N) sum M^T M``."""
    M = _stack(batch)
    n = M.shape[0]
    left = np.einsum("nij,nkj->ik", M, M) / n
    right = np.einsum("nji,njk->ik", M, M) / n
    return sym(left), sym(right)


def _top_eigvecs(C: np.ndarray, R: int, side: str) -> np.ndarray:
    vals, vecs = sym_eig_desc(C)
    if vals[0] <= 0 or vals[R - 1] < 1e-12 * vals[0]:
        warnings.warn(
            f"rank {R} exceeds the numerical rank of the {side} second moment",
            RankTooLarge,
            stacklevel=3,
        )
        if vals[0] <= 0:
            return np.eye(C.shape[0])[:, :R]
    return vecs[:, :R]


def tucker_init(batch, R: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``R`` eigenvectors of the empirical left and right second moments.

    A masked ``MatrixBatch`` contributes its zero-filled observations.
    """
    M = _stack(batch)
    m1, m2 = M.shape[1:]
    if not 1 <= R <= min(m1, m2):
        raise ShapeMismatch(f"rank {R} invalid for {m1}x{m2} matrices")
    left, right = second_moments(M)
    return _top_eigvecs(left, R, "left"), _top_eigvecs(right, R, "right")


def principal_angles(A, B) -> np.ndarray:
    """Principal angles in degrees, ascending, between ``span(A)`` and ``span(B)``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.shape != B.shape:
        raise ShapeMismatch(f"subspace bases differ in shape: {A.shape} vs {B.shape}")
    qa, _ = qr_thin(A)
    qb, _ = qr_thin(B)
    cosines = np.clip(singular_values(qa.T @ qb), -1.0, 1.0)
    # arccos loses ~1e-8 rad near zero; small angles come from the sines instead
    sines = np.clip(np.sort(singular_values(qb - qa @ (qa.T @ qb))), 0.0, 1.0)
    theta = np.where(cosines * cosines < 0.5, np.arccos(cosines), np.arcsin(sines))
    return np.degrees(theta)


class TuckerBound(NamedTuple):
    lhs: float
    rhs: float
    holds: bool


def check_tucker_bound(batch, U0: np.ndarray, R: int, pop_left: np.ndarray, sigma_left: np.ndarray) -> TuckerBound:
    """Compare ``sin(theta)(U_init, U0)`` with the perturbation bound
    ``||C_hat - C|| / (lambda_R(Sigma_L) - ||C_hat - C||)``.

    ``pop_left`` is the population ``E[M M^T]`` and ``sigma_left`` the
    population ``E[S S^T]`` of the core in the true coordinates.
    """
    M = _stack(batch)
    left, _ = second_moments(M)
    U_init = _top_eigvecs(left, R, "left")
    err = float(singular_values(left - pop_left)[0])
    lam_r = float(sym_eig_desc(sym(np.asarray(sigma_left)))[0][R - 1])
    if err >= lam_r:
        raise BoundInapplicable(f"||C_hat - C|| = {err:.4g} >= lambda_R = {lam_r:.4g}")
    U0 = np.asarray(U0, dtype=np.float64)
    resid = U_init - U0 @ (U0.T @ U_init)
    lhs = float(singular_values(resid)[0])
    rhs = err / (lam_r - err)
    return TuckerBound(lhs, rhs, lhs <= rhs + 1e-9)
