"""Distribution-distance metrics between a true and a generated batch."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .data import MatrixBatch
from .errors import BatchTooSmall, DegenerateBandwidth, ShapeMismatch
from .linalg import singular_values
from .stiefel import principal_angles

MMD_MAX_SAMPLES = 2000
SV_EPS = 1e-8


def _pair(true_b, gen_b):
    a = true_b.data if isinstance(true_b, MatrixBatch) else np.asarray(true_b, dtype=np.float64)
    b = gen_b.data if isinstance(gen_b, MatrixBatch) else np.asarray(gen_b, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeMismatch(f"batches have incompatible shapes {a.shape} and {b.shape}")
    return a, b


def entry_moment_diffs(true_b, gen_b) -> tuple[float, float]:
    """Mean over entries of ``|mean_gen - mean_true|`` and ``|std_gen - std_true|`` (population std)."""
    a, b = _pair(true_b, gen_b)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise BatchTooSmall("entrywise std needs at least two matrices per batch")
    mean_diff = float(np.mean(np.abs(b.mean(axis=0) - a.mean(axis=0))))
    std_diff = float(np.mean(np.abs(b.std(axis=0) - a.std(axis=0))))
    return mean_diff, std_diff


def frob_diffs(true_b, gen_b) -> tuple[float, float]:
    a, b = _pair(true_b, gen_b)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise BatchTooSmall("Frobenius std needs at least two matrices per batch")
    ra = np.sqrt(np.sum(a * a, axis=(1, 2)))
    rb = np.sqrt(np.sum(b * b, axis=(1, 2)))
    return float(abs(rb.mean() - ra.mean())), float(abs(rb.std() - ra.std()))


def sv_rel_l2(true_b, gen_b) -> float:
    """Relative l2 gap between batch-averaged singular-value spectra."""
    a, b = _pair(true_b, gen_b)
    sa = singular_values(a).mean(axis=0)
    sb = singular_values(b).mean(axis=0)
    return float(np.linalg.norm(sa - sb) / (np.linalg.norm(sa) + SV_EPS))


def _sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    xx = np.sum(X * X, axis=1)
    yy = np.sum(Y * Y, axis=1)
    return np.maximum(xx[:, None] + yy[None, :] - 2.0 * (X @ Y.T), 0.0)


def mmd_rbf(true_b, gen_b, max_samples: int = MMD_MAX_SAMPLES) -> float:
    """Unbiased RBF-kernel MMD with the pooled median heuristic, ``sqrt(max(MMD_u^2, 0))``."""
    a, b = _pair(true_b, gen_b)
    X = a[:max_samples].reshape(min(a.shape[0], max_samples), -1)
    Y = b[:max_samples].reshape(min(b.shape[0], max_samples), -1)
    n, m = X.shape[0], Y.shape[0]
    if n < 2 or m < 2:
        raise BatchTooSmall("MMD needs at least two matrices per batch")
    Z = np.concatenate([X, Y])
    D = _sq_dists(Z, Z)
    iu = np.triu_indices(n + m, k=1)
    sigma2 = float(np.median(D[iu]))
    if sigma2 <= 0.0:
        warnings.warn("median pairwise distance is zero; MMD set to 0", DegenerateBandwidth, stacklevel=2)
        return 0.0
    K = np.exp(-D / (2.0 * sigma2))
    kxx = K[:n, :n]
    kyy = K[n:, n:]
    kxy = K[:n, n:]
    within_x = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    within_y = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    mmd2 = within_x + within_y - 2.0 * kxy.mean()
    return float(np.sqrt(max(mmd2, 0.0)))


@dataclass
class MetricsReport:
    abs_entry_mean_diff: float
    abs_entry_std_diff: float
    frob_mean_diff: float
    frob_std_diff: float
    sv_rel_l2: float
    mmd: float
    mean_angle_u: float | None = None
    max_angle_u: float | None = None
    mean_angle_v: float | None = None
    max_angle_v: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def evaluate(true_b, gen_b, pair=None, truth=None) -> MetricsReport:
    """All six distribution metrics, plus principal angles when both the
    learned ``pair`` and ground-truth ``truth`` factors are given."""
    mean_d, std_d = entry_moment_diffs(true_b, gen_b)
    fm, fs = frob_diffs(true_b, gen_b)
    rep = MetricsReport(mean_d, std_d, fm, fs, sv_rel_l2(true_b, gen_b), mmd_rbf(true_b, gen_b))
    if pair is not None and truth is not None:
        au = principal_angles(truth.U, pair.U)
        av = principal_angles(truth.V, pair.V)
        rep.mean_angle_u, rep.max_angle_u = float(au.mean()), float(au.max())
        rep.mean_angle_v, rep.max_angle_v = float(av.mean()), float(av.max())
    return rep
