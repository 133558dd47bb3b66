"""Synthetic low-rank matrix benchmarks on a DCT basis and uniform masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MatrixBatch, StiefelPair
from .errors import ConfigError
from .rng import RngStream, rng_stream

CASES = ("blobs", "bands", "waves", "crosshatch")


@dataclass
class SynthConfig:
    case: str = "blobs"
    m1: int = 200
    m2: int = 200
    rank: int = 24
    n: int = 1000
    seed: int = 0

    def validate(self):
        if self.case not in CASES:
            raise ConfigError(f"unknown case {self.case!r}; expected one of {CASES}")
        if not 1 <= self.rank <= min(self.m1, self.m2):
            raise ConfigError(f"rank {self.rank} exceeds min(m1, m2)")
        if self.n < 1:
            raise ConfigError("n must be positive")


def desk_config(case: str = "blobs", seed: int = 0, **kw) -> SynthConfig:
    """Small preset (64 x 64, rank 8, 256 samples) used by tests."""
    return SynthConfig(case=case, m1=kw.get("m", 64), m2=kw.get("m", 64), rank=kw.get("rank", 8), n=kw.get("n", 256), seed=seed)


def dct_basis(n: int, R: int) -> np.ndarray:
    """First ``R`` columns of the orthonormal DCT-II matrix of size ``n``."""
    if not 1 <= R <= n:
        raise ConfigError(f"need 1 <= R <= n, got R={R}, n={n}")
    i = np.arange(n)[:, None]
    k = np.arange(R)[None, :]
    alpha = np.where(k == 0, np.sqrt(1.0 / n), np.sqrt(2.0 / n))
    return alpha * np.cos(np.pi * (i + 0.5) * k / n)


def _linear_probs(start: float, end: float, R: int) -> np.ndarray:
    if R == 1:
        return np.array([start])
    return start + np.arange(R) * (end - start) / (R - 1)


def sample_core(case: str, R: int, rng: RngStream) -> np.ndarray:
    """Draw one ``R x R`` core for the given case."""
    if case == "blobs":
        return 1.5 * rng.normal((R, R))
    if case in ("bands", "crosshatch"):
        if case == "bands":
            strength = 1.5 * rng.normal(R) + 3.0
            probs = _linear_probs(0.2, 0.9, R)
        else:
            strength = 2.5 + 1.1 * rng.normal(R)
            probs = _linear_probs(0.15, 0.85, R)
        active = rng.uniform(R) < probs
        return np.diag(np.where(active, strength, 0.0))
    if case == "waves":
        S = np.zeros((R, R))
        k_max = min(max(4, R // 3), R)
        for _ in range(4):
            k, l = rng.integers(k_max, 2)
            S[k, l] += 1.2 * rng.normal()
        for d in (1, 2):
            m = R - d
            if m <= 0:
                continue
            xi = rng.normal(m)
            xi_t = rng.normal(m)
            p = np.arange(m)
            S[p, p + d] += 0.15 * xi
            S[p + d, p] += 0.15 * xi_t
        return S
    raise ConfigError(f"unknown case {case!r}")


def ground_truth(cfg: SynthConfig) -> StiefelPair:
    return StiefelPair(dct_basis(cfg.m1, cfg.rank), dct_basis(cfg.m2, cfg.rank))


def generate_cores(cfg: SynthConfig) -> np.ndarray:
    """Cores ``(N, R, R)``; matrix ``i`` draws from its own stream ``(seed, i)``."""
    cfg.validate()
    return np.stack([sample_core(cfg.case, cfg.rank, rng_stream(cfg.seed, i)) for i in range(cfg.n)])


def generate(cfg: SynthConfig) -> tuple[MatrixBatch, np.ndarray, np.ndarray]:
    """Return ``(batch, U0, V0)`` with ``M_i = U0 S_i V0^T``."""
    truth = ground_truth(cfg)
    S = generate_cores(cfg)
    M = truth.U @ S @ truth.V.T
    meta = {"case": cfg.case, "rank": str(cfg.rank), "seed": str(cfg.seed)}
    return MatrixBatch(M, meta=meta), truth.U, truth.V


def population_moments(case: str, R: int, U0: np.ndarray, V0: np.ndarray, draws: int = 100_000, seed: int = 0):
    """Monte-Carlo population moments ``(C_L, Sigma_L, C_R, Sigma_R)``.

    ``Sigma_L = E[S S^T]`` and ``C_L = U0 Sigma_L U0^T`` (exact low rank);
    the right-hand quantities are analogous.
    """
    rng = rng_stream(seed, 0xC0FFEE)
    sig_l = np.zeros((R, R))
    sig_r = np.zeros((R, R))
    for _ in range(draws):
        S = sample_core(case, R, rng)
        sig_l += S @ S.T
        sig_r += S.T @ S
    sig_l /= draws
    sig_r /= draws
    return U0 @ sig_l @ U0.T, sig_l, V0 @ sig_r @ V0.T, sig_r


def apply_mask(batch: MatrixBatch, p_miss: float, seed: int) -> MatrixBatch:
    """Observe each entry independently with probability ``1 - p_miss``."""
    if not 0.0 <= p_miss < 1.0:
        raise ConfigError("p_miss must lie in [0, 1)")
    m1, m2 = batch.shape
    mask = np.stack([rng_stream(seed, 0x4D41534B00000000 + i).uniform((m1, m2)) >= p_miss for i in range(batch.n)])
    if batch.mask is not None:
        mask &= batch.mask
    meta = dict(batch.meta, p_miss=repr(float(p_miss)))
    return MatrixBatch(batch.data.copy(), mask, meta)
