"""Baselines sharing the core-space pipeline.

SMG-Core keeps the learned ``(U, V)`` and replaces the flow with a
Normal-Inverse-Wishart posterior predictive over core vectors. PCA-Flow
replaces the matrix factorization with PCA on flattened matrices and trains
the same flow on normalized PCA scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .data import CoreBatch, MatrixBatch, StiefelPair
from .errors import CholeskyFailure, IncompleteData, PriorInvalid, ShapeMismatch
from .flow import FlowConfig, decode, extract_cores, sample_vectors, train_flow
from .rng import RngStream, rng_stream


@dataclass
class NIWPosterior:
    kappa: float
    nu: float
    mu: np.ndarray
    psi: np.ndarray

    @property
    def d(self) -> int:
        return self.mu.shape[0]


def default_prior(d: int, kappa0: float = 1.0, nu0: float | None = None, psi0_scale: float = 1.0):
    """Weak conjugate prior: ``mu0 = 0``, ``Psi0 = psi0_scale * I`` and ``nu0 = d + 2``."""
    return NIWPosterior(float(kappa0), float(d + 2 if nu0 is None else nu0), np.zeros(d), psi0_scale * np.eye(d))


def _chol(A: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(0.5 * (A + A.T))
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure(f"{what} is not positive definite") from exc


def niw_fit(cores, prior: NIWPosterior) -> NIWPosterior:
    """Conjugate update of a Normal-Inverse-Wishart prior with core vectors."""
    x = cores.vectors if isinstance(cores, CoreBatch) else np.asarray(cores, dtype=np.float64).reshape(-1, prior.d)
    d = prior.d
    if prior.kappa <= 0 or prior.nu <= d - 1:
        raise PriorInvalid(f"need kappa0 > 0 and nu0 > d - 1 (got {prior.kappa}, {prior.nu}, d={d})")
    if prior.psi.shape != (d, d) or prior.mu.shape != (d,):
        raise PriorInvalid("prior mean/scale shapes do not match the core width")
    try:
        np.linalg.cholesky(prior.psi)
    except np.linalg.LinAlgError as exc:
        raise PriorInvalid("Psi0 must be symmetric positive definite") from exc
    n = x.shape[0]
    if n == 0:
        return NIWPosterior(prior.kappa, prior.nu, prior.mu.copy(), prior.psi.copy())
    xbar = x.mean(axis=0)
    centered = x - xbar
    scatter = centered.T @ centered
    kappa = prior.kappa + n
    dev = xbar - prior.mu
    psi = prior.psi + scatter + (prior.kappa * n / kappa) * np.outer(dev, dev)
    return NIWPosterior(kappa, prior.nu + n, (prior.kappa * prior.mu + n * xbar) / kappa, 0.5 * (psi + psi.T))


def sample_inv_wishart_factor(nu: float, psi: np.ndarray, rng: RngStream) -> np.ndarray:
    """Lower factor ``C`` with ``C C^T ~ InvWishart(nu, psi)``.

    Uses the Bartlett decomposition ``W = K^{-T} A A^T K^{-1} ~ Wishart(nu, psi^{-1})``
    with ``psi = K K^T``, so ``W^{-1} = (K A^{-T})(K A^{-T})^T``.
    """
    d = psi.shape[0]
    K = _chol(psi, "scale matrix")
    A = np.zeros((d, d))
    for i in range(d):
        A[i, i] = np.sqrt(rng.chisquare(nu - i))
        if i:
            A[i, :i] = rng.normal(i)
    A_inv_t = solve_triangular(A, np.eye(d), lower=True).T
    return K @ A_inv_t


def niw_sample(post: NIWPosterior, n: int, seed: int = 0, return_cov: bool = False):
    """Posterior-predictive draws: ``Sigma ~ IW``, ``mu ~ N(mu_N, Sigma/kappa_N)``, ``x ~ N(mu, Sigma)``.

    Draw ``i`` uses its own stream ``(seed, i)``.
    """
    d = post.d
    out = np.empty((n, d))
    covs = []
    for i in range(n):
        rng = rng_stream(seed, i)
        C = sample_inv_wishart_factor(post.nu, post.psi, rng)
        mu = post.mu + C @ rng.normal(d) / np.sqrt(post.kappa)
        out[i] = mu + C @ rng.normal(d)
        if return_cov:
            covs.append(C @ C.T)
    return (out, np.array(covs)) if return_cov else out


def smg_core_generate(batch, pair: StiefelPair, n: int, prior: NIWPosterior | None = None, seed: int = 0) -> MatrixBatch:
    cores = extract_cores(batch, pair)
    if prior is None:
        prior = default_prior(cores.d)
    post = niw_fit(cores, prior)
    return decode(CoreBatch(niw_sample(post, n, seed), pair.rank), pair)


# -- PCA-Flow ----------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (D, d_pca)
    scores: np.ndarray  # training scores (N, d_pca)
    shape: tuple[int, int]

    @property
    def d(self) -> int:
        return self.basis.shape[1]

    @property
    def score_mean(self) -> np.ndarray:
        return self.scores.mean(axis=0)

    @property
    def score_std(self) -> np.ndarray:
        return self.scores.std(axis=0)

    def encode(self, X: np.ndarray) -> np.ndarray:
        flat = np.asarray(X, dtype=np.float64).reshape(-1, self.basis.shape[0])
        return (flat - self.mean) @ self.basis

    def decode(self, z: np.ndarray) -> MatrixBatch:
        flat = self.mean + np.atleast_2d(z) @ self.basis.T
        return MatrixBatch(flat.reshape((-1,) + self.shape))


def pca_dim(cap: int, n: int) -> int:
    """Largest perfect square not exceeding ``min(cap, n - 1)``."""
    limit = min(cap, n - 1)
    if limit < 1:
        raise ShapeMismatch("PCA-Flow needs at least two training matrices")
    return int(np.floor(np.sqrt(limit))) ** 2


def pcaflow_fit(batch: MatrixBatch, d_pca_cap: int) -> PcaModel:
    """Flattened PCA with ``d_pca = pca_dim(d_pca_cap, N)`` leading components."""
    if not isinstance(batch, MatrixBatch):
        batch = MatrixBatch(batch)
    if not batch.complete:
        raise IncompleteData("PCA-Flow requires fully observed training matrices")
    n, (m1, m2) = batch.n, batch.shape
    k = pca_dim(d_pca_cap, n)
    X = batch.data.reshape(n, m1 * m2)
    mean = X.mean(axis=0)
    Xc = X - mean
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    basis = vt[:k].T.copy()
    # deterministic orientation: largest-magnitude entry of each component positive
    lead = np.argmax(np.abs(basis), axis=0)
    basis *= np.where(basis[lead, np.arange(k)] < 0, -1.0, 1.0)
    return PcaModel(mean, basis, Xc @ basis, (m1, m2))


def pcaflow_generate(model: PcaModel, cfg: FlowConfig, n: int, seed: int = 0) -> MatrixBatch:
    """Train the core-space flow on normalized PCA scores, sample and map back."""
    net, _ = train_flow(model.scores, cfg)
    z = sample_vectors(net, n, cfg.ode_steps, seed)
    return model.decode(z)
