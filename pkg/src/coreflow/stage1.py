"""Stage I: learn shared row/column subspaces from complete or masked matrices.

The complete-data objective is ``(1/N) sum ||M_i - U U^T M_i V V^T||_F^2``.
With missing entries, the loss is restricted to observed entries of a
filled-in matrix and alternates Stiefel steps with a low-rank fill update.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import MatrixBatch, StiefelPair
from .errors import ConfigError, EmptyMask, NonFiniteLoss, ShapeMismatch
from .rng import rng_stream
from .stiefel import stiefel_step, tucker_init

log = logging.getLogger(__name__)


@dataclass
class Stage1Config:
    rank: int
    steps: int = 300
    lr_u: float = 0.05
    lr_v: float = 0.05
    batch_size: int | None = None  # None = full batch
    epochs: int = 1
    seed: int = 0
    log_stride: int = 1
    early_stop: bool = True
    stop_tol: float = 1e-10
    stop_window: int = 20
    scale_lr: bool = True  # divide rates by the mean squared Frobenius norm

    def validate(self, n: int, m1: int, m2: int):
        if not 1 <= self.rank <= min(m1, m2):
            raise ConfigError(f"rank {self.rank} must lie in [1, min(m1, m2)] = [1, {min(m1, m2)}]")
        if self.lr_u <= 0 or self.lr_v <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size is not None and not 1 <= self.batch_size <= n:
            raise ConfigError(f"batch size {self.batch_size} must lie in [1, N={n}]")
        if self.steps < 0 or self.epochs < 1 or self.log_stride < 1:
            raise ConfigError("steps >= 0, epochs >= 1 and log_stride >= 1 required")


@dataclass
class FilledBatch:
    """Filled-in matrices; entries where ``masks`` is True equal the observations."""

    matrices: np.ndarray
    masks: np.ndarray

    @classmethod
    def from_observed(cls, obs: MatrixBatch) -> "FilledBatch":
        mask = np.ones(obs.data.shape, dtype=bool) if obs.mask is None else obs.mask.copy()
        return cls(obs.observed().copy(), mask)


@dataclass
class Stage1Result:
    pair: StiefelPair
    filled: FilledBatch | None
    trace: list[tuple[int, float]] = field(default_factory=list)


def _arr(batch) -> np.ndarray:
    if isinstance(batch, MatrixBatch):
        return batch.data
    if isinstance(batch, FilledBatch):
        return batch.matrices
    a = np.asarray(batch, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def _check(X, U, V):
    if X.shape[1] != U.shape[0] or X.shape[2] != V.shape[0] or U.shape[1] != V.shape[1]:
        raise ShapeMismatch(f"matrices {X.shape[1:]} vs factors {U.shape}, {V.shape}")


def _residual(obs, fill, mask, U, V):
    """Cores ``U^T X V``, projections ``X V`` and residual ``D = P(U S V^T - obs)``."""
    XV = fill @ V
    S = U.T @ XV
    D = U @ S @ V.T - obs
    if mask is not None:
        D = np.where(mask, D, 0.0)
    return S, XV, D


def _loss(D) -> float:
    return float(np.sum(D * D)) / D.shape[0]


def _grads(fill, S, XV, D, U, V):
    n = fill.shape[0]
    E = U.T @ D @ V
    DV = D @ V
    DtU = np.swapaxes(D, 1, 2) @ U
    XtU = np.swapaxes(fill, 1, 2) @ U
    St = np.swapaxes(S, 1, 2)
    Et = np.swapaxes(E, 1, 2)
    G_U = (2.0 / n) * np.sum(DV @ St + XV @ Et, axis=0)
    G_V = (2.0 / n) * np.sum(DtU @ S + XtU @ E, axis=0)
    return G_U, G_V


def rec_loss(batch, U, V) -> float:
    X = _arr(batch)
    _check(X, U, V)
    return _loss(_residual(X, X, None, U, V)[2])


def rec_loss_grad(batch, U, V):
    """Euclidean gradient of :func:`rec_loss` with respect to ``(U, V)``.

    This is the full ambient gradient, valid off the manifold too; its
    tangent component equals that of ``-(2/N) sum M V V^T M^T U``.
    """
    X = _arr(batch)
    _check(X, U, V)
    S, XV, D = _residual(X, X, None, U, V)
    return _grads(X, S, XV, D, U, V)


def _masked_inputs(filled: FilledBatch, obs: MatrixBatch):
    X = filled.matrices
    mask = filled.masks
    if obs.data.shape != X.shape or mask.shape != X.shape:
        raise ShapeMismatch("filled matrices, masks and observations must share a shape")
    if obs.mask is not None and not np.array_equal(obs.mask, mask):
        raise ShapeMismatch("masks of filled and observed batches differ")
    return X, obs.observed(), mask


def masked_loss(filled: FilledBatch, obs: MatrixBatch, U, V) -> float:
    X, Y, mask = _masked_inputs(filled, obs)
    _check(X, U, V)
    if not mask.any():
        warnings.warn("no observed entries; masked loss is vacuous", EmptyMask, stacklevel=2)
    return _loss(_residual(Y, X, mask, U, V)[2])


def masked_loss_grad(filled: FilledBatch, obs: MatrixBatch, U, V):
    X, Y, mask = _masked_inputs(filled, obs)
    _check(X, U, V)
    S, XV, D = _residual(Y, X, mask, U, V)
    return _grads(X, S, XV, D, U, V)


def fill_update(filled: FilledBatch, U, V) -> FilledBatch:
    """Replace missing entries by the rank-R reconstruction; observed entries are untouched."""
    X = filled.matrices
    _check(X, U, V)
    recon = U @ (U.T @ X @ V) @ V.T
    return FilledBatch(np.where(filled.masks, X, recon), filled.masks)


def _batches(n: int, size: int | None, seed: int):
    """Endless stream of index batches; reshuffled every pass over the data."""
    if size is None or size >= n:
        idx = np.arange(n)
        while True:
            yield idx
    stream = rng_stream(seed, 0x5747)
    while True:
        perm = stream.permutation(n)
        for start in range(0, n, size):
            yield np.sort(perm[start:start + size])


def train_stage1(batch: MatrixBatch, cfg: Stage1Config) -> Stage1Result:
    """Spectral initialization followed by Stiefel gradient steps.

    Complete batches run ``cfg.steps`` steps on the reconstruction loss.
    Masked batches run ``cfg.epochs`` rounds of ``cfg.steps`` masked-loss
    steps followed by a full fill update.
    """
    if not isinstance(batch, MatrixBatch):
        batch = MatrixBatch(batch)
    n, (m1, m2) = batch.n, batch.shape
    cfg.validate(n, m1, m2)
    masked = batch.mask is not None
    obs = batch.observed()
    if not np.all(np.isfinite(obs)):
        raise NonFiniteLoss(0, float("nan"))
    U, V = tucker_init(obs, cfg.rank)

    energy = float(np.mean(np.sum(obs * obs, axis=(1, 2))))
    scale = 1.0 / energy if cfg.scale_lr and energy > 0 else 1.0
    eta_u, eta_v = cfg.lr_u * scale, cfg.lr_v * scale

    mask = batch.mask
    fill = obs.copy()
    trace: list[tuple[int, float]] = []
    stream = _batches(n, cfg.batch_size, cfg.seed)
    step = 0
    prev_check = None
    epochs = cfg.epochs if masked else 1

    for epoch in range(epochs):
        plateau = False
        for _ in range(cfg.steps):
            idx = next(stream)
            sub_mask = None if mask is None else mask[idx]
            S, XV, D = _residual(obs[idx], fill[idx], sub_mask, U, V)
            loss = _loss(D)
            if not np.isfinite(loss):
                raise NonFiniteLoss(step, loss)
            if step % cfg.log_stride == 0:
                trace.append((step, loss))
            G_U, G_V = _grads(fill[idx], S, XV, D, U, V)
            U = stiefel_step(U, G_U, eta_u)
            V = stiefel_step(V, G_V, eta_v)
            step += 1
            if cfg.early_stop and step % cfg.stop_window == 0:
                full = _loss(_residual(obs, fill, mask, U, V)[2])
                if prev_check is not None and (prev_check <= 0 or prev_check - full < cfg.stop_tol * prev_check):
                    plateau = True
                    break
                prev_check = full
        if not masked:
            break
        new_fill = np.where(mask, obs, U @ (U.T @ fill @ V) @ V.T)
        change = float(np.linalg.norm(new_fill - fill))
        scale_fill = float(np.linalg.norm(new_fill)) or 1.0
        fill = new_fill
        log.debug("epoch %d: step %d, fill change %.3e", epoch, step, change / scale_fill)
        if change > 0:
            prev_check = None
        if plateau and change <= cfg.stop_tol * scale_fill:
            break

    filled = FilledBatch(fill, mask.copy()) if masked else None
    return Stage1Result(StiefelPair(U, V), filled, trace)
