"""Stage II: conditional flow matching on core vectors.

A time-conditioned MLP ``v(x, t)`` is regressed onto the straight-line
velocity ``z - s`` between a standardized core ``s`` (t=0) and Gaussian noise
``z`` (t=1). New cores are drawn by integrating the learned ODE from t=1 back
to t=0 with classic RK4 and decoded as ``U mat(s) V^T``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import CoreBatch, MatrixBatch, StiefelPair, mat, vec
from .errors import ConfigError, NonFiniteLoss, NonFiniteState, ShapeMismatch
from .rng import rng_stream

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass
class FlowConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 256
    hidden: tuple[int, ...] = (128, 128)
    time_dim: int = 32
    seed: int = 0
    ode_steps: int = 101
    log_stride: int = 10

    def validate(self):
        if self.steps < 0 or self.batch_size < 1 or self.ode_steps < 2 or self.log_stride < 1:
            raise ConfigError("flow steps >= 0, batch_size >= 1, ode_steps >= 2 required")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ConfigError("time_dim must be a positive even number")
        if self.lr <= 0:
            raise ConfigError("flow learning rate must be positive")


def desk_flow_config(seed: int = 0, **kw) -> FlowConfig:
    """Preset for the 64 x 64, rank-8 benchmarks: longer training at a lower
    rate, which keeps a 256-sample fit from collapsing onto the training set."""
    return FlowConfig(**{"steps": 5000, "lr": 2e-4, "seed": seed, **kw})


# -- core extraction and decoding ------------------------------------------

def extract_cores(batch, pair: StiefelPair) -> CoreBatch:
    """``s_i = vec(U^T M_i V)`` with column stacking."""
    X = batch.data if isinstance(batch, MatrixBatch) else np.asarray(batch, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.shape[1] != pair.U.shape[0] or X.shape[2] != pair.V.shape[0]:
        raise ShapeMismatch(f"matrices {X.shape[1:]} do not match factors {pair.U.shape}, {pair.V.shape}")
    S = pair.U.T @ X @ pair.V
    return CoreBatch(vec(S), pair.rank, X.shape[1], X.shape[2])


def decode(cores, pair: StiefelPair) -> MatrixBatch:
    """``M_i = U mat(s_i) V^T``."""
    s = cores.vectors if isinstance(cores, CoreBatch) else np.atleast_2d(np.asarray(cores, dtype=np.float64))
    R = pair.rank
    if s.shape[1] != R * R:
        raise ShapeMismatch(f"core width {s.shape[1]} does not match rank {R}")
    return MatrixBatch(pair.U @ mat(s, R) @ pair.V.T)


# -- velocity network -------------------------------------------------------

def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def time_features(t, width: int) -> np.ndarray:
    """``[sin(2 pi 2^k t), cos(2 pi 2^k t)]`` for ``k < width / 2``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 2.0 ** np.arange(width // 2)
    ang = 2.0 * np.pi * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class VelocityNet:
    """SiLU MLP on ``[x, time_features(t)]`` with per-coordinate standardization.

    Coordinates whose recorded std sits at the floor are constant in the
    training data. They are hidden from the network input, get zero velocity
    and are pinned to their mean when sampling.
    """

    def __init__(self, d: int, hidden=(128, 128), time_dim: int = 32, weights=None, biases=None, mean=None, std=None):
        self.d = int(d)
        self.time_dim = int(time_dim)
        self.sizes = [self.d + self.time_dim, *map(int, hidden), self.d]
        if weights is None:
            weights = [np.zeros((a, b)) for a, b in zip(self.sizes[:-1], self.sizes[1:])]
        if biases is None:
            biases = [np.zeros(b) for b in self.sizes[1:]]
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for w, b, (a, c) in zip(self.weights, self.biases, zip(self.sizes[:-1], self.sizes[1:])):
            if w.shape != (a, c) or b.shape != (c,):
                raise ShapeMismatch(f"layer shapes {w.shape}, {b.shape} do not match sizes {self.sizes}")
        self.mean = np.zeros(self.d) if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = np.ones(self.d) if std is None else np.asarray(std, dtype=np.float64)

    @classmethod
    def init(cls, d: int, hidden=(128, 128), time_dim: int = 32, seed: int = 0, zero_final: bool = True):
        """Glorot-uniform weights, zero biases; the last layer starts at zero."""
        net = cls(d, hidden, time_dim)
        rng = rng_stream(seed, 0x1A7E)
        last = len(net.weights) - 1
        for i, w in enumerate(net.weights):
            if i == last and zero_final:
                continue
            a = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            net.weights[i] = (2.0 * rng.uniform(w.shape) - 1.0) * a
        return net

    @property
    def active(self) -> np.ndarray:
        return self.std > STD_FLOOR

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(self.sizes[1:-1])

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params:
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {theta.size}")
        pos = 0
        for i in range(len(self.weights)):
            w, b = self.weights[i], self.biases[i]
            self.weights[i] = theta[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = theta[pos:pos + b.size].copy()
            pos += b.size

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "VelocityNet":
        return VelocityNet(self.d, self.hidden, self.time_dim, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], self.mean.copy(), self.std.copy())

    def _inputs(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            t = np.full(x.shape[0], float(t))
        active = self.active
        if not active.all():
            x = np.where(active, x, 0.0)
        return np.concatenate([x, time_features(t, self.time_dim)], axis=1)

    def forward(self, x, t, cache: list | None = None) -> np.ndarray:
        h = self._inputs(x, t)
        last = len(self.weights) - 1
        if cache is not None:
            cache.append(h)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            if i == last:
                active = self.active
                return a if active.all() else np.where(active, a, 0.0)
            sig = _sigmoid(a)
            h = a * sig
            if cache is not None:
                cache.append((a, sig, h))
        return h

    __call__ = forward

    def backward(self, cache: list, grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients (``[dW0, db0, dW1, ...]``) given ``d loss / d output``."""
        grads: list[np.ndarray] = []
        active = self.active
        g = grad_out if active.all() else np.where(active, grad_out, 0.0)
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = cache[0] if i == 0 else cache[i][2]
            grads = [h_in.T @ g, g.sum(axis=0)] + grads
            if i == 0:
                break
            a, sig, _ = cache[i]
            g = (g @ self.weights[i].T) * (sig * (1.0 + a * (1.0 - sig)))
        return grads


def velocity_forward(net: VelocityNet, x, t) -> np.ndarray:
    return net.forward(x, t)


def cfm_loss_and_grad(net: VelocityNet, s: np.ndarray, z: np.ndarray, t: np.ndarray):
    """Flow-matching loss ``mean_i ||v((1-t_i) s_i + t_i z_i, t_i) - (z_i - s_i)||^2`` and its gradient."""
    s = np.atleast_2d(s)
    z = np.atleast_2d(z)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    xt = (1.0 - t)[:, None] * s + t[:, None] * z
    target = z - s
    cache: list = []
    out = net.forward(xt, t, cache)
    diff = out - target
    n = s.shape[0]
    loss = float(np.sum(diff * diff)) / n
    return loss, net.backward(cache, (2.0 / n) * diff)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def standardize(vectors: np.ndarray):
    mean = vectors.mean(axis=0)
    std = np.maximum(vectors.std(axis=0), STD_FLOOR)
    return (vectors - mean) / std, mean, std


def train_flow(cores, cfg: FlowConfig, net: VelocityNet | None = None):
    """Train the velocity field on standardized cores; returns ``(net, trace)``.

    ``trace`` holds ``(step, loss)`` pairs every ``cfg.log_stride`` steps.
    """
    cfg.validate()
    data = cores.vectors if isinstance(cores, CoreBatch) else np.atleast_2d(np.asarray(cores, dtype=np.float64))
    n, d = data.shape
    if n < 1:
        raise ConfigError("no training cores")
    x, mean, std = standardize(data)
    if net is None:
        net = VelocityNet.init(d, cfg.hidden, cfg.time_dim, cfg.seed)
    net.mean, net.std = mean, std
    bs = min(cfg.batch_size, n)
    rng = rng_stream(cfg.seed, 0xF10)
    params = net.params()
    opt = Adam(params, cfg.lr)
    trace: list[tuple[int, float]] = []
    perm, pos = rng.permutation(n), 0
    for step in range(cfg.steps):
        if pos + bs > n:
            perm, pos = rng.permutation(n), 0
        idx = np.sort(perm[pos:pos + bs])
        pos += bs
        z = rng.normal((bs, d))
        t = rng.uniform(bs)
        loss, grads = cfm_loss_and_grad(net, x[idx], z, t)
        if not np.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        if step % cfg.log_stride == 0:
            trace.append((step, loss))
        opt.step(params, grads)
    return net, trace


# -- sampling ---------------------------------------------------------------

def integrate_rk4(field, x1: np.ndarray, ode_steps: int = 101) -> np.ndarray:
    """Integrate ``dx/dt = field(x, t)`` from t=1 to t=0 on ``ode_steps`` grid points."""
    x = np.array(x1, dtype=np.float64)
    h = -1.0 / (ode_steps - 1)
    for k in range(ode_steps - 1):
        t = 1.0 + k * h
        k1 = field(x, t)
        k2 = field(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = field(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = field(x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"ODE state became non-finite at t={t + h:.4f}")
    return x


def base_noise(n: int, d: int, seed: int) -> np.ndarray:
    """Gaussian start points; sample ``i`` uses stream ``(seed, i)``."""
    return np.stack([rng_stream(seed, i).normal(d) for i in range(n)]) if n else np.zeros((0, d))


def sample_vectors(net: VelocityNet, n: int, ode_steps: int = 101, seed: int = 0) -> np.ndarray:
    """Draw ``n`` vectors by reversing the learned flow, then undo standardization."""
    z = base_noise(n, net.d, seed)
    x0 = integrate_rk4(net.forward, z, ode_steps)
    x0[:, ~net.active] = 0.0
    return x0 * net.std + net.mean


def sample_cores(net: VelocityNet, n: int, ode_steps: int = 101, seed: int = 0) -> CoreBatch:
    R = int(round(np.sqrt(net.d)))
    if R * R != net.d:
        raise ShapeMismatch(f"flow width {net.d} is not a perfect square")
    return CoreBatch(sample_vectors(net, n, ode_steps, seed), R)
