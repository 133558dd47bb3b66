"""Containers passed between pipeline stages."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch


@dataclass
class MatrixBatch:
    """``N`` matrices of shape ``m1 x m2`` with an optional boolean observation mask."""

    data: np.ndarray
    mask: np.ndarray | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise ShapeMismatch(f"batch data must be (N, m1, m2), got {self.data.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape:
                raise ShapeMismatch(f"mask shape {self.mask.shape} != data shape {self.data.shape}")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def complete(self) -> bool:
        return self.mask is None or bool(self.mask.all())

    def observed(self) -> np.ndarray:
        """``P_Omega(M)``: observed entries kept, missing entries zeroed."""
        if self.mask is None:
            return self.data
        return np.where(self.mask, self.data, 0.0)

    def subset(self, idx) -> "MatrixBatch":
        return MatrixBatch(self.data[idx], None if self.mask is None else self.mask[idx], dict(self.meta))


@dataclass
class StiefelPair:
    """Shared row/column factors ``U`` (m1 x R) and ``V`` (m2 x R)."""

    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[1]:
            raise ShapeMismatch(f"incompatible factors {self.U.shape}, {self.V.shape}")

    @property
    def rank(self) -> int:
        return self.U.shape[1]


@dataclass
class CoreBatch:
    """Core vectors ``s = vec(S)`` (column stacking) of dimension ``d = R**2``."""

    vectors: np.ndarray
    R: int
    m1: int = 0
    m2: int = 0

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if self.vectors.shape[1] != self.R * self.R:
            raise ShapeMismatch(f"core width {self.vectors.shape[1]} != R^2 = {self.R * self.R}")

    @property
    def d(self) -> int:
        return self.R * self.R

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    def matrices(self) -> np.ndarray:
        return mat(self.vectors, self.R)


def vec(S: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization; works on ``(R, R)`` or ``(N, R, R)``."""
    S = np.asarray(S)
    return np.swapaxes(S, -1, -2).reshape(S.shape[:-2] + (-1,))


def mat(s: np.ndarray, R: int) -> np.ndarray:
    """Inverse of :func:`vec`."""
    s = np.asarray(s)
    return np.swapaxes(s.reshape(s.shape[:-1] + (R, R)), -1, -2)
