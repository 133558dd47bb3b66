"""Non-overlapping patch rearrangement and its inverse.

An ``H x W`` matrix is cropped to multiples of the patch side ``p`` and each
``p x p`` tile (row-major tile order, row-major within a tile) becomes one
row of an ``(H_c W_c / p^2) x p^2`` patch matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch


@dataclass(frozen=True)
class PatchSpec:
    H: int
    W: int
    p: int

    @property
    def Hc(self) -> int:
        return (self.H // self.p) * self.p

    @property
    def Wc(self) -> int:
        return (self.W // self.p) * self.p

    @property
    def n_patches(self) -> int:
        return (self.Hc * self.Wc) // (self.p * self.p)

    @property
    def patch_dim(self) -> int:
        return self.p * self.p

    def to_meta(self) -> dict[str, str]:
        return {"patch_H": str(self.H), "patch_W": str(self.W), "patch_p": str(self.p)}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "PatchSpec":
        return cls(int(meta["patch_H"]), int(meta["patch_W"]), int(meta["patch_p"]))


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def plan(H: int, W: int) -> PatchSpec:
    """Patch side ``p = round((H W)^(1/4))``, at least 1."""
    if H < 1 or W < 1:
        raise ShapeMismatch("matrix dimensions must be positive")
    p = max(1, _round_half_away((H * W) ** 0.25))
    return PatchSpec(H, W, p)


def patchify(M: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Rearrange one matrix (or a stack ``(N, H, W)``) into patch rows."""
    M = np.asarray(M)
    if M.shape[-2:] != (spec.H, spec.W):
        raise ShapeMismatch(f"matrix shape {M.shape[-2:]} does not match plan {(spec.H, spec.W)}")
    p = spec.p
    lead = M.shape[:-2]
    c = M[..., : spec.Hc, : spec.Wc]
    tiles = c.reshape(lead + (spec.Hc // p, p, spec.Wc // p, p))
    tiles = np.moveaxis(tiles, -3, -2)  # (..., tile_row, tile_col, p, p)
    return tiles.reshape(lead + (spec.n_patches, spec.patch_dim)).copy()


def unpatchify(P: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Inverse of :func:`patchify` on the cropped ``H_c x W_c`` domain."""
    P = np.asarray(P)
    if P.shape[-2:] != (spec.n_patches, spec.patch_dim):
        raise ShapeMismatch(f"patch matrix shape {P.shape[-2:]} does not match plan")
    p = spec.p
    lead = P.shape[:-2]
    tiles = P.reshape(lead + (spec.Hc // p, spec.Wc // p, p, p))
    tiles = np.moveaxis(tiles, -2, -3)
    return tiles.reshape(lead + (spec.Hc, spec.Wc)).copy()


def crop(M: np.ndarray, spec: PatchSpec) -> np.ndarray:
    return np.asarray(M)[..., : spec.Hc, : spec.Wc]
