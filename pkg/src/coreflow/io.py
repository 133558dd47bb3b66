"""Binary file formats, run configuration and loss-trace CSVs.

All multi-byte values are little-endian; reals are float64. Writes go to a
temporary file in the target directory and are renamed into place.
"""
from __future__ import annotations

import copy
import csv
import io as _io
import json
import os
import struct
import tempfile
import warnings
from pathlib import Path

import numpy as np

from .data import MatrixBatch, StiefelPair
from .errors import (BadMagic, ConfigError, FormatError, LooseOrthonormality, TruncatedPayload,
                     VersionMismatch)
from .flow import VelocityNet

VERSION = 1
_U32 = struct.Struct("<I")


def _atomic_write(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, magic: bytes):
        self.buf = buf
        self.pos = 0
        if buf[:4] != magic:
            raise BadMagic(f"expected magic {magic!r}, found {bytes(buf[:4])!r}")
        self.pos = 4
        version = self.u32()
        if version != VERSION:
            raise VersionMismatch(f"unsupported version {version} (expected {VERSION})")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos


def _header(magic: bytes, *fields: int) -> bytes:
    return magic + _U32.pack(VERSION) + b"".join(_U32.pack(int(f)) for f in fields)


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


# -- matrix batches ---------------------------------------------------------

def encode_batch(batch: MatrixBatch) -> bytes:
    n, (m1, m2) = batch.n, batch.shape
    out = _header(b"CFMB", n, m1, m2) + _f64(batch.data)
    if batch.meta:
        text = "".join(f"{k}={v}\n" for k, v in batch.meta.items()).encode("utf-8")
        out += _U32.pack(len(text)) + text
    return out


def decode_batch(buf: bytes) -> MatrixBatch:
    r = _Reader(buf, b"CFMB")
    n, m1, m2 = r.u32(), r.u32(), r.u32()
    data = r.f64(n * m1 * m2).reshape(n, m1, m2)
    meta: dict[str, str] = {}
    if r.remaining:
        length = r.u32()
        text = r.take(length).decode("utf-8")
        if r.remaining:
            raise FormatError(f"{r.remaining} unexpected trailing bytes")
        for line in text.splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"metadata line without '=': {line!r}")
            meta[key] = value
    return MatrixBatch(data, meta=meta)


def write_batch(path, batch: MatrixBatch):
    _atomic_write(path, encode_batch(batch))


def read_batch(path) -> MatrixBatch:
    return decode_batch(Path(path).read_bytes())


# -- masks --------------------------------------------------------------------

def encode_mask(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask)
    n, m1, m2 = mask.shape
    return _header(b"CFMK", n, m1, m2) + np.ascontiguousarray(mask, dtype=np.uint8).tobytes()


def decode_mask(buf: bytes) -> np.ndarray:
    r = _Reader(buf, b"CFMK")
    n, m1, m2 = r.u32(), r.u32(), r.u32()
    raw = np.frombuffer(r.take(n * m1 * m2), dtype=np.uint8)
    if r.remaining:
        raise FormatError(f"{r.remaining} unexpected trailing bytes")
    if np.any(raw > 1):
        raise FormatError("mask payload must contain only 0 or 1")
    return raw.reshape(n, m1, m2).astype(bool)


def write_mask(path, mask: np.ndarray):
    _atomic_write(path, encode_mask(mask))


def read_mask(path) -> np.ndarray:
    return decode_mask(Path(path).read_bytes())


def read_masked_batch(batch_path, mask_path=None) -> MatrixBatch:
    batch = read_batch(batch_path)
    if mask_path is not None:
        mask = read_mask(mask_path)
        if mask.shape != batch.data.shape:
            raise FormatError(f"mask shape {mask.shape} does not match batch {batch.data.shape}")
        batch.mask = mask
    return batch


# -- subspaces ----------------------------------------------------------------

def encode_subspaces(pair: StiefelPair) -> bytes:
    m1, R = pair.U.shape
    m2 = pair.V.shape[0]
    return _header(b"CFSS", m1, m2, R) + _f64(pair.U) + _f64(pair.V)


def decode_subspaces(buf: bytes) -> StiefelPair:
    r = _Reader(buf, b"CFSS")
    m1, m2, R = r.u32(), r.u32(), r.u32()
    U = r.f64(m1 * R).reshape(m1, R)
    V = r.f64(m2 * R).reshape(m2, R)
    if r.remaining:
        raise FormatError(f"{r.remaining} unexpected trailing bytes")
    for name, W in (("U", U), ("V", V)):
        err = float(np.max(np.abs(W.T @ W - np.eye(R)))) if R else 0.0
        if err > 1e-6:
            warnings.warn(f"{name} deviates from orthonormality by {err:.2e}", LooseOrthonormality, stacklevel=2)
    return StiefelPair(U, V)


def write_subspaces(path, pair: StiefelPair):
    _atomic_write(path, encode_subspaces(pair))


def read_subspaces(path) -> StiefelPair:
    return decode_subspaces(Path(path).read_bytes())


# -- velocity networks --------------------------------------------------------

def encode_flow(net: VelocityNet) -> bytes:
    out = _header(b"CFNN", net.d, len(net.sizes)) + b"".join(_U32.pack(s) for s in net.sizes)
    return out + _f64(net.mean) + _f64(net.std) + _f64(net.flat())


def decode_flow(buf: bytes) -> VelocityNet:
    r = _Reader(buf, b"CFNN")
    d, k = r.u32(), r.u32()
    sizes = [r.u32() for _ in range(k)]
    if k < 2 or sizes[-1] != d or sizes[0] <= d:
        raise FormatError(f"layer sizes {sizes} inconsistent with core width {d}")
    mean, std = r.f64(d), r.f64(d)
    net = VelocityNet(d, sizes[1:-1], sizes[0] - d, mean=mean, std=std)
    theta = r.f64(net.n_params)
    if r.remaining:
        raise FormatError(f"parameter count mismatch: {r.remaining} extra bytes")
    net.set_flat(theta)
    return net


def write_flow(path, net: VelocityNet):
    _atomic_write(path, encode_flow(net))


def read_flow(path) -> VelocityNet:
    return decode_flow(Path(path).read_bytes())


# -- loss traces --------------------------------------------------------------

def write_trace(path, trace):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for step, loss in trace:
        w.writerow([int(step), repr(float(loss))])
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def read_trace(path) -> list[tuple[int, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step", "loss"]:
        raise FormatError("loss trace must start with header 'step,loss'")
    return [(int(a), float(b)) for a, b in rows[1:]]


# -- configuration ------------------------------------------------------------

DEFAULT_CONFIG = {
    "data": {"case": "blobs", "m1": 64, "m2": 64, "rank": 8, "n": 256, "seed": 0,
             "p_miss": 0.0, "mask_seed": 1, "n_test": 500, "test_seed": 1000, "patch": False},
    "stage1": {"steps": 300, "lr_u": 0.05, "lr_v": 0.05, "batch_size": None, "epochs": 20,
               "seed": 0, "log_stride": 1, "early_stop": True, "stop_tol": 1e-10, "stop_window": 20},
    "flow": {"steps": 2000, "lr": 1e-3, "batch_size": 256, "hidden": [128, 128], "time_dim": 32,
             "seed": 0, "ode_steps": 101, "log_stride": 10},
    "eval": {"n_gen": 500, "sample_seed": 0, "repeats": 3},
    "baseline": {"kappa0": 1.0, "nu0": None, "psi0_scale": 1.0, "seed": 0},
}


def merge_config(base: dict, override: dict) -> dict:
    """Overlay ``override`` onto ``base``; unknown sections or keys raise ``ConfigError``."""
    out = copy.deepcopy(base)
    for section, values in override.items():
        if section not in out:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            out[section][key] = value
    return out


def load_config(path=None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return merge_config(DEFAULT_CONFIG, doc)
