"""Continuous view over a discrete feature grid via bilinear interpolation.

Grid point ``(i, j)`` (row, column) sits at continuous coordinates
``(x=j, y=i)``.  The interpolated surface is zero-padded: coordinates outside
``[0, W-1] x [0, H-1]`` interpolate against virtual zero-valued neighbors, so
the surface decays linearly to zero over one unit and vanishes beyond.

The module also owns the PRFM binary feature-map format shared with the CLI:
magic ``PRFM``, version u16, then H, W, C as u32 little-endian, then H*W*C
float32 little-endian values in row-major (i, j, c) order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import IouPostError

PRFM_MAGIC = b"PRFM"
PRFM_VERSION = 1


class FeatureMap:
    """Immutable dense H x W x C real-valued grid."""

    def __init__(self, values: np.ndarray):
        arr = np.asarray(values, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise IouPostError(f"feature map must be (H, W, C) with positive dims, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise IouPostError("feature map values must be finite")
        arr = arr.copy()
        arr.flags.writeable = False
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def height(self) -> int:
        return self._values.shape[0]

    @property
    def width(self) -> int:
        return self._values.shape[1]

    @property
    def channels(self) -> int:
        return self._values.shape[2]

    def channel(self, c: int) -> np.ndarray:
        self.check_channel(c)
        return self._values[:, :, c]

    def check_channel(self, c: int) -> None:
        if not (isinstance(c, (int, np.integer)) and 0 <= c < self.channels):
            raise IouPostError(f"channel {c} out of range [0, {self.channels})")

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FeatureMap) and np.array_equal(self._values, other._values)

    def __repr__(self) -> str:
        return f"FeatureMap(H={self.height}, W={self.width}, C={self.channels})"


@dataclass(frozen=True)
class SamplePoint:
    x: float
    y: float


def interp_coeff(x: float, y: float, i: int, j: int) -> float:
    """Bilinear interpolation coefficient of grid point (i, j) at (x, y).

    x is paired with the column index j, y with the row index i.
    """
    return max(0.0, 1.0 - abs(x - j)) * max(0.0, 1.0 - abs(y - i))


def sample(fm: FeatureMap, point: Union[SamplePoint, tuple], c: int) -> float:
    """Bilinearly interpolated value of channel ``c`` at a continuous point."""
    fm.check_channel(c)
    if isinstance(point, SamplePoint):
        x, y = point.x, point.y
    else:
        x, y = point
    v = fm.values
    j0 = int(np.floor(x))
    i0 = int(np.floor(y))
    u = x - j0
    w = y - i0
    acc = 0.0
    for di, wy in ((0, 1.0 - w), (1, w)):
        i = i0 + di
        if wy == 0.0 or not (0 <= i < fm.height):
            continue
        for dj, wx in ((0, 1.0 - u), (1, u)):
            j = j0 + dj
            if wx == 0.0 or not (0 <= j < fm.width):
                continue
            acc += wy * wx * v[i, j, c]
    return float(acc)


def _tent_weights(coords: np.ndarray, n: int) -> np.ndarray:
    """(len(coords), n) matrix of tent weights max(0, 1 - |coord - k|)."""
    coords = np.asarray(coords, dtype=float)
    ks = np.arange(n, dtype=float)
    return np.clip(1.0 - np.abs(coords[:, None] - ks[None, :]), 0.0, None)


def sample_grid(fm: FeatureMap, xs: np.ndarray, ys: np.ndarray, c: int) -> np.ndarray:
    """Values of channel ``c`` on the product lattice ys x xs, shape (len(ys), len(xs)).

    Agrees with :func:`sample` pointwise; factorized for speed.
    """
    fm.check_channel(c)
    ax = _tent_weights(np.asarray(xs, dtype=float), fm.width)
    ay = _tent_weights(np.asarray(ys, dtype=float), fm.height)
    return ay @ fm.values[:, :, c] @ ax.T


def to_prfm_bytes(fm: FeatureMap) -> bytes:
    header = PRFM_MAGIC + struct.pack("<HIII", PRFM_VERSION, fm.height, fm.width, fm.channels)
    return header + fm.values.astype("<f4").tobytes(order="C")


def from_prfm_bytes(data: bytes) -> FeatureMap:
    if len(data) < 18 or data[:4] != PRFM_MAGIC:
        raise IouPostError("not a PRFM feature map (bad magic)")
    version, h, w, c = struct.unpack("<HIII", data[4:18])
    if version != PRFM_VERSION:
        raise IouPostError(f"unsupported PRFM version {version}")
    expected = 18 + h * w * c * 4
    if len(data) != expected:
        raise IouPostError(f"PRFM payload size mismatch: expected {expected} bytes, got {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=18).reshape(h, w, c)
    return FeatureMap(values.astype(float))


def write_prfm(fm: FeatureMap, path: Union[str, Path]) -> None:
    Path(path).write_bytes(to_prfm_bytes(fm))


def read_prfm(path: Union[str, Path]) -> FeatureMap:
    return from_prfm_bytes(Path(path).read_bytes())
