"""Precise region pooling: exact integrals of the bilinear surface over bins.

The bilinearly interpolated surface is a sum of separable tent contributions,
so its integral over an axis-aligned bin factorizes per grid point into a
product of 1-D tent integrals:

    integral over bin of f  =  sum_{i,j} w[i,j] * X(j) * Y(i)

where ``X(j)`` integrates ``max(0, 1-|x-j|)`` over the bin's x-extent and
``Y(i)`` the analogous y-extent.  Each 1-D integral is a piecewise quadratic
with the explicit antiderivative implemented below, which makes the pooled
average, its coordinate gradients, and its feature gradients all closed-form.

Also provides the quantized RoI pooling and RoI Align baselines and a
midpoint Riemann-sum oracle used to cross-check the exact integral.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBoxError, IouPostError
from .featmap import FeatureMap, sample_grid
from .geometry import BoundingBox, require_valid

# Bin extents below this are clamped before dividing by area; the evaluation
# is reported as clamped so callers can freeze pathological boxes.
MIN_BIN_EXTENT = 1e-6


@dataclass(frozen=True)
class Bin:
    """One pooling cell: top-left (x1, y1), bottom-right (x2, y2), continuous coords."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @staticmethod
    def from_box(box: BoundingBox) -> "Bin":
        return Bin(box.x0, box.y0, box.x1, box.y1)


@dataclass(frozen=True)
class PoolGrid:
    """Output resolution of RoI pooling: bins per RoI side."""

    k_h: int = 7
    k_w: int = 7

    def __post_init__(self) -> None:
        if self.k_h < 1 or self.k_w < 1:
            raise IouPostError(f"pool grid must be at least 1x1, got {self.k_h}x{self.k_w}")


def _require_bin(b: Bin) -> None:
    if not (b.x2 > b.x1 and b.y2 > b.y1):
        raise DegenerateBoxError(f"degenerate bin: {b}")


def tent_antiderivative(s: float) -> float:
    """Integral of the unit tent max(0, 1-|u|) from -inf to s."""
    if s <= -1.0:
        return 0.0
    if s <= 0.0:
        t = s + 1.0
        return 0.5 * t * t
    if s <= 1.0:
        return 0.5 + s - 0.5 * s * s
    return 1.0


def _tent_antideriv_arr(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    neg = np.clip(s, -1.0, 0.0) + 1.0
    pos = np.clip(s, 0.0, 1.0)
    return np.where(s <= 0.0, 0.5 * neg * neg, 0.5 + pos - 0.5 * pos * pos)


def _interval_weights(a: float, b: float, n: int) -> np.ndarray:
    """Integral of each tent centered at k = 0..n-1 over [a, b]."""
    ks = np.arange(n, dtype=float)
    return _tent_antideriv_arr(b - ks) - _tent_antideriv_arr(a - ks)


def _point_weights(x: float, n: int) -> np.ndarray:
    ks = np.arange(n, dtype=float)
    return np.clip(1.0 - np.abs(x - ks), 0.0, None)


def _clamped_area(b: Bin) -> tuple[float, float, bool]:
    w, h = b.width, b.height
    clamped = w < MIN_BIN_EXTENT or h < MIN_BIN_EXTENT
    return max(w, MIN_BIN_EXTENT), max(h, MIN_BIN_EXTENT), clamped


def prpool_bin_flagged(fm: FeatureMap, b: Bin, c: int) -> tuple[float, bool]:
    """Exact average of the bilinear surface over a bin, plus the clamp flag."""
    _require_bin(b)
    fm.check_channel(c)
    wc, hc, clamped = _clamped_area(b)
    xw = _interval_weights(b.x1, b.x2, fm.width)
    yw = _interval_weights(b.y1, b.y2, fm.height)
    total = yw @ fm.values[:, :, c] @ xw
    return float(total / (wc * hc)), clamped


def prpool_bin(fm: FeatureMap, b: Bin, c: int) -> float:
    """Exact average of the bilinear surface over a bin (zero-padded outside the grid)."""
    return prpool_bin_flagged(fm, b, c)[0]


def _is_interior(fm: FeatureMap, b: Bin) -> bool:
    # Inside the region where the tent basis forms a partition of unity.
    return b.x1 >= 0.0 and b.y1 >= 0.0 and b.x2 <= fm.width - 1 and b.y2 <= fm.height - 1


def prpool_grad_coords(fm: FeatureMap, b: Bin, c: int) -> np.ndarray:
    """Analytic gradient of :func:`prpool_bin` w.r.t. (x1, y1, x2, y2).

    Each component combines the pooled average with the closed-form line
    integral of the surface along the moving edge.  For bins interior to the
    grid the feature window is centered by its midrange first: the gradient
    of a constant surface is identically zero there, so centering is exact
    and makes the constant-map gradient cancel bitwise.
    """
    return _grad_coords_multi(fm, b, channels=(c,))[0]


def prpool_grad_coords_channels(fm: FeatureMap, b: Bin) -> np.ndarray:
    """Per-channel coordinate gradients, shape (C, 4)."""
    return _grad_coords_multi(fm, b, channels=range(fm.channels))


def _grad_coords_multi(fm: FeatureMap, b: Bin, channels) -> np.ndarray:
    _require_bin(b)
    channels = tuple(channels)
    wc, hc, _ = _clamped_area(b)
    area = wc * hc
    interior = _is_interior(fm, b)
    xw = _interval_weights(b.x1, b.x2, fm.width)
    yw = _interval_weights(b.y1, b.y2, fm.height)
    tx1 = _point_weights(b.x1, fm.width)
    tx2 = _point_weights(b.x2, fm.width)
    ty1 = _point_weights(b.y1, fm.height)
    ty2 = _point_weights(b.y2, fm.height)

    out = np.empty((len(channels), 4))
    for idx, c in enumerate(channels):
        fm.check_channel(c)
        v = fm.values[:, :, c]
        if interior:
            v = v - 0.5 * (v.min() + v.max())
        row = yw @ v  # length W: y-integrated surface per column
        col = v @ xw  # length H: x-integrated surface per row
        pooled = (row @ xw) / area
        gx1 = pooled / wc - (row @ tx1) / area
        gx2 = (row @ tx2) / area - pooled / wc
        gy1 = pooled / hc - (ty1 @ col) / area
        gy2 = (ty2 @ col) / area - pooled / hc
        out[idx] = (gx1, gy1, gx2, gy2)
    return out


def prpool_grad_features(fm: FeatureMap, b: Bin, c: int, upstream: float = 1.0) -> np.ndarray:
    """Gradient of :func:`prpool_bin` w.r.t. every grid value, shape (H, W).

    Nonzero only for grid points within distance 1 of the bin; scaled by the
    upstream gradient.  Identical for every channel; ``c`` is validated only.
    """
    _require_bin(b)
    fm.check_channel(c)
    wc, hc, _ = _clamped_area(b)
    xw = _interval_weights(b.x1, b.x2, fm.width)
    yw = _interval_weights(b.y1, b.y2, fm.height)
    return np.outer(yw, xw) * (upstream / (wc * hc))


def _partition_weights(lo: float, hi: float, k: int, n: int) -> np.ndarray:
    """(k, n) tent-integral weights for k equal sub-intervals of [lo, hi]."""
    edges = lo + (hi - lo) * np.arange(k + 1) / k
    anti = _tent_antideriv_arr(edges[:, None] - np.arange(n, dtype=float)[None, :])
    return anti[1:] - anti[:-1]


def prpool_roi(fm: FeatureMap, roi: BoundingBox, grid: PoolGrid = PoolGrid()) -> np.ndarray:
    """Exact pooled feature of an RoI split into k_h x k_w equal bins, shape (k_h, k_w, C)."""
    require_valid(roi, "roi")
    tx = _partition_weights(roi.x0, roi.x1, grid.k_w, fm.width)
    ty = _partition_weights(roi.y0, roi.y1, grid.k_h, fm.height)
    bw = max(roi.width / grid.k_w, MIN_BIN_EXTENT)
    bh = max(roi.height / grid.k_h, MIN_BIN_EXTENT)
    return np.einsum("ph,hwc,qw->pqc", ty, fm.values, tx) / (bw * bh)


def prpool_roi_grad_coords(fm: FeatureMap, roi: BoundingBox, grid: PoolGrid = PoolGrid()) -> np.ndarray:
    """Gradient of every pooled cell w.r.t. the RoI corners, shape (k_h, k_w, C, 4).

    Chains the per-bin gradient through the equal-partition map: bin edges are
    affine in the RoI corners with weights q/k_w along x and p/k_h along y.
    """
    require_valid(roi, "roi")
    out = np.empty((grid.k_h, grid.k_w, fm.channels, 4))
    for p in range(grid.k_h):
        fy1 = p / grid.k_h
        fy2 = (p + 1) / grid.k_h
        by1 = roi.y0 + roi.height * fy1
        by2 = roi.y0 + roi.height * fy2
        for q in range(grid.k_w):
            fx1 = q / grid.k_w
            fx2 = (q + 1) / grid.k_w
            bx1 = roi.x0 + roi.width * fx1
            bx2 = roi.x0 + roi.width * fx2
            g = prpool_grad_coords_channels(fm, Bin(bx1, by1, bx2, by2))
            out[p, q, :, 0] = g[:, 0] * (1.0 - fx1) + g[:, 2] * (1.0 - fx2)
            out[p, q, :, 1] = g[:, 1] * (1.0 - fy1) + g[:, 3] * (1.0 - fy2)
            out[p, q, :, 2] = g[:, 0] * fx1 + g[:, 2] * fx2
            out[p, q, :, 3] = g[:, 1] * fy1 + g[:, 3] * fy2
    return out


def roipool_quantized(
    fm: FeatureMap, roi: BoundingBox, grid: PoolGrid = PoolGrid(), use_max: bool = False
) -> np.ndarray:
    """Classic quantized RoI pooling: round bin borders, pool enclosed grid cells.

    Averages by default; ``use_max`` switches to max pooling for illustration.
    """
    require_valid(roi, "roi")
    xe = roi.x0 + roi.width * np.arange(grid.k_w + 1) / grid.k_w
    ye = roi.y0 + roi.height * np.arange(grid.k_h + 1) / grid.k_h
    xq = np.floor(xe + 0.5).astype(int)
    yq = np.floor(ye + 0.5).astype(int)
    out = np.empty((grid.k_h, grid.k_w, fm.channels))
    for p in range(grid.k_h):
        i0, i1 = _cell_span(yq[p], yq[p + 1], fm.height)
        for q in range(grid.k_w):
            j0, j1 = _cell_span(xq[q], xq[q + 1], fm.width)
            block = fm.values[i0:i1, j0:j1, :]
            out[p, q, :] = block.max(axis=(0, 1)) if use_max else block.mean(axis=(0, 1))
    return out


def _cell_span(lo: int, hi: int, n: int) -> tuple[int, int]:
    lo = int(np.clip(lo, 0, n - 1))
    hi = int(np.clip(hi, lo + 1, n))
    return lo, hi


def roialign(
    fm: FeatureMap, roi: BoundingBox, grid: PoolGrid = PoolGrid(), n_samples: int = 4
) -> np.ndarray:
    """RoI Align: average of n_samples^2 bilinear samples per bin, shape (k_h, k_w, C)."""
    require_valid(roi, "roi")
    if n_samples < 1:
        raise IouPostError(f"n_samples must be >= 1, got {n_samples}")
    bw = roi.width / grid.k_w
    bh = roi.height / grid.k_h
    xs = roi.x0 + bw * (np.arange(grid.k_w * n_samples) + 0.5) / n_samples
    ys = roi.y0 + bh * (np.arange(grid.k_h * n_samples) + 0.5) / n_samples
    out = np.empty((grid.k_h, grid.k_w, fm.channels))
    for c in range(fm.channels):
        lattice = sample_grid(fm, xs, ys, c)
        blocks = lattice.reshape(grid.k_h, n_samples, grid.k_w, n_samples)
        out[:, :, c] = blocks.mean(axis=(1, 3))
    return out


def riemann_oracle(fm: FeatureMap, b: Bin, c: int, resolution: int) -> float:
    """Midpoint Riemann sum of the bilinear surface over the bin, divided by area.

    ``resolution`` is the number of subdivisions per unit length on each axis.
    Independent of the closed-form path: evaluates the surface pointwise.
    """
    _require_bin(b)
    if resolution < 1:
        raise IouPostError(f"resolution must be >= 1, got {resolution}")
    nx = max(1, int(np.ceil(b.width * resolution - 1e-12)))
    ny = max(1, int(np.ceil(b.height * resolution - 1e-12)))
    xs = b.x1 + b.width * (np.arange(nx) + 0.5) / nx
    ys = b.y1 + b.height * (np.arange(ny) + 0.5) / ny
    return float(sample_grid(fm, xs, ys, c).mean())
