"""Numerical verification suites: analytic results against independent oracles.

Every suite compares a closed-form implementation against finite differences
or quadrature at the tolerances the package promises, and reports the worst
error seen.  The CLI's gradcheck command runs all of them and fails on any
violation; the test suite reuses them as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .featmap import FeatureMap
from .geometry import (
    BoundingBox,
    GroundTruthBox,
    decode_delta,
    encode_delta,
    iou,
    iou_grad,
)
from .pooling import (
    Bin,
    PoolGrid,
    prpool_bin,
    prpool_grad_coords,
    prpool_grad_features,
    prpool_roi,
    riemann_oracle,
    roialign,
)
from .predictor import MLPIoUPredictor, OracleIoUPredictor
from .seeding import child_rng


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_err: float
    tol: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        note = f" ({self.note})" if self.note else ""
        return f"{status:4s} {self.name}: max_err={self.max_err:.3e} tol={self.tol:.1e}{note}"


def _fd_central(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros(len(x))
    for k in range(len(x)):
        hi = x.copy()
        hi[k] += h
        lo = x.copy()
        lo[k] -= h
        g[k] = (f(hi) - f(lo)) / (2.0 * h)
    return g


def _random_overlapping_pair(rng: np.random.Generator, margin: float = 1e-3
                             ) -> tuple[BoundingBox, BoundingBox]:
    while True:
        ax0, ay0 = rng.uniform(0.0, 6.0, 2)
        aw, ah = rng.uniform(0.5, 4.0, 2)
        a = BoundingBox(ax0, ay0, ax0 + aw, ay0 + ah)
        shift = rng.uniform(-0.6, 0.6, 2) * (aw, ah)
        scale = np.exp(rng.uniform(-0.4, 0.4, 2))
        bw, bh = aw * scale[0], ah * scale[1]
        bcx = 0.5 * (a.x0 + a.x1) + shift[0]
        bcy = 0.5 * (a.y0 + a.y1) + shift[1]
        b = BoundingBox(bcx - 0.5 * bw, bcy - 0.5 * bh, bcx + 0.5 * bw, bcy + 0.5 * bh)
        if iou(a, b) <= 0.0:
            continue
        edges_a = a.as_array()
        edges_b = b.as_array()
        if np.min(np.abs(edges_a - edges_b)) < margin:
            continue
        return a, b


def check_iou_grad(seed: int, n: int = 1000, tol: float = 1e-4) -> CheckResult:
    rng = child_rng(seed, "iou-grad")
    h = 1e-5
    worst = 0.0
    for _ in range(n):
        a, b = _random_overlapping_pair(rng)
        analytic = iou_grad(a, b)
        fd = _fd_central(lambda v: iou(BoundingBox(*v), b), a.as_array(), h)
        worst = max(worst, float(np.max(np.abs(analytic - fd))))
    return CheckResult("iou_grad vs central differences", worst, tol, worst <= tol)


def check_delta_roundtrip(seed: int, n: int = 1000, tol: float = 1e-9) -> CheckResult:
    rng = child_rng(seed, "delta-roundtrip")
    worst = 0.0
    for _ in range(n):
        a, b = _random_overlapping_pair(rng, margin=0.0)
        restored = decode_delta(a, encode_delta(a, b))
        scale = np.maximum(1.0, np.abs(b.as_array()))
        worst = max(worst, float(np.max(np.abs(restored.as_array() - b.as_array()) / scale)))
    return CheckResult("box delta encode/decode round-trip", worst, tol, worst <= tol)


def _random_map(rng: np.random.Generator, h: int = 8, w: int = 8, c: int = 4) -> FeatureMap:
    return FeatureMap(rng.normal(size=(h, w, c)))


def _random_bin(rng: np.random.Generator, fm: FeatureMap, max_extent: float = 3.0) -> Bin:
    x1 = rng.uniform(-1.5, fm.width - 0.5)
    y1 = rng.uniform(-1.5, fm.height - 0.5)
    w = rng.uniform(0.3, max_extent)
    h = rng.uniform(0.3, max_extent)
    return Bin(x1, y1, x1 + w, y1 + h)


def check_prpool_vs_riemann(seed: int, n: int = 100, resolution: int = 512) -> CheckResult:
    rng = child_rng(seed, "prpool-riemann")
    worst = 0.0
    for _ in range(n):
        fm = _random_map(rng)
        b = _random_bin(rng, fm)
        c = int(rng.integers(fm.channels))
        v = prpool_bin(fm, b, c)
        r = riemann_oracle(fm, b, c, resolution)
        worst = max(worst, abs(v - r) / (1.0 + abs(v)))
    return CheckResult(f"prpool_bin vs riemann_oracle({resolution})", worst, 1e-5, worst <= 1e-5)


def check_prpool_grad_coords(seed: int, n: int = 100, tol: float = 1e-3) -> CheckResult:
    rng = child_rng(seed, "prpool-grad-coords")
    h = 1e-4
    worst = 0.0
    for _ in range(n):
        fm = _random_map(rng)
        b = _random_bin(rng, fm)
        c = int(rng.integers(fm.channels))
        analytic = prpool_grad_coords(fm, b, c)
        fd = _fd_central(lambda v: prpool_bin(fm, Bin(*v), c), np.array([b.x1, b.y1, b.x2, b.y2]), h)
        worst = max(worst, float(np.max(np.abs(analytic - fd))))
    const = FeatureMap(np.full((6, 7, 1), 2.25))
    g = prpool_grad_coords(const, Bin(0.8, 1.3, 4.1, 3.6), 0)
    exact_zero = bool(np.all(g == 0.0))
    return CheckResult(
        "prpool coordinate gradients vs central differences", worst, tol,
        worst <= tol and exact_zero,
        note="constant-map gradient exactly zero" if exact_zero else "constant-map gradient NOT exactly zero",
    )


def check_prpool_grad_features(seed: int, n: int = 20, tol: float = 1e-5) -> CheckResult:
    rng = child_rng(seed, "prpool-grad-features")
    h = 1e-5
    worst = 0.0
    sums_ok = True
    for _ in range(n):
        fm = _random_map(rng, c=1)
        b = _random_bin(rng, fm)
        grad = prpool_grad_features(fm, b, 0)
        base = fm.values[:, :, 0]
        for i in range(fm.height):
            for j in range(fm.width):
                bumped = base.copy()
                bumped[i, j] += h
                hi = prpool_bin(FeatureMap(bumped[:, :, None]), b, 0)
                bumped[i, j] -= 2 * h
                lo = prpool_bin(FeatureMap(bumped[:, :, None]), b, 0)
                worst = max(worst, abs(grad[i, j] - (hi - lo) / (2 * h)))
        x1 = rng.uniform(0.0, fm.width - 3.0)
        y1 = rng.uniform(0.0, fm.height - 3.0)
        interior = Bin(x1, y1, x1 + rng.uniform(0.5, 2.0), y1 + rng.uniform(0.5, 2.0))
        if abs(prpool_grad_features(fm, interior, 0).sum() - 1.0) > 1e-12:
            sums_ok = False
    return CheckResult(
        "prpool feature gradients vs central differences", worst, tol,
        worst <= tol and sums_ok,
        note="interior gradients sum to 1" if sums_ok else "interior gradient sum deviates from 1",
    )


def check_roialign_convergence(seed: int, n_rois: int = 50, tol: float = 1e-3) -> CheckResult:
    rng = child_rng(seed, "roialign")
    grid = PoolGrid(3, 3)
    samples = (2, 4, 8, 16, 32)
    errs = []
    cases = []
    for _ in range(n_rois):
        fm = _random_map(rng)
        x0 = rng.uniform(0.0, 3.0)
        y0 = rng.uniform(0.0, 3.0)
        roi = BoundingBox(x0, y0, x0 + rng.uniform(1.5, 3.0), y0 + rng.uniform(1.5, 3.0))
        cases.append((fm, roi, prpool_roi(fm, roi, grid)))
    for ns in samples:
        errs.append(max(float(np.max(np.abs(roialign(fm, roi, grid, ns) - exact)))
                        for fm, roi, exact in cases))
    monotone = all(errs[k + 1] < errs[k] for k in range(len(errs) - 1))
    final = errs[-1]
    return CheckResult(
        "roialign convergence to prpool", final, tol, monotone and final <= tol,
        note="errors " + " > ".join(f"{e:.2e}" for e in errs),
    )


def check_predictor_grads(seed: int, n: int = 100, tol: float = 1e-3) -> CheckResult:
    rng = child_rng(seed, "predictor-grads")
    h = 1e-4
    worst = 0.0
    fm = _random_map(rng, 10, 10, 2)
    gt = GroundTruthBox(BoundingBox(2.0, 2.5, 7.0, 7.5), class_id=0, object_id=0)
    oracle = OracleIoUPredictor([gt])
    mlp = MLPIoUPredictor.initialize(PoolGrid(3, 3), channels=2, hidden=16,
                                     seed=int(rng.integers(2**31)))
    checked = 0
    while checked < n:
        x0 = rng.uniform(1.0, 4.0)
        y0 = rng.uniform(1.0, 4.0)
        box = BoundingBox(x0, y0, x0 + rng.uniform(2.0, 4.0), y0 + rng.uniform(2.0, 4.0))
        if np.min(np.abs(box.as_array() - gt.box.as_array())) < 1e-2 or iou(box, gt.box) <= 0.05:
            continue
        pre = mlp.head.w1 @ mlp.head.pooled_input(fm, box) + mlp.head.b1
        if np.min(np.abs(pre)) < 1e-2:  # keep the FD stencil away from relu kinks
            continue
        for pred in (oracle, mlp):
            analytic = pred.grad_coords(fm, box)
            fd = _fd_central(lambda v: pred.value(fm, BoundingBox(*v)), box.as_array(), h)
            worst = max(worst, float(np.max(np.abs(analytic - fd))))
        checked += 1
    return CheckResult("predictor grad_coords vs central differences", worst, tol, worst <= tol)


def run_all(seed: int, tolerance_scale: float = 1.0) -> list[CheckResult]:
    """Every verification suite at (optionally scaled) default tolerances."""
    results = [
        check_iou_grad(seed, tol=1e-4 * tolerance_scale),
        check_delta_roundtrip(seed, tol=1e-9 * tolerance_scale),
        check_prpool_vs_riemann(seed),
        check_prpool_grad_coords(seed, tol=1e-3 * tolerance_scale),
        check_prpool_grad_features(seed, tol=1e-5 * tolerance_scale),
        check_roialign_convergence(seed, tol=1e-3 * tolerance_scale),
        check_predictor_grads(seed, tol=1e-3 * tolerance_scale),
    ]
    return results


def all_passed(results: Sequence[CheckResult]) -> bool:
    return all(r.passed for r in results)
