"""Detection metrics: greedy matching, average precision, recall curves,
and positive-count histograms.

Matching is greedy in descending ranking score (cls_score by default, or
loc_score for localization-quality diagnostics): each detection takes the
highest-IoU unmatched same-class ground truth and is positive when that IoU
exceeds the test threshold.  Score ties break by input index, IoU ties by
lower object_id, so every pass is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import IouPostError, UndefinedMetricError
from .geometry import Detection, GroundTruthBox, iou

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))  # 0.50 .. 0.95
DEFAULT_HISTOGRAM_EDGES = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass(frozen=True)
class MatchRecord:
    det_index: int
    object_id: Optional[int]
    iou: float
    positive: bool


@dataclass
class MatchResult:
    records: list[MatchRecord]  # aligned with the input detection order
    omega_test: float

    @property
    def n_positive(self) -> int:
        return sum(r.positive for r in self.records)


def _ranking(dets: Sequence[Detection], rank_by: str) -> list[int]:
    if rank_by not in ("cls_score", "loc_score"):
        raise IouPostError(f"rank_by must be cls_score or loc_score, got {rank_by!r}")
    keys = []
    for d in dets:
        v = getattr(d, rank_by)
        if v is None:
            raise IouPostError(f"detection lacks {rank_by}, required for ranking")
        keys.append(float(v))
    return sorted(range(len(dets)), key=lambda k: (-keys[k], k))


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    omega_test: float,
    rank_by: str = "cls_score",
) -> MatchResult:
    """Greedy one-to-one matching; each ground truth yields at most one positive."""
    if not (0.0 < omega_test < 1.0):
        raise IouPostError(f"omega_test must be in (0, 1), got {omega_test}")
    taken: set[int] = set()
    records: list[Optional[MatchRecord]] = [None] * len(dets)
    gts_sorted = sorted(gts, key=lambda g: g.object_id)
    for k in _ranking(dets, rank_by):
        d = dets[k]
        best_gt: Optional[GroundTruthBox] = None
        best_iou = 0.0
        for g in gts_sorted:
            if g.class_id != d.class_id or g.object_id in taken:
                continue
            v = iou(d.box, g.box)
            if v > best_iou:  # strict: IoU ties keep the lower object_id
                best_gt, best_iou = g, v
        if best_gt is not None and best_iou > omega_test:
            taken.add(best_gt.object_id)
            records[k] = MatchRecord(k, best_gt.object_id, best_iou, True)
        else:
            records[k] = MatchRecord(k, None, best_iou, False)
    return MatchResult(records=[r for r in records if r is not None], omega_test=omega_test)


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    omega_test: float,
    rank_by: str = "cls_score",
) -> float:
    """101-point interpolated AP at one matching threshold."""
    if not gts:
        raise UndefinedMetricError("average precision is undefined without ground truth")
    if not dets:
        return 0.0
    result = match_detections(dets, gts, omega_test, rank_by)
    order = _ranking(dets, rank_by)
    tp = np.array([result.records[k].positive for k in order], dtype=float)
    cum_tp = np.cumsum(tp)
    precision = cum_tp / (np.arange(len(order)) + 1.0)
    recall = cum_tp / len(gts)
    # interpolated precision: running max from the right
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    pr = np.where(idx < len(recall), interp[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(pr.mean())


def ap_suite(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
             rank_by: str = "cls_score") -> dict[str, float]:
    """AP at thresholds 0.50:0.05:0.95 plus their mean and the decade points."""
    per_threshold = {t: average_precision(dets, gts, t, rank_by) for t in AP_THRESHOLDS}
    out = {"AP": float(np.mean(list(per_threshold.values())))}
    for t in (0.5, 0.6, 0.7, 0.8, 0.9):
        out[f"AP{int(round(t * 100))}"] = per_threshold[round(t, 2)]
    return out


def recall_curve(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    thresholds: Sequence[float],
    rank_by: str = "cls_score",
) -> list[tuple[float, float]]:
    """(threshold, recall) pairs; recall = positives / |gts| at each threshold."""
    if list(thresholds) != sorted(thresholds):
        raise IouPostError("thresholds must be sorted ascending")
    if not gts:
        raise UndefinedMetricError("recall is undefined without ground truth")
    out = []
    for t in thresholds:
        res = match_detections(dets, gts, t, rank_by)
        out.append((float(t), res.n_positive / len(gts)))
    return out


def positive_histogram(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    bins: Sequence[float] = DEFAULT_HISTOGRAM_EDGES,
    omega_test: float = 0.5,
    rank_by: str = "loc_score",
) -> np.ndarray:
    """Counts of positive detections bucketed by match IoU into (lo, hi] bins.

    Defaults rank by loc_score so that, with oracle localization confidence,
    each ground truth contributes its highest-IoU surviving detection.
    """
    edges = np.asarray(list(bins), dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise IouPostError("bins must be an increasing sequence of at least 2 edges")
    if edges[0] < 0.0 or edges[-1] > 1.0 + 1e-12:
        raise IouPostError("bin edges must lie in (0, 1]")
    counts = np.zeros(len(edges) - 1, dtype=int)
    result = match_detections(dets, gts, omega_test, rank_by)
    for r in result.records:
        if not r.positive:
            continue
        if r.iou <= edges[0] or r.iou > edges[-1]:
            continue
        b = int(np.searchsorted(edges, r.iou, side="left")) - 1
        counts[min(max(b, 0), len(counts) - 1)] += 1
    return counts
