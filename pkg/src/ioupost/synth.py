"""Synthetic scenes and training data with controllable score/IoU misalignment.

Scenes are desk-scale stand-ins for real detection data: ground-truth boxes
placed in an image-sized feature grid, a rendered feature map from which the
true IoU of a query box is learnable, and jittered detections whose
classification scores correlate with true IoU at a configurable level.

Rendering (artifact-specific): each object gets a dedicated channel holding a
soft pyramid max(0, 1 - d) with d = max(|x-cx|/(w/2), |y-cy|/(h/2)) - the
value is 1 at the object center and falls to 0 at the box edge and beyond, so
exactly pooled features of a query box determine its overlap with the object.
Feature values are quantized to float32-representable numbers so the PRFM
file round-trip is exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, IouPostError, UndefinedMetricError
from .featmap import FeatureMap
from .geometry import BoundingBox, Detection, GroundTruthBox, iou, iou_matrix


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    objects: tuple[int, int] = (2, 4)  # inclusive count range
    size_range: tuple[float, float] = (14.0, 30.0)  # object box side lengths, pixels
    dets_per_object: int = 10
    score_iou_corr: float = 0.7  # rho: target corr(cls_score, true IoU)
    det_shift_frac: float = 0.08
    det_scale_log: float = 0.10
    channels: Optional[int] = None  # defaults to max object count
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 4 or self.height < 4:
            raise ConfigError(f"image too small: {self.width}x{self.height}")
        if not (1 <= self.objects[0] <= self.objects[1]):
            raise ConfigError(f"invalid object count range {self.objects}")
        if not (0.0 < self.size_range[0] <= self.size_range[1]):
            raise ConfigError(f"invalid size range {self.size_range}")
        if self.size_range[1] > min(self.width, self.height) - 4:
            raise ConfigError(
                f"objects of size {self.size_range[1]} do not fit a "
                f"{self.width}x{self.height} image"
            )
        if not (0.0 <= self.score_iou_corr <= 1.0):
            raise ConfigError(f"score_iou_corr must be in [0, 1], got {self.score_iou_corr}")
        if self.dets_per_object < 1:
            raise ConfigError("dets_per_object must be >= 1")

    @property
    def n_channels(self) -> int:
        return self.channels if self.channels is not None else self.objects[1]


@dataclass(frozen=True)
class AugmentConfig:
    shift_range: tuple[float, float] = (-0.25, 0.25)  # center shift, fraction of size
    scale_log_range: tuple[float, float] = (-0.3, 0.3)  # per-axis log scale
    aspect_range: tuple[float, float] = (0.0, 0.0)  # extra +x/-y log-scale jitter
    samples_per_gt: int = 32
    omega_train: float = 0.5
    n_bins: int = 10
    candidate_budget: int = 500_000  # random candidates per ground truth

    def __post_init__(self) -> None:
        if not (0.0 < self.omega_train < 1.0):
            raise ConfigError(f"omega_train must be in (0, 1), got {self.omega_train}")
        if self.samples_per_gt < 1 or self.n_bins < 1:
            raise ConfigError("samples_per_gt and n_bins must be >= 1")


@dataclass
class Scene:
    ground_truths: list[GroundTruthBox]
    featmap: FeatureMap
    detections: list[Detection]


def _render(gts: Sequence[GroundTruthBox], width: int, height: int, channels: int) -> FeatureMap:
    xs = np.arange(width, dtype=float)
    ys = np.arange(height, dtype=float)
    values = np.zeros((height, width, channels))
    for k, gt in enumerate(gts):
        b = gt.box
        cx, cy = b.center
        dx = np.abs(xs - cx) / (0.5 * b.width)
        dy = np.abs(ys - cy) / (0.5 * b.height)
        d = np.maximum(dx[None, :], dy[:, None])
        pyramid = np.clip(1.0 - d, 0.0, None)
        ch = k % channels
        values[:, :, ch] = np.maximum(values[:, :, ch], pyramid)
    # float32 quantization keeps the PRFM round-trip exact
    return FeatureMap(values.astype(np.float32).astype(float))


def _clip_box(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    out = arr.copy()
    out[..., 0] = np.clip(out[..., 0], 0.0, width - 1.0)
    out[..., 2] = np.clip(out[..., 2], 0.0, width - 1.0)
    out[..., 1] = np.clip(out[..., 1], 0.0, height - 1.0)
    out[..., 3] = np.clip(out[..., 3], 0.0, height - 1.0)
    return out


def _place_objects(cfg: SceneConfig, rng: np.random.Generator) -> list[GroundTruthBox]:
    n = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    gts: list[GroundTruthBox] = []
    for k in range(n):
        placed = None
        for _ in range(200):
            w = rng.uniform(*cfg.size_range)
            h = rng.uniform(*cfg.size_range)
            cx = rng.uniform(0.5 * w + 1.0, cfg.width - 1.0 - (0.5 * w + 1.0))
            cy = rng.uniform(0.5 * h + 1.0, cfg.height - 1.0 - (0.5 * h + 1.0))
            cand = BoundingBox(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
            if all(iou(cand, g.box) == 0.0 for g in gts):
                placed = cand
                break
        if placed is None:
            placed = cand  # crowded scene: accept the overlap
        gts.append(GroundTruthBox(box=placed, class_id=0, object_id=k))
    return gts


def _jitter_boxes(
    boxes: np.ndarray,
    n: int,
    rng: np.random.Generator,
    shift: tuple[float, float],
    scale_log: tuple[float, float],
    aspect: tuple[float, float],
) -> np.ndarray:
    """n jittered copies of each (4,) box row; returns (len(boxes)*n, 4)."""
    base = np.repeat(np.asarray(boxes, dtype=float).reshape(-1, 4), n, axis=0)
    w = base[:, 2] - base[:, 0]
    h = base[:, 3] - base[:, 1]
    cx = 0.5 * (base[:, 0] + base[:, 2]) + rng.uniform(*shift, size=len(base)) * w
    cy = 0.5 * (base[:, 1] + base[:, 3]) + rng.uniform(*shift, size=len(base)) * h
    a = rng.uniform(*aspect, size=len(base)) if aspect != (0.0, 0.0) else 0.0
    nw = w * np.exp(rng.uniform(*scale_log, size=len(base)) + a)
    nh = h * np.exp(rng.uniform(*scale_log, size=len(base)) - a)
    return np.stack([cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh], axis=1)


def generate_scene(cfg: SceneConfig) -> Scene:
    """Deterministic scene: ground truths, rendered feature map, jittered detections.

    Detection cls_scores are sampled so that corr(cls_score, true IoU)
    approximates cfg.score_iou_corr; loc_score carries the true IoU against
    the matched ground truth (the synthetic oracle).
    """
    rng = np.random.default_rng(cfg.seed)
    gts = _place_objects(cfg, rng)
    fm = _render(gts, cfg.width, cfg.height, cfg.n_channels)

    gt_arr = np.stack([g.box.as_array() for g in gts])
    cand = _jitter_boxes(gt_arr, cfg.dets_per_object, rng,
                         (-cfg.det_shift_frac, cfg.det_shift_frac),
                         (-cfg.det_scale_log, cfg.det_scale_log), (0.0, 0.0))
    cand = _clip_box(cand, cfg.width, cfg.height)
    ok = (cand[:, 2] - cand[:, 0] > 1e-6) & (cand[:, 3] - cand[:, 1] > 1e-6)
    cand = cand[ok]
    ious = iou_matrix(cand, gt_arr).max(axis=1)

    rho = cfg.score_iou_corr
    std = ious.std()
    z_iou = (ious - ious.mean()) / std if std > 0 else np.zeros_like(ious)
    noise = rng.normal(size=len(cand))
    z = rho * z_iou + np.sqrt(max(0.0, 1.0 - rho * rho)) * noise
    scores = np.clip(0.5 + 0.18 * z, 0.001, 0.999)

    dets = [
        Detection(box=BoundingBox.from_array(row), class_id=0,
                  cls_score=float(s), loc_score=float(u))
        for row, s, u in zip(cand, scores, ious)
    ]
    return Scene(ground_truths=gts, featmap=fm, detections=dets)


@dataclass(frozen=True)
class AugmentSample:
    box: BoundingBox
    ground_truth: GroundTruthBox
    iou_label: float  # raw IoU in [omega_train, 1]


def augment_ground_truth(
    gts: Sequence[GroundTruthBox],
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> list[AugmentSample]:
    """Jittered copies of each ground truth, filtered to IoU >= omega_train and
    resampled so the IoU histogram over [omega_train, 1] is uniform across bins.

    Uses vectorized rejection: candidates are drawn in rounds until each bin
    reaches its quota or the per-gt budget is exhausted; short bins warn, a
    ground truth with no surviving candidate warns and is skipped.
    """
    if not gts:
        raise IouPostError("augment_ground_truth requires at least one ground truth")
    # Stratify per ground truth: equal bin quotas per object keep both the IoU
    # histogram and the object/channel balance uniform.
    quota = int(np.ceil(cfg.samples_per_gt / cfg.n_bins))
    bin_width = (1.0 - cfg.omega_train) / cfg.n_bins
    out: list[AugmentSample] = []
    short_bins: set[int] = set()
    round_size = 2048
    for gt in gts:
        pools: list[list[AugmentSample]] = [[] for _ in range(cfg.n_bins)]
        survivors = 0
        spent = 0
        while spent < cfg.candidate_budget and any(len(p) < quota for p in pools):
            cand = _jitter_boxes(gt.box.as_array(), round_size, rng, cfg.shift_range,
                                 cfg.scale_log_range, cfg.aspect_range)
            ok = (cand[:, 2] - cand[:, 0] > 1e-6) & (cand[:, 3] - cand[:, 1] > 1e-6)
            cand = cand[ok]
            labels = iou_matrix(cand, gt.box.as_array()).ravel()
            keep = labels >= cfg.omega_train
            survivors += int(keep.sum())
            for row, u in zip(cand[keep], labels[keep]):
                bi = min(int((u - cfg.omega_train) / bin_width), cfg.n_bins - 1)
                if len(pools[bi]) < quota:
                    pools[bi].append(AugmentSample(BoundingBox.from_array(row), gt, float(u)))
            spent += round_size
        if survivors == 0:
            warnings.warn(
                f"no augmented candidate survived for ground truth object_id={gt.object_id}; skipped"
            )
            continue
        short_bins.update(i for i, p in enumerate(pools) if len(p) < quota)
        for p in pools:
            out.extend(p)
    if short_bins:
        warnings.warn(
            f"IoU bins {sorted(short_bins)} under quota after budget; histogram may be non-uniform"
        )
    return out


@dataclass
class MisalignmentReport:
    pearson: float
    points: list[tuple[float, float]] = field(default_factory=list)  # (confidence, true IoU)


def misalignment_report(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    confidence: str = "cls_score",
) -> MisalignmentReport:
    """Pearson correlation between a confidence field and true IoU, over
    detections whose best IoU with a same-class ground truth exceeds 0.5."""
    points: list[tuple[float, float]] = []
    for d in dets:
        best = 0.0
        for g in gts:
            if g.class_id == d.class_id:
                best = max(best, iou(d.box, g.box))
        if best > 0.5:
            conf = getattr(d, confidence)
            if conf is None:
                raise IouPostError(f"detection lacks {confidence}")
            points.append((float(conf), best))
    if len(points) < 2:
        raise UndefinedMetricError("fewer than 2 detections with IoU > 0.5; correlation undefined")
    arr = np.asarray(points)
    if arr[:, 0].std() == 0.0 or arr[:, 1].std() == 0.0:
        raise UndefinedMetricError("zero variance; correlation undefined")
    r = float(np.corrcoef(arr[:, 0], arr[:, 1])[0, 1])
    return MisalignmentReport(pearson=r, points=points)
