"""Non-maximum suppression family: traditional, Soft-NMS, and IoU-guided.

All variants are pure functions over detection lists.  Ranking ties are broken
by the higher secondary score and then by input index, so identical inputs
always produce identical outputs.  With ``per_class`` set (the default),
suppression and score decay only act within a class.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import IouPostError
from .geometry import Detection, iou

_NEG_INF = float("-inf")

VARIANTS = ("traditional", "soft_linear", "soft_gaussian", "iou_guided")


@dataclass(frozen=True)
class NmsConfig:
    omega_nms: float = 0.5
    variant: str = "traditional"
    sigma: float = 0.5
    score_floor: float = 0.001
    per_class: bool = True

    def __post_init__(self) -> None:
        if not (0.0 < self.omega_nms < 1.0):
            raise IouPostError(f"omega_nms must be in (0, 1), got {self.omega_nms}")
        if self.sigma <= 0.0:
            raise IouPostError(f"sigma must be positive, got {self.sigma}")
        if self.variant not in VARIANTS:
            raise IouPostError(f"unknown NMS variant {self.variant!r}; expected one of {VARIANTS}")


def _rank_order(primary: Sequence[float], secondary: Sequence[float]) -> list[int]:
    return sorted(range(len(primary)), key=lambda k: (-primary[k], -secondary[k], k))


def _suppresses(a: Detection, b: Detection, omega: float, per_class: bool) -> bool:
    if per_class and a.class_id != b.class_id:
        return False
    return iou(a.box, b.box) > omega


def nms_traditional(dets: Sequence[Detection], cfg: NmsConfig = NmsConfig()) -> list[Detection]:
    """Greedy by descending cls_score; drops boxes overlapping a kept box above omega_nms."""
    order = _rank_order(
        [d.cls_score for d in dets],
        [d.loc_score if d.loc_score is not None else _NEG_INF for d in dets],
    )
    kept: list[Detection] = []
    alive = set(order)
    for k in order:
        if k not in alive:
            continue
        keep = dets[k]
        kept.append(keep)
        alive.discard(k)
        for j in list(alive):
            if _suppresses(keep, dets[j], cfg.omega_nms, cfg.per_class):
                alive.discard(j)
    return kept


def soft_nms(dets: Sequence[Detection], cfg: NmsConfig) -> list[Detection]:
    """Score decay instead of elimination; boxes below the score floor are dropped.

    linear: s *= (1 - IoU) when IoU > omega_nms; gaussian: s *= exp(-IoU^2 / sigma).
    """
    if cfg.variant not in ("soft_linear", "soft_gaussian"):
        raise IouPostError(f"soft_nms requires a soft variant, got {cfg.variant!r}")
    scores = [d.cls_score for d in dets]
    secondary = [d.loc_score if d.loc_score is not None else _NEG_INF for d in dets]
    alive = list(range(len(dets)))
    out: list[Detection] = []
    while alive:
        m = min(alive, key=lambda k: (-scores[k], -secondary[k], k))
        out.append(replace(dets[m], cls_score=scores[m]))
        alive.remove(m)
        nxt: list[int] = []
        for j in alive:
            if not cfg.per_class or dets[m].class_id == dets[j].class_id:
                overlap = iou(dets[m].box, dets[j].box)
                if cfg.variant == "soft_linear":
                    if overlap > cfg.omega_nms:
                        scores[j] *= 1.0 - overlap
                else:
                    scores[j] *= float(np.exp(-(overlap * overlap) / cfg.sigma))
            if scores[j] >= cfg.score_floor:
                nxt.append(j)
        alive = nxt
    return out


def iou_guided_nms(
    dets: Sequence[Detection],
    loc_conf: Optional[Sequence[float]] = None,
    cfg: NmsConfig = NmsConfig(),
) -> list[Detection]:
    """Rank by localization confidence; merge classification scores by max.

    When the kept box eliminates a neighbor, the kept box's reported
    classification score is raised to the neighbor's if higher.  The kept
    detection carries its own localization confidence.
    """
    if loc_conf is None:
        loc_conf = [d.loc_score for d in dets]
    if len(loc_conf) != len(dets):
        raise IouPostError("loc_conf length does not match detections")
    if any(v is None for v in loc_conf):
        raise IouPostError("iou_guided_nms requires a localization confidence for every detection")
    loc = [float(v) for v in loc_conf]  # type: ignore[arg-type]
    order = _rank_order(loc, [d.cls_score for d in dets])
    alive = set(order)
    out: list[Detection] = []
    for m in order:
        if m not in alive:
            continue
        alive.discard(m)
        score = dets[m].cls_score
        for j in list(alive):
            if _suppresses(dets[m], dets[j], cfg.omega_nms, cfg.per_class):
                score = max(score, dets[j].cls_score)
                alive.discard(j)
        out.append(replace(dets[m], cls_score=score, loc_score=loc[m]))
    return out


def run_nms(dets: Sequence[Detection], cfg: NmsConfig) -> list[Detection]:
    """Dispatch on cfg.variant."""
    if cfg.variant == "traditional":
        return nms_traditional(dets, cfg)
    if cfg.variant == "iou_guided":
        return iou_guided_nms(dets, cfg=cfg)
    return soft_nms(dets, cfg)
