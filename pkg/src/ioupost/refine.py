"""Optimization-based bounding box refinement: gradient ascent on predicted IoU.

Per iteration each active box takes one ascent step on the predictor's score,
with the gradient scaled per axis by the box size.  A box freezes (never moves
again) when the step changed the score by less than ``omega1`` or degraded it
by more than ``|omega2|``.  The freeze check runs after the step and the
stepped coordinates are kept; ``rollback_on_degrade`` optionally restores the
pre-step coordinates on degradation (an extension, off by default).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .errors import IouPostError
from .featmap import FeatureMap
from .geometry import BoundingBox, Detection, scale_gradient
from .predictor import IoUPredictor

# Boxes shrinking below this extent are frozen (flagged) rather than stepped.
MIN_BOX_EXTENT = 1e-3


@dataclass(frozen=True)
class RefineConfig:
    steps: int = 5  # T
    step_size: float = 0.5  # lambda
    omega1: float = 0.001  # early-stop threshold on |score change|
    omega2: float = -0.01  # degeneration tolerance (negative)
    rollback_on_degrade: bool = False

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise IouPostError(f"steps must be >= 0, got {self.steps}")
        if self.step_size <= 0.0:
            raise IouPostError(f"step_size must be positive, got {self.step_size}")
        if self.omega1 <= 0.0:
            raise IouPostError(f"omega1 must be positive, got {self.omega1}")
        if self.omega2 >= 0.0:
            raise IouPostError(f"omega2 must be negative, got {self.omega2}")


@dataclass(frozen=True)
class TraceStep:
    box_index: int
    iteration: int
    box_before: BoundingBox
    box_after: BoundingBox
    score_before: float
    score_after: float
    frozen: bool
    reason: str = ""  # "early_stop" | "degraded" | "degenerate" | ""


@dataclass
class RefineTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def for_box(self, index: int) -> list[TraceStep]:
        return [s for s in self.steps if s.box_index == index]

    def frozen_reason(self, index: int) -> Optional[str]:
        for s in reversed(self.for_box(index)):
            if s.frozen:
                return s.reason
        return None


def refine_boxes(
    boxes: Sequence[BoundingBox],
    fm: FeatureMap,
    predictor: IoUPredictor,
    cfg: RefineConfig = RefineConfig(),
) -> tuple[list[BoundingBox], RefineTrace]:
    """Iteratively refine boxes by ascending the predictor's score."""
    current = list(boxes)
    for b in current:
        if not b.is_valid:
            raise IouPostError(f"refinement requires valid input boxes, got {b}")
    frozen = [False] * len(current)
    trace = RefineTrace()
    for it in range(1, cfg.steps + 1):
        for k, box in enumerate(current):
            if frozen[k]:
                continue
            grad = predictor.grad_coords(fm, box)
            prev_score = predictor.value(fm, box)
            step = cfg.step_size * scale_gradient(grad, box)
            stepped = BoundingBox(box.x0 + step[0], box.y0 + step[1],
                                  box.x1 + step[2], box.y1 + step[3])
            if stepped.width < MIN_BOX_EXTENT or stepped.height < MIN_BOX_EXTENT:
                frozen[k] = True
                trace.steps.append(TraceStep(k, it, box, box, prev_score, prev_score,
                                             frozen=True, reason="degenerate"))
                continue
            new_score = predictor.value(fm, stepped)
            reason = ""
            if new_score - prev_score < cfg.omega2:
                reason = "degraded"
                if cfg.rollback_on_degrade:
                    stepped = box
                    new_score = prev_score
            elif abs(prev_score - new_score) < cfg.omega1:
                reason = "early_stop"
            current[k] = stepped
            if reason:
                frozen[k] = True
            trace.steps.append(TraceStep(k, it, box, stepped, prev_score, new_score,
                                         frozen=bool(reason), reason=reason))
    return current, trace


def refine_topk(
    dets: Sequence[Detection],
    fm: FeatureMap,
    predictor: IoUPredictor,
    cfg: RefineConfig = RefineConfig(),
    k: int = 100,
) -> tuple[list[Detection], RefineTrace]:
    """Refine the k highest-cls_score detections, leaving the rest untouched.

    Returns detections in input order with refined boxes substituted; scores
    are not modified.
    """
    if k < 0:
        raise IouPostError(f"k must be >= 0, got {k}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].cls_score, i))
    chosen = order[:k]
    refined, trace = refine_boxes([dets[i].box for i in chosen], fm, predictor, cfg)
    out = list(dets)
    for i, box in zip(chosen, refined):
        out[i] = replace(dets[i], box=box)
    return out, trace
