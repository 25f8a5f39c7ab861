"""Request/response models for the service endpoints.

Detections and ground truths travel as the same records the JSON files use;
feature maps and checkpoints are base64-encoded PRFM/PRWT payloads.
"""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class DetectionRecord(BaseModel):
    image_id: str
    class_id: int
    box: list[float] = Field(min_length=4, max_length=4)
    cls_score: float = Field(ge=0.0, le=1.0)
    loc_score: Optional[float] = Field(default=None, ge=0.0, le=1.0)


class GroundTruthRecord(BaseModel):
    image_id: str
    class_id: int
    box: list[float] = Field(min_length=4, max_length=4)
    object_id: int


class SceneParams(BaseModel):
    width: int = 64
    height: int = 64
    objects: tuple[int, int] = (2, 4)
    size_range: tuple[float, float] = (14.0, 30.0)
    dets_per_object: int = 10
    score_iou_corr: float = 0.7
    det_shift_frac: float = 0.15
    det_scale_log: float = 0.2
    channels: Optional[int] = None


class AugmentParams(BaseModel):
    shift_range: tuple[float, float] = (-0.25, 0.25)
    scale_log_range: tuple[float, float] = (-0.3, 0.3)
    aspect_range: tuple[float, float] = (0.0, 0.0)
    samples_per_gt: int = 32
    omega_train: float = 0.5
    n_bins: int = 10


class TrainParams(BaseModel):
    learning_rate: float = 0.05
    iterations: int = 3000
    batch_size: int = 64
    hidden: int = 64


class NmsParams(BaseModel):
    variant: str = "traditional"
    omega_nms: float = 0.5
    sigma: float = 0.5
    score_floor: float = 0.001
    per_class: bool = True


class RefineParams(BaseModel):
    steps: int = 5
    step_size: float = 0.5
    omega1: float = 0.001
    omega2: float = -0.01
    rollback_on_degrade: bool = False


class SynthRequest(BaseModel):
    seed: int = 0
    scenes: int = 1
    scene: SceneParams = SceneParams()


class SynthResponse(BaseModel):
    ground_truth: list[GroundTruthRecord]
    detections: list[DetectionRecord]
    featmaps: dict[str, str]  # image_id -> base64 PRFM


class NmsRequest(BaseModel):
    detections: list[DetectionRecord]
    nms: NmsParams = NmsParams()


class NmsResponse(BaseModel):
    detections: list[DetectionRecord]


class TraceRecord(BaseModel):
    image_id: str
    box_index: int
    iteration: int
    box_before: list[float]
    box_after: list[float]
    score_before: float
    score_after: float
    frozen: bool
    reason: str


class RefineRequest(BaseModel):
    detections: list[DetectionRecord]
    featmaps: dict[str, str]
    refine: RefineParams = RefineParams()
    topk: int = 100
    oracle: bool = False
    ground_truth: Optional[list[GroundTruthRecord]] = None  # required when oracle
    checkpoint: Optional[str] = None  # base64 PRWT, required when not oracle


class RefineResponse(BaseModel):
    detections: list[DetectionRecord]
    trace: list[TraceRecord]


class TrainRequest(BaseModel):
    seed: int = 0
    ground_truth: list[GroundTruthRecord]
    featmaps: dict[str, str]
    augment: AugmentParams = AugmentParams()
    train: TrainParams = TrainParams()


class TrainResponse(BaseModel):
    checkpoint: str  # base64 PRWT
    loss_curve: list[tuple[int, float]]
    n_samples: int
    final_loss: float


class EvalRequest(BaseModel):
    detections: list[DetectionRecord]
    ground_truth: list[GroundTruthRecord]


class EvalResponse(BaseModel):
    ap: dict[str, float]
    recall: list[tuple[float, float]]
    histogram_edges: list[float]
    histogram_counts: list[int]
    pearson_cls: Optional[float]
    n_detections: int
    n_ground_truths: int


class GradcheckRequest(BaseModel):
    seed: int = 0
    tolerance_scale: float = 1.0


class CheckRecord(BaseModel):
    name: str
    max_err: float
    tol: float
    passed: bool
    note: str


class GradcheckResponse(BaseModel):
    ok: bool
    checks: list[CheckRecord]


class ReproRequest(BaseModel):
    seed: int = 0
    train_scenes: int = 30
    eval_scenes: int = 20
    rho: float = 0.2
    scene: SceneParams = SceneParams()
    augment: AugmentParams = AugmentParams()
    train: TrainParams = TrainParams()
    nms: NmsParams = NmsParams()
    refine: RefineParams = RefineParams()
    topk: int = 100


class ReproResponse(BaseModel):
    files: dict[str, str]  # name -> base64 content
