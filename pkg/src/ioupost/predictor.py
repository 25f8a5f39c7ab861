"""Localization-confidence estimators and the iterative-regression baseline.

Two predictors expose the same interface used by refinement: ``value(fm, box)``
returns an IoU-scale localization confidence and ``grad_coords(fm, box)`` its
gradient w.r.t. the box corners ``(x0, y0, x1, y1)``.

* :class:`OracleIoUPredictor` answers with the true IoU against a hidden
  ground-truth set, isolating suppression/refinement behavior from learning
  error.
* :class:`MLPIoUPredictor` is a two-layer feedforward head over exactly pooled
  features, trained with smooth-L1 on normalized IoU labels; gradients flow
  through the head and the pooling layer in closed form.

The module also owns the PRWT checkpoint format: magic ``PRWT``, version u16,
head kind u16, then pooling grid, channel, hidden and output dims as u32
little-endian, then float32 little-endian weights and biases in layer order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from .errors import IouPostError, TrainingDivergedError
from .featmap import FeatureMap
from .geometry import (
    BoundingBox,
    BoxDelta,
    GroundTruthBox,
    decode_delta,
    encode_delta,
    iou,
    iou_grad,
    require_valid,
)
from .pooling import PoolGrid, prpool_roi, prpool_roi_grad_coords

PRWT_MAGIC = b"PRWT"
PRWT_VERSION = 1
KIND_IOU_HEAD = 1
KIND_DELTA_HEAD = 2


def smooth_l1(x: float) -> float:
    """Smooth-L1: 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise. C1 everywhere."""
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def smooth_l1_grad(x: float) -> float:
    if abs(x) < 1.0:
        return x
    return 1.0 if x > 0.0 else -1.0


def smooth_l1_arr(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad_arr(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def normalize_iou(value: float) -> float:
    """Affine map of IoU labels from [0.5, 1] onto [-1, 1]."""
    return 4.0 * value - 3.0


def denormalize_iou(value: float) -> float:
    return (value + 3.0) / 4.0


class IoUPredictor(Protocol):
    def value(self, fm: FeatureMap, box: BoundingBox) -> float: ...

    def grad_coords(self, fm: FeatureMap, box: BoundingBox) -> np.ndarray: ...


class OracleIoUPredictor:
    """True IoU against a hidden ground-truth set.

    Matches the queried box to the max-IoU ground truth (restricted to
    ``class_id`` when given); equal-IoU ties go to the lowest object_id.
    """

    def __init__(self, ground_truths: Sequence[GroundTruthBox], class_id: Optional[int] = None):
        gts = [g for g in ground_truths if class_id is None or g.class_id == class_id]
        self._gts = sorted(gts, key=lambda g: g.object_id)

    def match(self, box: BoundingBox) -> Optional[GroundTruthBox]:
        best: Optional[GroundTruthBox] = None
        best_iou = -1.0
        for g in self._gts:
            v = iou(box, g.box)
            if v > best_iou:
                best, best_iou = g, v
        return best

    def value(self, fm: FeatureMap, box: BoundingBox) -> float:
        require_valid(box)
        m = self.match(box)
        return 0.0 if m is None else iou(box, m.box)

    def grad_coords(self, fm: FeatureMap, box: BoundingBox) -> np.ndarray:
        require_valid(box)
        m = self.match(box)
        if m is None:
            return np.zeros(4)
        return iou_grad(box, m.box)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


class _TwoLayerHead:
    """Dense -> ReLU -> dense over a flattened pooled feature."""

    def __init__(self, grid: PoolGrid, channels: int, w1: np.ndarray, b1: np.ndarray,
                 w2: np.ndarray, b2: np.ndarray):
        self.grid = grid
        self.channels = channels
        self.w1 = np.asarray(w1, dtype=float)
        self.b1 = np.asarray(b1, dtype=float)
        self.w2 = np.asarray(w2, dtype=float)
        self.b2 = np.asarray(b2, dtype=float)
        if self.w1.shape[1] != self.in_dim:
            raise IouPostError(
                f"w1 second dim {self.w1.shape[1]} does not match pooled input {self.in_dim}"
            )

    @property
    def in_dim(self) -> int:
        return self.grid.k_h * self.grid.k_w * self.channels

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def initialize(cls, grid: PoolGrid, channels: int, hidden: int, out_dim: int,
                   rng: np.random.Generator) -> "_TwoLayerHead":
        in_dim = grid.k_h * grid.k_w * channels
        w1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(hidden, in_dim))
        b1 = np.zeros(hidden)
        w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(out_dim, hidden))
        b2 = np.zeros(out_dim)
        return cls(grid, channels, w1, b1, w2, b2)

    def pooled_input(self, fm: FeatureMap, box: BoundingBox) -> np.ndarray:
        if fm.channels != self.channels:
            raise IouPostError(f"feature map has {fm.channels} channels, head expects {self.channels}")
        return prpool_roi(fm, box, self.grid).ravel()

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Raw network output for a single flattened input (or batch rows)."""
        pre = x @ self.w1.T + self.b1
        return _relu(pre) @ self.w2.T + self.b2

    def input_grad(self, x: np.ndarray) -> np.ndarray:
        """d output / d input, shape (out_dim, in_dim), at one input."""
        pre = self.w1 @ x + self.b1
        mask = (pre > 0.0).astype(float)
        return (self.w2 * mask) @ self.w1

    def box_grad(self, fm: FeatureMap, box: BoundingBox, out_index: int = 0) -> np.ndarray:
        """d raw output / d (x0, y0, x1, y1) through pooled features."""
        x = self.pooled_input(fm, box)
        dx = self.input_grad(x)[out_index]
        pool_grad = prpool_roi_grad_coords(fm, box, self.grid).reshape(-1, 4)
        return dx @ pool_grad

    def weights(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


class MLPIoUPredictor:
    """Two-layer feedforward IoU head; the raw output is the normalized IoU."""

    def __init__(self, head: _TwoLayerHead):
        if head.out_dim != 1:
            raise IouPostError("IoU head must have a scalar output")
        self.head = head

    @classmethod
    def initialize(cls, grid: PoolGrid = PoolGrid(), channels: int = 4, hidden: int = 64,
                   seed: int = 0) -> "MLPIoUPredictor":
        rng = np.random.default_rng(seed)
        return cls(_TwoLayerHead.initialize(grid, channels, hidden, 1, rng))

    def value_normalized(self, fm: FeatureMap, box: BoundingBox) -> float:
        require_valid(box)
        return float(self.head.forward(self.head.pooled_input(fm, box))[0])

    def value(self, fm: FeatureMap, box: BoundingBox) -> float:
        """IoU-scale estimate (denormalized network output)."""
        return denormalize_iou(self.value_normalized(fm, box))

    def grad_coords(self, fm: FeatureMap, box: BoundingBox) -> np.ndarray:
        require_valid(box)
        # value = (raw + 3) / 4, so the chain carries a constant 1/4.
        return 0.25 * self.head.box_grad(fm, box)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    iterations: int = 3000
    batch_size: int = 64
    seed: int = 0
    hidden: int = 64

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.iterations < 0 or self.batch_size < 1 or self.hidden < 1:
            raise IouPostError(f"invalid training config: {self}")


@dataclass(frozen=True)
class TrainingSample:
    featmap: FeatureMap
    box: BoundingBox
    label: float  # normalized IoU in [-1, 1]


@dataclass
class TrainReport:
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    out_of_range_labels: int = 0


def _pooled_matrix(head: _TwoLayerHead, data: Sequence[TrainingSample]) -> np.ndarray:
    return np.stack([head.pooled_input(s.featmap, s.box) for s in data])


def train(predictor: MLPIoUPredictor, data: Sequence[TrainingSample],
          cfg: TrainConfig) -> tuple[MLPIoUPredictor, TrainReport]:
    """SGD on smooth-L1 of (raw output - normalized label). Deterministic given seed."""
    if not data:
        raise IouPostError("training data must be nonempty")
    head = predictor.head
    labels = np.array([s.label for s in data])
    report = TrainReport(out_of_range_labels=int(np.sum((labels < -1.0) | (labels > 1.0))))
    x_all = _pooled_matrix(head, data)
    _sgd(head, x_all, labels[:, None], cfg, report)
    return predictor, report


def _sgd(head: _TwoLayerHead, x_all: np.ndarray, y_all: np.ndarray, cfg: TrainConfig,
         report: TrainReport) -> None:
    rng = np.random.default_rng(cfg.seed)
    n = x_all.shape[0]
    log_every = max(1, cfg.iterations // 200)
    for it in range(cfg.iterations):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        x = x_all[idx]
        y = y_all[idx]
        pre = x @ head.w1.T + head.b1
        act = _relu(pre)
        out = act @ head.w2.T + head.b2
        resid = out - y
        loss = float(smooth_l1_arr(resid).mean())
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at iteration {it}")
        if it % log_every == 0 or it == cfg.iterations - 1:
            report.loss_curve.append((it, loss))
        dout = smooth_l1_grad_arr(resid) / resid.size
        dact = dout @ head.w2
        dpre = dact * (pre > 0.0)
        head.w2 -= cfg.learning_rate * (dout.T @ act)
        head.b2 -= cfg.learning_rate * dout.sum(axis=0)
        head.w1 -= cfg.learning_rate * (dpre.T @ x)
        head.b1 -= cfg.learning_rate * dpre.sum(axis=0)


class BoxDeltaRegressor:
    """Feedforward head predicting a coordinate transform from pooled features.

    The iterative-regression baseline: applying the predicted transform moves
    the box, and the head can be re-applied to its own output.
    """

    def __init__(self, head: _TwoLayerHead):
        if head.out_dim != 4:
            raise IouPostError("delta head must output 4 components")
        self.head = head

    @classmethod
    def initialize(cls, grid: PoolGrid = PoolGrid(), channels: int = 4, hidden: int = 64,
                   seed: int = 0) -> "BoxDeltaRegressor":
        rng = np.random.default_rng(seed)
        return cls(_TwoLayerHead.initialize(grid, channels, hidden, 4, rng))

    def predict_delta(self, fm: FeatureMap, box: BoundingBox) -> BoxDelta:
        raw = self.head.forward(self.head.pooled_input(fm, box))
        return BoxDelta(*(float(v) for v in raw))

    def apply(self, fm: FeatureMap, box: BoundingBox) -> BoundingBox:
        return decode_delta(box, self.predict_delta(fm, box))

    def iterate(self, fm: FeatureMap, box: BoundingBox, k: int) -> BoundingBox:
        for _ in range(k):
            box = self.apply(fm, box)
        return box


def train_regressor(reg: BoxDeltaRegressor,
                    data: Sequence[tuple[FeatureMap, BoundingBox, BoundingBox]],
                    cfg: TrainConfig) -> tuple[BoxDeltaRegressor, TrainReport]:
    """Smooth-L1 regression of encode_delta(box -> ground truth). Deterministic given seed."""
    if not data:
        raise IouPostError("training data must be nonempty")
    head = reg.head
    x_all = np.stack([head.pooled_input(fm, box) for fm, box, _ in data])
    y_all = np.stack([encode_delta(box, gt).as_array() for _, box, gt in data])
    report = TrainReport()
    _sgd(head, x_all, y_all, cfg, report)
    return reg, report


def head_to_bytes(head: _TwoLayerHead, kind: int) -> bytes:
    out = [PRWT_MAGIC, struct.pack("<HH", PRWT_VERSION, kind),
           struct.pack("<IIIII", head.grid.k_h, head.grid.k_w, head.channels,
                       head.hidden, head.out_dim)]
    for arr in head.weights():
        out.append(arr.astype("<f4").tobytes(order="C"))
    return b"".join(out)


def head_from_bytes(data: bytes) -> tuple[_TwoLayerHead, int]:
    if len(data) < 28 or data[:4] != PRWT_MAGIC:
        raise IouPostError("not a PRWT checkpoint (bad magic)")
    version, kind = struct.unpack("<HH", data[4:8])
    if version != PRWT_VERSION:
        raise IouPostError(f"unsupported PRWT version {version}")
    k_h, k_w, channels, hidden, out_dim = struct.unpack("<IIIII", data[8:28])
    grid = PoolGrid(k_h, k_w)
    in_dim = k_h * k_w * channels
    shapes = [(hidden, in_dim), (hidden,), (out_dim, hidden), (out_dim,)]
    offset = 28
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        end = offset + count * 4
        if end > len(data):
            raise IouPostError("PRWT checkpoint truncated")
        arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=offset)
                      .astype(float).reshape(shape))
        offset = end
    if offset != len(data):
        raise IouPostError("PRWT checkpoint has trailing bytes")
    return _TwoLayerHead(grid, channels, *arrays), kind


def predictor_to_bytes(p: MLPIoUPredictor) -> bytes:
    return head_to_bytes(p.head, KIND_IOU_HEAD)


def regressor_to_bytes(r: BoxDeltaRegressor) -> bytes:
    return head_to_bytes(r.head, KIND_DELTA_HEAD)


def model_from_bytes(data: bytes) -> Union[MLPIoUPredictor, BoxDeltaRegressor]:
    head, kind = head_from_bytes(data)
    if kind == KIND_IOU_HEAD:
        return MLPIoUPredictor(head)
    if kind == KIND_DELTA_HEAD:
        return BoxDeltaRegressor(head)
    raise IouPostError(f"unknown PRWT head kind {kind}")


def save_model(model: Union[MLPIoUPredictor, BoxDeltaRegressor], path: Union[str, Path]) -> None:
    kind = KIND_IOU_HEAD if isinstance(model, MLPIoUPredictor) else KIND_DELTA_HEAD
    Path(path).write_bytes(head_to_bytes(model.head, kind))


def load_model(path: Union[str, Path]) -> Union[MLPIoUPredictor, BoxDeltaRegressor]:
    return model_from_bytes(Path(path).read_bytes())
