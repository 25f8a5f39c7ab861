"""File formats and configuration: detection/ground-truth JSON, CSV emission,
atomic writes, and the TOML run configuration.

Detections are stored as a JSON array of records
``{image_id, class_id, box: [x0,y0,x1,y1], cls_score, loc_score?}``; ground
truths replace the scores with ``object_id``.  Floats are serialized with
Python's shortest round-trip representation, so reading a written file
reproduces every value exactly.  Boxes are corner format; ``coco_boxes=True``
converts ``(x, y, w, h)`` records on load and save.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import tomli

from .errors import ConfigError, IouPostError
from .geometry import BoundingBox, Detection, GroundTruthBox
from .predictor import TrainConfig
from .refine import RefineConfig
from .suppression import NmsConfig
from .synth import AugmentConfig, SceneConfig

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory plus rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _box_to_list(box: BoundingBox, coco: bool) -> list[float]:
    if coco:
        return [box.x0, box.y0, box.width, box.height]
    return [box.x0, box.y0, box.x1, box.y1]


def _box_from_list(values: Sequence[float], coco: bool) -> BoundingBox:
    if len(values) != 4:
        raise IouPostError(f"box must have 4 numbers, got {values!r}")
    x0, y0, a, b = (float(v) for v in values)
    if coco:
        return BoundingBox(x0, y0, x0 + a, y0 + b)
    return BoundingBox(x0, y0, a, b)


def detections_to_records(dets_by_image: Mapping[str, Sequence[Detection]],
                          coco_boxes: bool = False) -> list[dict]:
    records = []
    for image_id in sorted(dets_by_image):
        for d in dets_by_image[image_id]:
            rec = {
                "image_id": image_id,
                "class_id": d.class_id,
                "box": _box_to_list(d.box, coco_boxes),
                "cls_score": d.cls_score,
            }
            if d.loc_score is not None:
                rec["loc_score"] = d.loc_score
            records.append(rec)
    return records


def detections_from_records(records: Iterable[Mapping],
                            coco_boxes: bool = False) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for rec in records:
        cls_score = float(rec["cls_score"])
        loc = rec.get("loc_score")
        if not (0.0 <= cls_score <= 1.0):
            raise IouPostError(f"cls_score out of [0, 1]: {cls_score}")
        if loc is not None and not (0.0 <= float(loc) <= 1.0):
            raise IouPostError(f"loc_score out of [0, 1]: {loc}")
        box = _box_from_list(rec["box"], coco_boxes)
        if not box.is_valid:
            raise IouPostError(f"degenerate box in detection record: {rec!r}")
        det = Detection(
            box=box,
            class_id=int(rec["class_id"]),
            cls_score=cls_score,
            loc_score=None if loc is None else float(loc),
        )
        out.setdefault(str(rec["image_id"]), []).append(det)
    return out


def ground_truths_to_records(gts_by_image: Mapping[str, Sequence[GroundTruthBox]],
                             coco_boxes: bool = False) -> list[dict]:
    records = []
    for image_id in sorted(gts_by_image):
        for g in gts_by_image[image_id]:
            records.append({
                "image_id": image_id,
                "class_id": g.class_id,
                "box": _box_to_list(g.box, coco_boxes),
                "object_id": g.object_id,
            })
    return records


def ground_truths_from_records(records: Iterable[Mapping],
                               coco_boxes: bool = False) -> dict[str, list[GroundTruthBox]]:
    out: dict[str, list[GroundTruthBox]] = {}
    for rec in records:
        box = _box_from_list(rec["box"], coco_boxes)
        if not box.is_valid:
            raise IouPostError(f"degenerate box in ground-truth record: {rec!r}")
        gt = GroundTruthBox(
            box=box,
            class_id=int(rec["class_id"]),
            object_id=int(rec["object_id"]),
        )
        out.setdefault(str(rec["image_id"]), []).append(gt)
    return out


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def write_detections(path: PathLike, dets_by_image: Mapping[str, Sequence[Detection]],
                     coco_boxes: bool = False) -> None:
    atomic_write_text(path, dump_json(detections_to_records(dets_by_image, coco_boxes)))


def read_detections(path: PathLike, coco_boxes: bool = False) -> dict[str, list[Detection]]:
    return detections_from_records(json.loads(Path(path).read_text()), coco_boxes)


def write_ground_truths(path: PathLike, gts_by_image: Mapping[str, Sequence[GroundTruthBox]],
                        coco_boxes: bool = False) -> None:
    atomic_write_text(path, dump_json(ground_truths_to_records(gts_by_image, coco_boxes)))


def read_ground_truths(path: PathLike, coco_boxes: bool = False) -> dict[str, list[GroundTruthBox]]:
    return ground_truths_from_records(json.loads(Path(path).read_text()), coco_boxes)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Deterministic CSV: floats via shortest round-trip repr, \n line endings."""
    def cell(v) -> str:
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [",".join(header)]
    lines.extend(",".join(cell(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = SceneConfig()
    augment: AugmentConfig = AugmentConfig()
    train: TrainConfig = TrainConfig()
    nms: NmsConfig = NmsConfig()
    refine: RefineConfig = RefineConfig()


_SECTION_TYPES = {
    "scene": SceneConfig,
    "augment": AugmentConfig,
    "train": TrainConfig,
    "nms": NmsConfig,
    "refine": RefineConfig,
}

_TUPLE_FIELDS = {"objects", "size_range", "shift_range", "scale_log_range", "aspect_range"}


def _build_section(name: str, cls, values: Mapping) -> object:
    known = set(cls.__dataclass_fields__)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    kwargs = {}
    for key, v in values.items():
        if key in _TUPLE_FIELDS:
            if not isinstance(v, (list, tuple)) or len(v) != 2:
                raise ConfigError(f"[{name}] {key} must be a 2-element array")
            v = (v[0], v[1])
        kwargs[key] = v
    try:
        return cls(**kwargs)
    except (TypeError, IouPostError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def load_run_config(path: Optional[PathLike] = None,
                    overrides: Optional[Mapping[str, Mapping]] = None) -> RunConfig:
    """Parse the TOML config; CLI overrides (section -> {key: value}) win over file values."""
    data: dict = {}
    if path is not None:
        with open(path, "rb") as f:
            data = tomli.load(f)
    unknown = set(data) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    merged: dict[str, dict] = {name: dict(data.get(name, {})) for name in _SECTION_TYPES}
    for name, values in (overrides or {}).items():
        if name not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section: {name}")
        merged[name].update({k: v for k, v in values.items() if v is not None})
    return RunConfig(**{
        name: _build_section(name, cls, merged[name]) for name, cls in _SECTION_TYPES.items()
    })
