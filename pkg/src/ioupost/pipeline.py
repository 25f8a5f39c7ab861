"""Orchestration used by the service endpoints: scene batches, per-image NMS
and refinement, training from scenes, pooled multi-image metrics, and the
end-to-end reproduction bundle.

Everything is deterministic given the master seed; per-purpose randomness is
derived through labeled seed splits.  Output file contents are plain CSV/JSON
text built with round-trip float formatting, so identical seeds produce
byte-identical bundles.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .checks import CheckResult, run_all
from .errors import IouPostError, UndefinedMetricError
from .featmap import FeatureMap
from .fileio import csv_text
from .geometry import BoundingBox, Detection, GroundTruthBox, iou
from .metrics import (
    DEFAULT_HISTOGRAM_EDGES,
    AP_THRESHOLDS,
    match_detections,
)
from .pooling import PoolGrid
from .predictor import (
    BoxDeltaRegressor,
    MLPIoUPredictor,
    OracleIoUPredictor,
    TrainConfig,
    TrainingSample,
    TrainReport,
    normalize_iou,
    predictor_to_bytes,
    train,
    train_regressor,
)
from .refine import RefineConfig, RefineTrace, refine_topk
from .seeding import child_rng, child_seed
from .suppression import NmsConfig, run_nms
from .synth import AugmentConfig, Scene, SceneConfig, augment_ground_truth, generate_scene

DetsByImage = dict[str, list[Detection]]
GtsByImage = dict[str, list[GroundTruthBox]]
MapsByImage = dict[str, FeatureMap]


# ---------------------------------------------------------------------------
# synthesis

def make_scenes(n_scenes: int, base: SceneConfig, master_seed: int,
                label: str = "scene") -> dict[str, Scene]:
    """n deterministic scenes keyed by image id; per-scene seeds are labeled splits."""
    if n_scenes < 1:
        raise IouPostError("need at least one scene")
    out: dict[str, Scene] = {}
    for i in range(n_scenes):
        cfg = replace(base, seed=child_seed(master_seed, label, i))
        out[f"{label}_{i:04d}"] = generate_scene(cfg)
    return out


def split_scenes(scenes: Mapping[str, Scene]) -> tuple[GtsByImage, DetsByImage, MapsByImage]:
    gts = {k: list(s.ground_truths) for k, s in scenes.items()}
    dets = {k: list(s.detections) for k, s in scenes.items()}
    maps = {k: s.featmap for k, s in scenes.items()}
    return gts, dets, maps


# ---------------------------------------------------------------------------
# suppression / refinement over image collections

def apply_nms(dets_by_image: DetsByImage, cfg: NmsConfig) -> DetsByImage:
    return {image_id: run_nms(dets, cfg) for image_id, dets in sorted(dets_by_image.items())}


def apply_refine(
    dets_by_image: DetsByImage,
    featmaps: MapsByImage,
    predictor_for_image: Callable[[str], object],
    cfg: RefineConfig,
    topk: int,
) -> tuple[DetsByImage, dict[str, RefineTrace]]:
    refined: DetsByImage = {}
    traces: dict[str, RefineTrace] = {}
    for image_id in sorted(dets_by_image):
        if image_id not in featmaps:
            raise IouPostError(f"no feature map for image {image_id}")
        predictor = predictor_for_image(image_id)
        refined[image_id], traces[image_id] = refine_topk(
            dets_by_image[image_id], featmaps[image_id], predictor, cfg, topk
        )
    return refined, traces


def oracle_predictors(gts_by_image: GtsByImage) -> Callable[[str], OracleIoUPredictor]:
    def factory(image_id: str) -> OracleIoUPredictor:
        if image_id not in gts_by_image:
            raise IouPostError(f"no ground truth for image {image_id}; oracle refinement needs it")
        return OracleIoUPredictor(gts_by_image[image_id])

    return factory


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainOutput:
    predictor: MLPIoUPredictor
    report: TrainReport
    n_samples: int
    checkpoint: bytes


def build_training_samples(
    gts_by_image: GtsByImage,
    featmaps: MapsByImage,
    augment: AugmentConfig,
    master_seed: int,
) -> list[TrainingSample]:
    samples: list[TrainingSample] = []
    for image_id in sorted(gts_by_image):
        fm = featmaps.get(image_id)
        if fm is None:
            raise IouPostError(f"no feature map for image {image_id}")
        rng = child_rng(master_seed, "augment", image_id)
        for aug in augment_ground_truth(gts_by_image[image_id], augment, rng):
            samples.append(TrainingSample(fm, aug.box, normalize_iou(aug.iou_label)))
    return samples


def train_from_scenes(
    gts_by_image: GtsByImage,
    featmaps: MapsByImage,
    augment: AugmentConfig,
    cfg: TrainConfig,
    grid: PoolGrid = PoolGrid(),
) -> TrainOutput:
    samples = build_training_samples(gts_by_image, featmaps, augment, cfg.seed)
    if not samples:
        raise IouPostError("augmentation produced no training samples")
    channels = next(iter(featmaps.values())).channels
    predictor = MLPIoUPredictor.initialize(grid, channels, cfg.hidden,
                                           seed=child_seed(cfg.seed, "init"))
    predictor, report = train(predictor, samples, cfg)
    return TrainOutput(predictor, report, len(samples), predictor_to_bytes(predictor))


# ---------------------------------------------------------------------------
# pooled multi-image metrics

def pooled_average_precision(
    dets_by_image: DetsByImage,
    gts_by_image: GtsByImage,
    omega_test: float,
    rank_by: str = "cls_score",
) -> float:
    """AP over all images: per-image matching, globally pooled PR curve."""
    n_gts = sum(len(g) for g in gts_by_image.values())
    if n_gts == 0:
        raise UndefinedMetricError("average precision is undefined without ground truth")
    scored: list[tuple[float, str, int, bool]] = []
    for image_id in sorted(dets_by_image):
        dets = dets_by_image[image_id]
        gts = gts_by_image.get(image_id, [])
        result = match_detections(dets, gts, omega_test, rank_by) if dets else None
        for k, d in enumerate(dets):
            key = getattr(d, rank_by)
            scored.append((float(key), image_id, k, result.records[k].positive))
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    if not scored:
        return 0.0
    tp = np.array([s[3] for s in scored], dtype=float)
    cum_tp = np.cumsum(tp)
    precision = cum_tp / (np.arange(len(scored)) + 1.0)
    recall = cum_tp / n_gts
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    pr = np.where(idx < len(recall), interp[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(pr.mean())


def pooled_ap_suite(dets_by_image: DetsByImage, gts_by_image: GtsByImage,
                    rank_by: str = "cls_score") -> dict[str, float]:
    per_threshold = {t: pooled_average_precision(dets_by_image, gts_by_image, t, rank_by)
                     for t in AP_THRESHOLDS}
    out = {"AP": float(np.mean(list(per_threshold.values())))}
    for t in (0.5, 0.6, 0.7, 0.8, 0.9):
        out[f"AP{int(round(t * 100))}"] = per_threshold[round(t, 2)]
    return out


def pooled_recall_curve(
    dets_by_image: DetsByImage,
    gts_by_image: GtsByImage,
    thresholds: Sequence[float],
    rank_by: str = "cls_score",
) -> list[tuple[float, float]]:
    n_gts = sum(len(g) for g in gts_by_image.values())
    if n_gts == 0:
        raise UndefinedMetricError("recall is undefined without ground truth")
    out = []
    for t in thresholds:
        positives = 0
        for image_id in sorted(gts_by_image):
            dets = dets_by_image.get(image_id, [])
            if dets:
                positives += match_detections(dets, gts_by_image[image_id], t, rank_by).n_positive
        out.append((float(t), positives / n_gts))
    return out


def pooled_positive_histogram(
    dets_by_image: DetsByImage,
    gts_by_image: GtsByImage,
    bins: Sequence[float] = DEFAULT_HISTOGRAM_EDGES,
    omega_test: float = 0.5,
    rank_by: str = "loc_score",
) -> np.ndarray:
    from .metrics import positive_histogram

    counts = np.zeros(len(list(bins)) - 1, dtype=int)
    for image_id in sorted(gts_by_image):
        dets = dets_by_image.get(image_id, [])
        if dets:
            counts += positive_histogram(dets, gts_by_image[image_id], bins, omega_test, rank_by)
    return counts


def pooled_misalignment(
    dets_by_image: DetsByImage,
    gts_by_image: GtsByImage,
    confidence: str = "cls_score",
) -> tuple[float, list[tuple[float, float]]]:
    """Pearson r between a confidence field and true IoU over all images (IoU > 0.5)."""
    points: list[tuple[float, float]] = []
    for image_id in sorted(dets_by_image):
        gts = gts_by_image.get(image_id, [])
        for d in dets_by_image[image_id]:
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
        raise UndefinedMetricError("fewer than 2 detections with IoU > 0.5")
    arr = np.asarray(points)
    if arr[:, 0].std() == 0.0 or arr[:, 1].std() == 0.0:
        raise UndefinedMetricError("zero variance; correlation undefined")
    return float(np.corrcoef(arr[:, 0], arr[:, 1])[0, 1]), points


@dataclass
class EvalReport:
    ap: dict[str, float]
    recall: list[tuple[float, float]]
    histogram_edges: list[float]
    histogram_counts: list[int]
    pearson_cls: Optional[float]
    n_detections: int
    n_ground_truths: int

    def csv_rows(self) -> list[tuple]:
        rows: list[tuple] = [("metric", "threshold", "value")]
        rows.append(("AP", "", self.ap["AP"]))
        for name in ("AP50", "AP60", "AP70", "AP80", "AP90"):
            rows.append((name, float(name[2:]) / 100.0, self.ap[name]))
        for t, r in self.recall:
            rows.append(("recall", t, r))
        for k, count in enumerate(self.histogram_counts):
            rows.append(("positives", self.histogram_edges[k + 1], count))
        if self.pearson_cls is not None:
            rows.append(("pearson_cls", "", self.pearson_cls))
        return rows


def evaluate(
    dets_by_image: DetsByImage,
    gts_by_image: GtsByImage,
    thresholds: Sequence[float] = AP_THRESHOLDS,
    bins: Sequence[float] = DEFAULT_HISTOGRAM_EDGES,
) -> EvalReport:
    have_loc = all(d.loc_score is not None
                   for dets in dets_by_image.values() for d in dets)
    try:
        pearson, _ = pooled_misalignment(dets_by_image, gts_by_image)
    except UndefinedMetricError:
        pearson = None
    return EvalReport(
        ap=pooled_ap_suite(dets_by_image, gts_by_image),
        recall=pooled_recall_curve(dets_by_image, gts_by_image, thresholds),
        histogram_edges=[float(e) for e in bins],
        histogram_counts=list(map(int, pooled_positive_histogram(
            dets_by_image, gts_by_image, bins,
            rank_by="loc_score" if have_loc else "cls_score"))),
        pearson_cls=pearson,
        n_detections=sum(len(d) for d in dets_by_image.values()),
        n_ground_truths=sum(len(g) for g in gts_by_image.values()),
    )


# ---------------------------------------------------------------------------
# gradcheck

def gradcheck(seed: int, tolerance_scale: float = 1.0) -> list[CheckResult]:
    return run_all(seed, tolerance_scale)


# ---------------------------------------------------------------------------
# reproduction bundle

@dataclass(frozen=True)
class ReproConfig:
    seed: int = 0
    train_scenes: int = 30
    eval_scenes: int = 20
    rho: float = 0.2
    scene: SceneConfig = SceneConfig()
    augment: AugmentConfig = AugmentConfig()
    train: TrainConfig = TrainConfig()
    nms: NmsConfig = NmsConfig()
    refine: RefineConfig = RefineConfig()
    topk: int = 100
    regress_steps: int = 5


@dataclass
class ReproOutput:
    files: dict[str, bytes] = field(default_factory=dict)

    def add_text(self, name: str, text: str) -> None:
        self.files[name] = text.encode("utf-8")


def _true_iou(box: BoundingBox, gts: Sequence[GroundTruthBox]) -> float:
    return max((iou(box, g.box) for g in gts), default=0.0)


def _per_iteration_mean_iou(
    dets_by_image: DetsByImage,
    traces: dict[str, RefineTrace],
    gts_by_image: GtsByImage,
    steps: int,
) -> list[float]:
    """Mean true IoU of the refined subset at iterations 0..steps (frozen boxes carried)."""
    per_iter_values: list[list[float]] = [[] for _ in range(steps + 1)]
    for image_id in sorted(traces):
        trace = traces[image_id]
        gts = gts_by_image[image_id]
        indices = sorted({s.box_index for s in trace.steps})
        for k in indices:
            history = trace.for_box(k)
            box = history[0].box_before
            per_iter_values[0].append(_true_iou(box, gts))
            for it in range(1, steps + 1):
                step = next((s for s in history if s.iteration == it), None)
                if step is not None:
                    box = step.box_after
                per_iter_values[it].append(_true_iou(box, gts))
    return [float(np.mean(v)) if v else 0.0 for v in per_iter_values]


def run_repro(cfg: ReproConfig) -> ReproOutput:
    """End-to-end pipeline: synth -> train -> NMS variants -> refine -> eval.

    Emits CSV counterparts of the score/IoU scatter, the positive-count
    histogram, the refinement-vs-iteration curves, and the recall curves,
    plus AP tables, the loss curve, and both trained checkpoints.
    """
    out = ReproOutput()
    train_scene_cfg = replace(cfg.scene, score_iou_corr=cfg.rho)
    eval_scene_cfg = replace(cfg.scene, score_iou_corr=cfg.rho)

    train_scenes = make_scenes(cfg.train_scenes, train_scene_cfg,
                               child_seed(cfg.seed, "train-scenes"), "train")
    eval_scenes = make_scenes(cfg.eval_scenes, eval_scene_cfg,
                              child_seed(cfg.seed, "eval-scenes"), "eval")
    train_gts, _, train_maps = split_scenes(train_scenes)
    eval_gts, eval_dets, eval_maps = split_scenes(eval_scenes)

    # train the IoU head and the regression baseline on the training scenes
    tcfg = replace(cfg.train, seed=child_seed(cfg.seed, "train"))
    trained = train_from_scenes(train_gts, train_maps, cfg.augment, tcfg)
    out.files["checkpoint.prwt"] = trained.checkpoint
    out.add_text("loss_curve.csv", csv_text(
        ("iteration", "loss"), [(it, loss) for it, loss in trained.report.loss_curve]))

    reg_samples = [
        (train_maps[image_id], aug.box, aug.ground_truth.box)
        for image_id in sorted(train_gts)
        for aug in augment_ground_truth(
            train_gts[image_id], cfg.augment, child_rng(cfg.seed, "regress-augment", image_id))
    ]
    first_map = next(iter(train_maps.values()))
    regressor = BoxDeltaRegressor.initialize(
        PoolGrid(), first_map.channels, cfg.train.hidden,
        seed=child_seed(cfg.seed, "regress-init"))
    regressor, _ = train_regressor(
        regressor, reg_samples, replace(tcfg, seed=child_seed(cfg.seed, "regress")))

    # misalignment scatter: classification confidence and the trained predictor
    pearson_cls, cls_points = pooled_misalignment(eval_dets, eval_gts, "cls_score")
    out.add_text("fig2_cls_scatter.csv", csv_text(
        ("true_iou", "cls_score"), [(u, c) for c, u in cls_points]))
    pred_points: list[tuple[float, float]] = []
    for image_id in sorted(eval_dets):
        fm = eval_maps[image_id]
        gts = eval_gts[image_id]
        for d in eval_dets[image_id]:
            u = _true_iou(d.box, gts)
            if u > 0.5:
                pred_points.append((u, trained.predictor.value(fm, d.box)))
    pred_arr = np.asarray(pred_points)
    pearson_pred = float(np.corrcoef(pred_arr[:, 0], pred_arr[:, 1])[0, 1])
    out.add_text("fig2_predictor_scatter.csv", csv_text(
        ("true_iou", "predicted_iou"), pred_points))
    out.add_text("correlations.csv", csv_text(
        ("confidence_source", "pearson_r"),
        [("cls_score", pearson_cls), ("predictor", pearson_pred)]))

    # NMS variants
    variants: dict[str, DetsByImage] = {"no_nms": eval_dets}
    for variant in ("traditional", "soft_linear", "soft_gaussian", "iou_guided"):
        variants[variant] = apply_nms(eval_dets, replace(cfg.nms, variant=variant))

    edges = list(DEFAULT_HISTOGRAM_EDGES)
    hist_rows = []
    hists = {name: pooled_positive_histogram(dets, eval_gts, edges)
             for name, dets in variants.items()}
    for k in range(len(edges) - 1):
        hist_rows.append((edges[k], edges[k + 1],
                          *(int(hists[name][k]) for name in variants)))
    out.add_text("fig3_positive_histogram.csv", csv_text(
        ("bucket_lo", "bucket_hi", *variants), hist_rows))

    thresholds = [round(0.5 + 0.05 * i, 2) for i in range(10)]
    curves = {name: dict(pooled_recall_curve(dets, eval_gts, thresholds, rank_by="loc_score"))
              for name, dets in variants.items()}
    out.add_text("fig8_recall.csv", csv_text(
        ("omega_test", *variants),
        [(t, *(curves[name][t] for name in variants)) for t in thresholds]))

    # optimization-based refinement (oracle and trained head) on the NMS survivors
    survivors = variants["iou_guided"]
    refined_oracle, traces = apply_refine(
        survivors, eval_maps, oracle_predictors(eval_gts), cfg.refine, cfg.topk)
    refined_mlp, traces_mlp = apply_refine(
        survivors, eval_maps, lambda _: trained.predictor, cfg.refine, cfg.topk)
    curve = _per_iteration_mean_iou(survivors, traces, eval_gts, cfg.refine.steps)
    curve_mlp = _per_iteration_mean_iou(survivors, traces_mlp, eval_gts, cfg.refine.steps)
    out.add_text("fig4_optimization.csv", csv_text(
        ("iteration", "mean_true_iou"), list(enumerate(curve))))

    # iterative regression baseline on the full jittered population
    reg_rows = []
    boxes = [(image_id, d.box) for image_id in sorted(eval_dets) for d in eval_dets[image_id]]
    current = {k: box for k, (_, box) in enumerate(boxes)}
    for k_step in range(cfg.regress_steps + 1):
        vals = [
            _true_iou(current[k], eval_gts[image_id])
            for k, (image_id, _) in enumerate(boxes)
        ]
        reg_rows.append((k_step, float(np.mean(vals))))
        if k_step < cfg.regress_steps:
            for k, (image_id, _) in enumerate(boxes):
                current[k] = regressor.apply(eval_maps[image_id], current[k])
    out.add_text("fig4_regression.csv", csv_text(("k", "mean_true_iou"), reg_rows))

    # AP per variant, plus the refined results
    ap_rows = []
    scored = dict(variants)
    scored["iou_guided+refine_oracle"] = refined_oracle
    scored["iou_guided+refine_mlp"] = refined_mlp
    for name, dets in scored.items():
        suite = pooled_ap_suite(dets, eval_gts)
        for metric in ("AP", "AP50", "AP60", "AP70", "AP80", "AP90"):
            ap_rows.append((name, metric, suite[metric]))
    out.add_text("ap.csv", csv_text(("variant", "metric", "value"), ap_rows))

    summary = {
        "pearson_cls": pearson_cls,
        "pearson_predictor": pearson_pred,
        "recall_at_0.9": {name: curves[name][0.9] for name in variants},
        "top_bucket_positives": {name: int(hists[name][-1]) for name in variants},
        "mean_iou_refined_subset": {
            "before": curve[0], "after": curve[-1], "mlp_after": curve_mlp[-1],
        },
        "n_training_samples": trained.n_samples,
    }
    from .fileio import dump_json

    out.add_text("summary.json", dump_json(summary))
    return out
