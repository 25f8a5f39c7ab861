"""FastAPI application exposing the post-processing pipeline.

Stateless endpoints mirror the CLI subcommands; domain errors surface as 422
responses with the error message.  All computation delegates to the core
package; this layer only converts between wire records and domain objects.
"""

from __future__ import annotations

import base64
from dataclasses import replace

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..errors import IouPostError
from ..featmap import from_prfm_bytes, to_prfm_bytes
from ..fileio import (
    detections_from_records,
    detections_to_records,
    ground_truths_from_records,
    ground_truths_to_records,
)
from ..predictor import MLPIoUPredictor, TrainConfig, model_from_bytes
from ..refine import RefineConfig
from ..seeding import child_seed
from ..suppression import NmsConfig
from ..synth import AugmentConfig, SceneConfig
from . import schemas as S


def _scene_config(p: S.SceneParams, seed: int = 0) -> SceneConfig:
    return SceneConfig(
        width=p.width, height=p.height, objects=p.objects, size_range=p.size_range,
        dets_per_object=p.dets_per_object, score_iou_corr=p.score_iou_corr,
        det_shift_frac=p.det_shift_frac, det_scale_log=p.det_scale_log,
        channels=p.channels, seed=seed,
    )


def _augment_config(p: S.AugmentParams) -> AugmentConfig:
    return AugmentConfig(
        shift_range=p.shift_range, scale_log_range=p.scale_log_range,
        aspect_range=p.aspect_range, samples_per_gt=p.samples_per_gt,
        omega_train=p.omega_train, n_bins=p.n_bins,
    )


def _train_config(p: S.TrainParams, seed: int) -> TrainConfig:
    return TrainConfig(learning_rate=p.learning_rate, iterations=p.iterations,
                       batch_size=p.batch_size, seed=seed, hidden=p.hidden)


def _nms_config(p: S.NmsParams) -> NmsConfig:
    return NmsConfig(omega_nms=p.omega_nms, variant=p.variant, sigma=p.sigma,
                     score_floor=p.score_floor, per_class=p.per_class)


def _refine_config(p: S.RefineParams) -> RefineConfig:
    return RefineConfig(steps=p.steps, step_size=p.step_size, omega1=p.omega1,
                        omega2=p.omega2, rollback_on_degrade=p.rollback_on_degrade)


def _decode_featmaps(payload: dict[str, str]) -> dict:
    return {image_id: from_prfm_bytes(base64.b64decode(data))
            for image_id, data in payload.items()}


def _det_records(dets_by_image) -> list[dict]:
    return detections_to_records(dets_by_image)


def create_app() -> FastAPI:
    app = FastAPI(title="ioupost", version=__version__)

    @app.exception_handler(IouPostError)
    async def domain_error(_, exc: IouPostError) -> JSONResponse:
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/synth", response_model=S.SynthResponse)
    def synth(req: S.SynthRequest) -> S.SynthResponse:
        base = _scene_config(req.scene)
        scenes = pipeline.make_scenes(req.scenes, base, req.seed)
        gts, dets, maps = pipeline.split_scenes(scenes)
        return S.SynthResponse(
            ground_truth=ground_truths_to_records(gts),
            detections=_det_records(dets),
            featmaps={k: base64.b64encode(to_prfm_bytes(fm)).decode("ascii")
                      for k, fm in maps.items()},
        )

    @app.post("/nms", response_model=S.NmsResponse)
    def nms(req: S.NmsRequest) -> S.NmsResponse:
        dets = detections_from_records([r.model_dump() for r in req.detections])
        out = pipeline.apply_nms(dets, _nms_config(req.nms))
        return S.NmsResponse(detections=_det_records(out))

    @app.post("/refine", response_model=S.RefineResponse)
    def refine(req: S.RefineRequest) -> S.RefineResponse:
        dets = detections_from_records([r.model_dump() for r in req.detections])
        maps = _decode_featmaps(req.featmaps)
        cfg = _refine_config(req.refine)
        if req.oracle:
            if req.ground_truth is None:
                raise IouPostError("oracle refinement requires ground_truth")
            gts = ground_truths_from_records([r.model_dump() for r in req.ground_truth])
            factory = pipeline.oracle_predictors(gts)
        else:
            if req.checkpoint is None:
                raise IouPostError("refinement requires a checkpoint or oracle=true")
            model = model_from_bytes(base64.b64decode(req.checkpoint))
            if not isinstance(model, MLPIoUPredictor):
                raise IouPostError("checkpoint does not hold an IoU head")
            factory = lambda _: model  # noqa: E731
        refined, traces = pipeline.apply_refine(dets, maps, factory, cfg, req.topk)
        trace_records = [
            S.TraceRecord(
                image_id=image_id, box_index=s.box_index, iteration=s.iteration,
                box_before=list(s.box_before.as_array()),
                box_after=list(s.box_after.as_array()),
                score_before=s.score_before, score_after=s.score_after,
                frozen=s.frozen, reason=s.reason,
            )
            for image_id in sorted(traces)
            for s in traces[image_id].steps
        ]
        return S.RefineResponse(detections=_det_records(refined), trace=trace_records)

    @app.post("/train", response_model=S.TrainResponse)
    def train_endpoint(req: S.TrainRequest) -> S.TrainResponse:
        gts = ground_truths_from_records([r.model_dump() for r in req.ground_truth])
        maps = _decode_featmaps(req.featmaps)
        cfg = _train_config(req.train, child_seed(req.seed, "train"))
        out = pipeline.train_from_scenes(gts, maps, _augment_config(req.augment), cfg)
        return S.TrainResponse(
            checkpoint=base64.b64encode(out.checkpoint).decode("ascii"),
            loss_curve=out.report.loss_curve,
            n_samples=out.n_samples,
            final_loss=out.report.loss_curve[-1][1] if out.report.loss_curve else float("nan"),
        )

    @app.post("/eval", response_model=S.EvalResponse)
    def eval_endpoint(req: S.EvalRequest) -> S.EvalResponse:
        dets = detections_from_records([r.model_dump() for r in req.detections])
        gts = ground_truths_from_records([r.model_dump() for r in req.ground_truth])
        report = pipeline.evaluate(dets, gts)
        return S.EvalResponse(
            ap=report.ap, recall=report.recall,
            histogram_edges=report.histogram_edges,
            histogram_counts=report.histogram_counts,
            pearson_cls=report.pearson_cls,
            n_detections=report.n_detections,
            n_ground_truths=report.n_ground_truths,
        )

    @app.post("/gradcheck", response_model=S.GradcheckResponse)
    def gradcheck(req: S.GradcheckRequest) -> S.GradcheckResponse:
        results = pipeline.gradcheck(req.seed, req.tolerance_scale)
        return S.GradcheckResponse(
            ok=all(r.passed for r in results),
            checks=[S.CheckRecord(name=r.name, max_err=r.max_err, tol=r.tol,
                                  passed=r.passed, note=r.note) for r in results],
        )

    @app.post("/repro", response_model=S.ReproResponse)
    def repro(req: S.ReproRequest) -> S.ReproResponse:
        cfg = pipeline.ReproConfig(
            seed=req.seed, train_scenes=req.train_scenes, eval_scenes=req.eval_scenes,
            rho=req.rho, scene=_scene_config(req.scene),
            augment=_augment_config(req.augment),
            train=_train_config(req.train, 0),
            nms=replace(_nms_config(req.nms), variant="traditional"),
            refine=_refine_config(req.refine), topk=req.topk,
        )
        out = pipeline.run_repro(cfg)
        return S.ReproResponse(
            files={name: base64.b64encode(data).decode("ascii")
                   for name, data in out.files.items()},
        )

    return app


app = create_app()
