"""Command-line interface: a thin client over the service.

Each subcommand reads local files, sends one request through
:class:`ServiceClient` (in-process by default, ``--server URL`` for a remote
instance), and writes results atomically.  Every command takes ``--seed`` and
has no hidden nondeterminism; ``--config`` points at a TOML file whose
sections mirror the scene/augment/train/nms/refine configurations, with
command-line flags taking precedence.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from .client import ServiceClient
from .errors import IouPostError
from .fileio import (
    atomic_write_bytes,
    atomic_write_text,
    csv_text,
    detections_from_records,
    detections_to_records,
    dump_json,
    load_run_config,
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--config", type=Path, default=None, help="TOML run configuration")
    p.add_argument("--server", default=None, help="service URL; in-process when omitted")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ioupost",
        description="IoU-aware detection post-processing (thin client over the ioupost service)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--rho", type=float, default=None, help="target corr(cls_score, IoU)")

    p = sub.add_parser("nms", help="apply a suppression variant to a detection file")
    _add_common(p)
    p.add_argument("--in", dest="infile", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", choices=("traditional", "soft_linear", "soft_gaussian", "iou_guided"),
                   default=None)
    p.add_argument("--omega-nms", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--score-floor", type=float, default=None)
    p.add_argument("--class-agnostic", action="store_true", help="suppress across classes")
    p.add_argument("--coco-boxes", action="store_true", help="boxes in files are (x, y, w, h)")

    p = sub.add_parser("refine", help="gradient-based box refinement of top-k detections")
    _add_common(p)
    p.add_argument("--in", dest="infile", type=Path, required=True)
    p.add_argument("--featmaps", type=Path, required=True, help="directory of <image_id>.prfm")
    p.add_argument("--checkpoint", type=Path, default=None, help="PRWT IoU-head checkpoint")
    p.add_argument("--oracle", action="store_true", help="use the true-IoU oracle predictor")
    p.add_argument("--ground-truth", type=Path, default=None, help="required with --oracle")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trace", type=Path, default=None, help="write per-step trace JSONL")
    p.add_argument("--lambda", dest="step_size", type=float, default=None, help="step size")
    p.add_argument("--steps", type=int, default=None, help="iteration count T")
    p.add_argument("--omega1", type=float, default=None)
    p.add_argument("--omega2", type=float, default=None)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--coco-boxes", action="store_true")

    p = sub.add_parser("train", help="train the IoU head from a scenes directory")
    _add_common(p)
    p.add_argument("--scenes", type=Path, required=True,
                   help="directory with ground_truth.json and featmaps/")
    p.add_argument("--out", type=Path, required=True, help="output PRWT checkpoint")
    p.add_argument("--loss-curve", type=Path, default=None, help="write loss curve CSV")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)

    p = sub.add_parser("eval", help="detection metrics against ground truth")
    _add_common(p)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--ground-truth", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--coco-boxes", action="store_true")

    p = sub.add_parser("gradcheck", help="run all numerical verification suites")
    _add_common(p)
    p.add_argument("--tolerance-scale", type=float, default=1.0)

    p = sub.add_parser("repro", help="end-to-end reproduction pipeline")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--train-scenes", type=int, default=30)
    p.add_argument("--eval-scenes", type=int, default=20)
    p.add_argument("--rho", type=float, default=0.2)
    p.add_argument("--topk", type=int, default=None)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)

    return parser


def _scene_payload(cfg) -> dict:
    d = asdict(cfg)
    d.pop("seed", None)
    return d


def _augment_payload(cfg) -> dict:
    d = asdict(cfg)
    d.pop("candidate_budget", None)
    return d


def _train_payload(cfg) -> dict:
    d = asdict(cfg)
    d.pop("seed", None)
    return d


def _nms_payload(cfg) -> dict:
    return asdict(cfg)


def _refine_payload(cfg) -> dict:
    return asdict(cfg)


def _read_featmap_dir(directory: Path, image_ids: Sequence[str]) -> dict[str, str]:
    out = {}
    for image_id in image_ids:
        path = directory / f"{image_id}.prfm"
        if not path.exists():
            raise IouPostError(f"feature map not found: {path}")
        out[image_id] = base64.b64encode(path.read_bytes()).decode("ascii")
    return out


def _load_json(path: Path) -> list:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise IouPostError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise IouPostError(f"invalid JSON in {path}: {exc}")


def _records_for_upload(path: Path, coco: bool) -> list[dict]:
    """Validate a detection file and normalize boxes to corner format."""
    dets = detections_from_records(_load_json(path), coco_boxes=coco)
    return detections_to_records(dets)


def _write_detections_response(path: Path, records: list[dict], coco: bool) -> None:
    dets = detections_from_records(records)
    atomic_write_text(path, dump_json(detections_to_records(dets, coco_boxes=coco)))


def cmd_synth(args, client: ServiceClient) -> int:
    run_cfg = load_run_config(args.config, {
        "scene": {"score_iou_corr": args.rho},
    })
    payload = {"seed": args.seed, "scenes": args.scenes,
               "scene": _scene_payload(run_cfg.scene)}
    resp = client.synth(payload)
    out: Path = args.out
    atomic_write_text(out / "ground_truth.json", dump_json(resp["ground_truth"]))
    atomic_write_text(out / "detections.json", dump_json(resp["detections"]))
    for image_id, data in sorted(resp["featmaps"].items()):
        atomic_write_bytes(out / "featmaps" / f"{image_id}.prfm", base64.b64decode(data))
    print(f"wrote {args.scenes} scene(s) to {out}")
    return 0


def cmd_nms(args, client: ServiceClient) -> int:
    overrides = {"nms": {
        "variant": args.variant, "omega_nms": args.omega_nms, "sigma": args.sigma,
        "score_floor": args.score_floor,
        "per_class": False if args.class_agnostic else None,
    }}
    run_cfg = load_run_config(args.config, overrides)
    payload = {"detections": _records_for_upload(args.infile, args.coco_boxes),
               "nms": _nms_payload(run_cfg.nms)}
    resp = client.nms(payload)
    _write_detections_response(args.out, resp["detections"], args.coco_boxes)
    print(f"kept {len(resp['detections'])} detection(s) -> {args.out}")
    return 0


def cmd_refine(args, client: ServiceClient) -> int:
    if args.oracle == (args.checkpoint is not None):
        raise IouPostError("refine needs exactly one of --oracle or --checkpoint")
    if args.oracle and args.ground_truth is None:
        raise IouPostError("--oracle requires --ground-truth")
    overrides = {"refine": {
        "step_size": args.step_size, "steps": args.steps,
        "omega1": args.omega1, "omega2": args.omega2,
    }}
    run_cfg = load_run_config(args.config, overrides)
    records = _records_for_upload(args.infile, args.coco_boxes)
    image_ids = sorted({r["image_id"] for r in records})
    payload = {
        "detections": records,
        "featmaps": _read_featmap_dir(args.featmaps, image_ids),
        "refine": _refine_payload(run_cfg.refine),
        "topk": args.topk if args.topk is not None else 100,
        "oracle": args.oracle,
    }
    if args.oracle:
        payload["ground_truth"] = _load_json(args.ground_truth)
    else:
        payload["checkpoint"] = base64.b64encode(args.checkpoint.read_bytes()).decode("ascii")
    resp = client.refine(payload)
    _write_detections_response(args.out, resp["detections"], args.coco_boxes)
    if args.trace is not None:
        lines = "".join(json.dumps(rec) + "\n" for rec in resp["trace"])
        atomic_write_text(args.trace, lines)
    print(f"refined detections -> {args.out}")
    return 0


def cmd_train(args, client: ServiceClient) -> int:
    overrides = {"train": {
        "learning_rate": args.lr, "iterations": args.iterations,
        "batch_size": args.batch_size, "hidden": args.hidden,
    }}
    run_cfg = load_run_config(args.config, overrides)
    gt_records = _load_json(args.scenes / "ground_truth.json")
    image_ids = sorted({r["image_id"] for r in gt_records})
    payload = {
        "seed": args.seed,
        "ground_truth": gt_records,
        "featmaps": _read_featmap_dir(args.scenes / "featmaps", image_ids),
        "augment": _augment_payload(run_cfg.augment),
        "train": _train_payload(run_cfg.train),
    }
    resp = client.train(payload)
    atomic_write_bytes(args.out, base64.b64decode(resp["checkpoint"]))
    if args.loss_curve is not None:
        atomic_write_text(args.loss_curve, csv_text(
            ("iteration", "loss"), [(it, loss) for it, loss in resp["loss_curve"]]))
    print(f"trained on {resp['n_samples']} samples, final loss {resp['final_loss']:.4f} "
          f"-> {args.out}")
    return 0


def cmd_eval(args, client: ServiceClient) -> int:
    payload = {
        "detections": _records_for_upload(args.detections, args.coco_boxes),
        "ground_truth": _load_json(args.ground_truth),
    }
    resp = client.evaluate(payload)
    rows: list[tuple] = [("AP", "", resp["ap"]["AP"])]
    for name in ("AP50", "AP60", "AP70", "AP80", "AP90"):
        rows.append((name, float(name[2:]) / 100.0, resp["ap"][name]))
    for t, r in resp["recall"]:
        rows.append(("recall", t, r))
    edges = resp["histogram_edges"]
    for k, count in enumerate(resp["histogram_counts"]):
        rows.append(("positives", edges[k + 1], count))
    if resp["pearson_cls"] is not None:
        rows.append(("pearson_cls", "", resp["pearson_cls"]))
    out: Path = args.out
    atomic_write_text(out / "metrics.csv", csv_text(("metric", "threshold", "value"), rows))
    atomic_write_text(out / "summary.json", dump_json(resp))
    print(f"AP={resp['ap']['AP']:.4f} over {resp['n_ground_truths']} ground truths -> {out}")
    return 0


def cmd_gradcheck(args, client: ServiceClient) -> int:
    resp = client.gradcheck({"seed": args.seed, "tolerance_scale": args.tolerance_scale})
    for check in resp["checks"]:
        status = "ok" if check["passed"] else "FAIL"
        note = f" ({check['note']})" if check["note"] else ""
        print(f"{status:4s} {check['name']}: max_err={check['max_err']:.3e} "
              f"tol={check['tol']:.1e}{note}")
    print("gradcheck:", "all passed" if resp["ok"] else "FAILURES above")
    return 0 if resp["ok"] else 1


def cmd_repro(args, client: ServiceClient) -> int:
    run_cfg = load_run_config(args.config, {"scene": {"score_iou_corr": args.rho}})
    payload = {
        "seed": args.seed,
        "train_scenes": args.train_scenes,
        "eval_scenes": args.eval_scenes,
        "rho": args.rho,
        "scene": _scene_payload(run_cfg.scene),
        "augment": _augment_payload(run_cfg.augment),
        "train": _train_payload(run_cfg.train),
        "nms": _nms_payload(run_cfg.nms),
        "refine": _refine_payload(run_cfg.refine),
    }
    if args.topk is not None:
        payload["topk"] = args.topk
    resp = client.repro(payload)
    out: Path = args.out
    for name, data in sorted(resp["files"].items()):
        atomic_write_bytes(out / name, base64.b64decode(data))
    print(f"wrote {len(resp['files'])} file(s) to {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "nms": cmd_nms,
    "refine": cmd_refine,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "repro": cmd_repro,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return cmd_serve(args)
    try:
        with ServiceClient(args.server) as client:
            return _HANDLERS[args.command](args, client)
    except IouPostError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
