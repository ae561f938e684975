"""Command-line driver: generate, train, infer, eval, inspect.

A typical round trip:

    hierhand generate --count 2000 --seed 1 --output data/train
    hierhand generate --count 200 --seed 2 --output data/test
    hierhand train --data data/train --output model
    hierhand infer --model model --data data/test --mode hybrid --output pred
    hierhand eval --pred pred/predictions.txt --truth data/test/annotations.txt --output report

All commands accept ``--config`` (YAML overrides), ``--seed``,
``--threads`` and ``--output``.  Outputs are deterministic: the same seed
and config produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .annotations import (
    AnnotationRecord,
    load_annotations,
    load_predictions,
    save_annotations,
    save_predictions,
)
from .cascade import train_pipeline
from .config import load_config
from .errors import ConfigError, DataFormatError, HierhandError, RenderError
from .metrics import compute_metric, default_thresholds
from .pipeline import (
    INFER_MODES,
    FrameDiagnostics,
    infer_frame,
    infer_frames,
    load_model,
    save_model,
)
from .synth import generate_dataset

_NUM = "{:.12g}".format


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="pipeline config YAML")
    parser.add_argument("--seed", type=int, default=0, help="random seed")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for inference")
    parser.add_argument("--output", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierhand", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"hierhand {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    _add_common(p)
    p.add_argument("--count", type=int, required=True, help="number of frames")

    p = sub.add_parser("train", help="train the cascade and baseline heads")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")

    p = sub.add_parser("infer", help="run inference over a dataset")
    _add_common(p)
    p.add_argument("--model", type=Path, required=True, help="model bundle directory")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--mode", choices=INFER_MODES, default="hierarchical")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _add_common(p)
    p.add_argument("--pred", type=Path, required=True, help="predictions file")
    p.add_argument("--truth", type=Path, required=True, help="annotation file with ground truth")
    p.add_argument("--units", choices=("model", "normalized"), default=None)
    p.add_argument("--per-frame-max", action="store_true", help="score per-frame worst joints")
    p.add_argument("--plot", action="store_true", help="also write metric_curve.png")

    p = sub.add_parser("inspect", help="dump per-stage and per-generation traces for one frame")
    _add_common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--frame", type=int, default=0, help="frame index within the dataset")
    return parser


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    sampler = cfg.make_sampler(args.seed)
    samples = generate_dataset(sampler, args.count)
    records = [
        AnnotationRecord(f"f{idx:06d}", s.joints, s.frame) for idx, s in enumerate(samples)
    ]
    args.output.mkdir(parents=True, exist_ok=True)
    save_annotations(args.output / "annotations.txt", records, cfg.camera)
    print(f"wrote {len(records)} frames to {args.output}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    records, camera = load_annotations(args.data / "annotations.txt")
    dataset = [(rec.frame, rec.joints) for rec in records]
    model = train_pipeline(dataset, cfg.cascade, camera.to_image(cfg.skeleton), camera)
    save_model(model, args.output)
    print(f"trained on {len(dataset)} frames; bundle in {args.output}")
    return 0


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    model = load_model(args.model)
    records, _camera = load_annotations(args.data / "annotations.txt")
    frames = [rec.frame for rec in records]
    results = infer_frames(
        model, frames, mode=args.mode, swarm=cfg.swarm, seed=args.seed, threads=args.threads
    )
    out = [
        AnnotationRecord(rec.frame_id, joints, None) for rec, joints in zip(records, results)
    ]
    args.output.mkdir(parents=True, exist_ok=True)
    save_predictions(args.output / "predictions.txt", out)
    print(f"inferred {len(out)} frames in mode {args.mode}; wrote {args.output / 'predictions.txt'}")
    return 0


def _write_csv(path: Path, header: str, rows: list[str]) -> None:
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    preds = load_predictions(args.pred)
    truths, camera = load_annotations(args.truth, with_depth=False)
    truth_by_id = {rec.frame_id: rec.joints for rec in truths}
    missing = [rec.frame_id for rec in preds if rec.frame_id not in truth_by_id]
    if missing:
        raise DataFormatError(f"predictions reference unknown frames: {missing[:5]}")
    aligned_truth = [truth_by_id[rec.frame_id] for rec in preds]
    units = args.units or cfg.eval.units
    if units == "model":
        error_scale = 1.0 / camera.scale
        thresholds = default_thresholds(cfg.skeleton, cfg.eval.n_thresholds)
    else:
        error_scale = 1.0
        thresholds = default_thresholds(cfg.skeleton, cfg.eval.n_thresholds) * camera.scale
    per_frame_max = args.per_frame_max or cfg.eval.per_frame_max
    curve = compute_metric(
        [r.joints for r in preds], aligned_truth, thresholds, error_scale, per_frame_max
    )
    args.output.mkdir(parents=True, exist_ok=True)
    _write_csv(
        args.output / "metric_curve.csv",
        "threshold,proportion",
        [f"{_NUM(t)},{_NUM(p)}" for t, p in zip(curve.thresholds, curve.proportions)],
    )
    _write_csv(
        args.output / "per_joint.csv",
        "layer,joint,mean_error,median_error",
        [f"{r.layer},{r.finger},{_NUM(r.mean_error)},{_NUM(r.median_error)}" for r in curve.per_joint],
    )
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(curve.thresholds, curve.proportions)
        ax.set_xlabel(f"max joint error ({units} units)")
        ax.set_ylabel("proportion of joints")
        ax.set_ylim(0, 1.02)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(args.output / "metric_curve.png", dpi=120)
        plt.close(fig)
    print(f"mean error: {_NUM(curve.mean_error)} ({units} units); curves in {args.output}")
    return 0


def cmd_inspect(args) -> int:
    cfg = load_config(args.config)
    model = load_model(args.model)
    records, _camera = load_annotations(args.data / "annotations.txt")
    if not 0 <= args.frame < len(records):
        raise DataFormatError(f"frame index {args.frame} outside dataset of {len(records)}")
    rec = records[args.frame]
    diag = FrameDiagnostics()
    joints = infer_frame(model, rec.frame, mode="hybrid", swarm=cfg.swarm, seed=args.seed, diagnostics=diag)
    errors = np.linalg.norm(joints.coords - rec.joints.coords, axis=1)
    args.output.mkdir(parents=True, exist_ok=True)
    _write_csv(
        args.output / "stage_trace.csv",
        "layer,stage,joint,x_before,y_before,z_before,x_after,y_after,z_after,theta,crop_ratio",
        [
            ",".join(
                [str(r.layer), str(r.stage), str(r.joint)]
                + [_NUM(v) for v in (*r.before, *r.after, r.theta, r.crop_ratio)]
            )
            for r in diag.state.records
        ],
    )
    _write_csv(
        args.output / "energy_trace.csv",
        "layer,generation,best_energy",
        [
            f"{layer},{g},{_NUM(e)}"
            for layer, trace in sorted(diag.energy_traces.items())
            for g, e in enumerate(trace)
        ],
    )
    print(
        f"frame {rec.frame_id}: mean joint error {_NUM(float(errors.mean()))} "
        f"(normalized units); traces in {args.output}"
    )
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}

_CATEGORIES = {
    ConfigError: "config",
    DataFormatError: "data",
    RenderError: "render",
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except HierhandError as exc:
        category = next((name for cls, name in _CATEGORIES.items() if isinstance(exc, cls)), "error")
        print(f"error[{category}]: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error[invalid-input]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
