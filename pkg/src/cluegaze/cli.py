"""Command-line entry point: synth, train, infer, eval, render.

Configuration comes from one JSON file with four sections (model, train,
synth, eval) plus dotted-key overrides; precedence is CLI overrides >
file > built-in defaults. Unknown keys are rejected with the full list
of valid keys.

Exit codes: 0 success, 2 configuration error, 3 training abort,
4 data/format error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import dataio, engine, evaluation, synthgen, visualize
from .errors import (CluegazeError, ConfigError, CoverageError, InvalidAnnotationError,
                     MissingFrameError, SchemaError, TrainingAbortError)

SECTIONS = {
    "model": engine.ModelConfig,
    "train": engine.TrainConfig,
    "synth": synthgen.SynthConfig,
    "eval": evaluation.SplitConfig,
}


def default_config_dict() -> dict:
    return {name: dataclasses.asdict(cls()) for name, cls in SECTIONS.items()}


def valid_keys() -> list[str]:
    keys = []

    def walk(prefix: str, d: dict):
        for k, v in d.items():
            dotted = f"{prefix}.{k}" if prefix else k
            if isinstance(v, dict):
                walk(dotted, v)
            else:
                keys.append(dotted)

    walk("", default_config_dict())
    return sorted(keys)


def _set_path(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key '{dotted}'. Valid keys:\n  "
                              + "\n  ".join(valid_keys()))
        node = node[p]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key '{dotted}'. Valid keys:\n  "
                          + "\n  ".join(valid_keys()))
    node[leaf] = value


def _merge_file(doc: dict, path: str) -> None:
    try:
        with open(path, "r", encoding="utf-8") as f:
            loaded = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}")
    if not isinstance(loaded, dict):
        raise ConfigError("config file must be a JSON object of sections")

    def walk(prefix: str, node):
        if isinstance(node, dict):
            for k, v in node.items():
                walk(f"{prefix}.{k}" if prefix else k, v)
        else:
            _set_path(doc, prefix, node)

    walk("", loaded)


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override '{text}' must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings allowed, e.g. model.variant=toy
    return key.strip(), value


def build_config(args) -> dict:
    """Resolved config sections as dataclass instances."""
    doc = default_config_dict()
    if getattr(args, "config", None):
        _merge_file(doc, args.config)
    for text in getattr(args, "set", None) or []:
        key, value = _parse_override(text)
        _set_path(doc, key, value)

    try:
        model_doc = dict(doc["model"])
        loss_doc = model_doc.pop("loss")
        model = engine.ModelConfig(**model_doc, loss=engine.LossWeights(**loss_doc))
        return {
            "model": model,
            "train": engine.TrainConfig(**doc["train"]),
            "synth": synthgen.SynthConfig(**doc["synth"]),
            "eval": evaluation.SplitConfig(**doc["eval"]),
        }
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration value: {e}")


def cmd_synth(args) -> int:
    cfg = build_config(args)
    synth_cfg = cfg["synth"]
    if args.seed is not None:
        synth_cfg = dataclasses.replace(synth_cfg, seed=args.seed)
    if args.frames is not None:
        synth_cfg = dataclasses.replace(synth_cfg, T=args.frames)
    if args.clips < 0:
        raise ConfigError(f"--clips must be nonnegative, got {args.clips}")
    path = synthgen.generate_dataset(synth_cfg, args.clips, args.out)
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    manifest = dataio.load_manifest(args.manifest)
    resume = None
    model_cfg = cfg["model"]
    if args.resume:
        resume = engine.load_checkpoint(args.resume)
        model_cfg = resume.config
    result = engine.train(manifest, model_cfg, cfg["train"], out_dir=args.out, resume=resume,
                          log=_train_logger(args))
    print(result.checkpoint_path or "")
    return 0


def _train_logger(args):
    if args.quiet:
        return None

    def log(iteration, report):
        if iteration % args.log_every == 0:
            print(f"iter {iteration:6d}  total {report.total:10.4f}  "
                  f"anchor {report.anchor:9.4f}  gaze {report.gaze_fusion:8.4f}  "
                  f"temporal {report.temporal:8.4f}")

    return log


def cmd_infer(args) -> int:
    ckpt = engine.load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    model.eval()
    manifest = dataio.load_manifest(args.manifest)
    records = []
    for entry in manifest.clips:
        clip = dataio.load_clip(manifest, entry)
        h, w = clip.image_size
        if h != model.cfg.image_size or w != model.cfg.image_size:
            raise ConfigError(
                f"clip '{entry.id}' frames are {h}x{w} but the checkpoint expects "
                f"{model.cfg.image_size}x{model.cfg.image_size}")
        out = engine.infer_video(clip.frames, model, stride=args.stride,
                                 window_len=args.window_len)
        for t, gaze in zip(out.frame_indices, out.gaze):
            records.append({"clip_id": entry.id, "frame_index": int(t),
                            "gaze": [float(v) for v in gaze]})
    evaluation.save_predictions(records, args.out)
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    cfg = build_config(args)
    manifest = dataio.load_manifest(args.manifest)
    report = evaluation.evaluate(args.predictions, manifest, cfg["eval"])
    print(report.table())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def cmd_render(args) -> int:
    manifest = dataio.load_manifest(args.manifest)
    predictions = evaluation.load_predictions(args.predictions)
    written = visualize.render_manifest_overlays(manifest, predictions, args.out,
                                                 draw_gt=args.gt)
    print(f"{len(written)} frames written to {args.out}")
    return 0


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (sections: model, train, synth, eval)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted-key config override, e.g. model.use_eye_clue=false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cluegaze",
                                     description="Video gaze estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clips", type=int, required=True, help="number of clips")
    p.add_argument("--seed", type=int, default=None, help="shorthand for synth.seed")
    p.add_argument("--frames", type=int, default=None, help="shorthand for synth.T")
    _add_config_args(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="directory for checkpoints and losses.csv")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--quiet", action="store_true")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict per-frame gaze for manifest clips")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="prediction JSON path")
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--window-len", type=int, default=None)
    _add_config_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a manifest")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write the report as JSON here")
    _add_config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="overlay predicted (and GT) gaze arrows on frames")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True, help="output directory for overlay frames")
    p.add_argument("--gt", action="store_true", help="also draw ground-truth arrows")
    _add_config_args(p)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingAbortError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 3
    except (SchemaError, MissingFrameError, CoverageError, InvalidAnnotationError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 4
    except CluegazeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
