"""Angular-error metric and split-wise reporting.

Frames are assigned to evaluation subsets from ground truth only:

* ``all`` — every annotated frame;
* ``detectable_faces`` — frames whose face-existence annotation is true;
* ``front_180`` — ground-truth gaze pointing toward the camera
  (negative z; the camera looks down +z);
* ``front_facing`` — ground-truth gaze within a configurable cone
  (default 20 degrees) of the camera axis.

Prediction files are JSON lists of
``{"clip_id": str, "frame_index": int, "gaze": [x, y, z]}`` and must
cover every annotated frame.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import Manifest
from .errors import CoverageError, DegenerateGazeError, SchemaError

CAMERA_AXIS = np.array([0.0, 0.0, -1.0])


def angular_error_deg(pred, gt) -> float:
    """arccos of the cosine similarity, in degrees."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    np_ = np.linalg.norm(p)
    ng = np.linalg.norm(g)
    if np_ <= 1e-12 or ng <= 1e-12:
        raise DegenerateGazeError("cannot measure the angle of a zero-norm gaze vector")
    cos = float(np.dot(p, g) / (np_ * ng))
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


@dataclass(frozen=True)
class SplitConfig:
    front_facing_max_deg: float = 20.0


@dataclass(frozen=True)
class FrameError:
    clip_id: str
    frame_index: int
    error_deg: float


@dataclass(frozen=True)
class EvalReport:
    splits: dict[str, dict]       # name -> {"mean_deg": float, "count": int}
    total_frames: int
    per_frame: list[FrameError] = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "splits": self.splits,
            "total_frames": self.total_frames,
            "per_frame": [
                {"clip_id": e.clip_id, "frame_index": e.frame_index, "error_deg": e.error_deg}
                for e in self.per_frame
            ],
        }

    def table(self) -> str:
        lines = [f"{'split':<18} {'mean (deg)':>12} {'frames':>8}"]
        for name in ("detectable_faces", "front_180", "front_facing", "all"):
            stats = self.splits[name]
            mean = "n/a" if stats["count"] == 0 else f"{stats['mean_deg']:.3f}"
            lines.append(f"{name:<18} {mean:>12} {stats['count']:>8}")
        return "\n".join(lines)


def load_predictions(path) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise SchemaError(f"prediction file not found: {path}")
    except json.JSONDecodeError as e:
        raise SchemaError(f"prediction file is not valid JSON: {e}")
    if not isinstance(doc, list):
        raise SchemaError("prediction file must be a JSON list of records")
    for rec in doc:
        if (not isinstance(rec, dict) or "clip_id" not in rec or "frame_index" not in rec
                or "gaze" not in rec or not isinstance(rec["gaze"], list)
                or len(rec["gaze"]) != 3):
            raise SchemaError(
                "prediction records need keys clip_id, frame_index and a 3-element gaze")
    return doc


def save_predictions(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(records, f, indent=2, sort_keys=True)
        f.write("\n")


def evaluate_records(records: list[dict], manifest: Manifest,
                     split_cfg: SplitConfig = SplitConfig()) -> EvalReport:
    """Score predictions against manifest ground truth, per split."""
    by_key: dict[tuple[str, int], np.ndarray] = {}
    for rec in records:
        key = (rec["clip_id"], int(rec["frame_index"]))
        if key in by_key:
            raise SchemaError(f"duplicate prediction for clip '{key[0]}' frame {key[1]}")
        by_key[key] = np.asarray(rec["gaze"], dtype=np.float64)

    missing = []
    per_frame: list[FrameError] = []
    membership: dict[str, list[float]] = {
        "all": [], "detectable_faces": [], "front_180": [], "front_facing": []}
    for entry in manifest.clips:
        for t in range(entry.n_frames):
            key = (entry.id, t)
            if key not in by_key:
                missing.append(f"{entry.id}[{t}]")
                continue
            gt = entry.gaze[t]
            err = angular_error_deg(by_key[key], gt)
            per_frame.append(FrameError(entry.id, t, err))
            membership["all"].append(err)
            if bool(entry.existence["face"][t]):
                membership["detectable_faces"].append(err)
            if gt[2] < 0:
                membership["front_180"].append(err)
            if angular_error_deg(gt, CAMERA_AXIS) < split_cfg.front_facing_max_deg:
                membership["front_facing"].append(err)
    if missing:
        shown = ", ".join(missing[:20])
        more = "" if len(missing) <= 20 else f" (+{len(missing) - 20} more)"
        raise CoverageError(f"predictions missing for frames: {shown}{more}")

    splits = {
        name: {"mean_deg": float(np.mean(errs)) if errs else 0.0, "count": len(errs)}
        for name, errs in membership.items()
    }
    return EvalReport(splits=splits, total_frames=len(per_frame), per_frame=per_frame)


def evaluate(pred_path, manifest: Manifest,
             split_cfg: SplitConfig = SplitConfig()) -> EvalReport:
    return evaluate_records(load_predictions(pred_path), manifest, split_cfg)
