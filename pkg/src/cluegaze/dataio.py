"""Manifest schema, frame I/O, training-window sampling, inference windows.

Manifest format (UTF-8 JSON, version "1")::

    {
      "version": "1",
      "clips": [
        {
          "id": "clip0000",
          "frames": ["frames/clip0000_f000.png", ...],
          "gaze": [[x, y, z], ...],
          "boxes": {"head": [[cx, cy, w, h], ...], "face": ..., "eye": ...},
          "existence": {"head": [true, ...], "face": ..., "eye": ...}
        },
        ...
      ],
      "metadata": {...}
    }

Frame paths are relative to the manifest file. Per-clip array lengths must
all equal that clip's frame count. Adapters for external datasets produce
this same layout; face/eye boxes for real footage are expected as
precomputed sidecar annotations from whatever detector the adapter author
trusts.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from PIL import Image

from .datamodel import CLUES, ClipAnnotations, VideoClip
from .errors import MissingFrameError, SchemaError

MANIFEST_VERSION = "1"


@dataclass(frozen=True)
class ClipEntry:
    id: str
    frames: list[str]                 # paths relative to the manifest file
    gaze: np.ndarray                  # (T, 3)
    boxes: dict[str, np.ndarray]      # clue -> (T, 4)
    existence: dict[str, np.ndarray]  # clue -> (T,) bool

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class Manifest:
    version: str
    clips: list[ClipEntry]
    metadata: dict = field(default_factory=dict)
    root: str = "."  # directory the frame paths are relative to


def save_frame_png(frame: np.ndarray, path) -> None:
    """Write a float [0,1] HxWx3 frame as 8-bit RGB PNG."""
    arr = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_frame_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_manifest(manifest: Manifest, path) -> None:
    doc = {
        "version": manifest.version,
        "clips": [
            {
                "id": e.id,
                "frames": list(e.frames),
                "gaze": [[float(v) for v in row] for row in e.gaze],
                "boxes": {c: [[float(v) for v in row] for row in e.boxes[c]] for c in CLUES},
                "existence": {c: [bool(v) for v in e.existence[c]] for c in CLUES},
            }
            for e in manifest.clips
        ],
        "metadata": manifest.metadata,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _require(doc: dict, key: str, kind, clip_id: str | None = None):
    where = f"clip '{clip_id}'" if clip_id else "manifest"
    if key not in doc:
        raise SchemaError(f"{where}: missing key '{key}'")
    value = doc[key]
    if kind is not None and not isinstance(value, kind):
        raise SchemaError(f"{where}: key '{key}' has type {type(value).__name__}")
    return value


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest file.

    Raises SchemaError naming the offending clip id and key on mismatch,
    and MissingFrameError when a referenced frame file does not exist.
    """
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise SchemaError(f"manifest file not found: {path}")
    except json.JSONDecodeError as e:
        raise SchemaError(f"manifest is not valid JSON: {e}")

    if not isinstance(doc, dict):
        raise SchemaError("manifest top level must be a JSON object")
    version = _require(doc, "version", str)
    if version != MANIFEST_VERSION:
        raise SchemaError(f"unsupported manifest version '{version}' (expected '{MANIFEST_VERSION}')")
    clips_doc = _require(doc, "clips", list)
    metadata = _require(doc, "metadata", dict)

    root = os.path.dirname(os.path.abspath(path))
    clips = []
    for raw in clips_doc:
        if not isinstance(raw, dict):
            raise SchemaError("clip entries must be JSON objects")
        cid = _require(raw, "id", str)
        frames = _require(raw, "frames", list, cid)
        n = len(frames)
        if n < 1:
            raise SchemaError(f"clip '{cid}': key 'frames' must be non-empty")

        gaze_doc = _require(raw, "gaze", list, cid)
        if len(gaze_doc) != n or any(not isinstance(r, list) or len(r) != 3 for r in gaze_doc):
            raise SchemaError(f"clip '{cid}': key 'gaze' must be {n} rows of 3 floats")
        boxes_doc = _require(raw, "boxes", dict, cid)
        exist_doc = _require(raw, "existence", dict, cid)
        for name, mapping in (("boxes", boxes_doc), ("existence", exist_doc)):
            if set(mapping) != set(CLUES):
                raise SchemaError(
                    f"clip '{cid}': key '{name}' must have exactly keys {sorted(CLUES)}, "
                    f"got {sorted(mapping)}"
                )
        boxes = {}
        existence = {}
        for c in CLUES:
            rows = boxes_doc[c]
            if len(rows) != n or any(not isinstance(r, list) or len(r) != 4 for r in rows):
                raise SchemaError(f"clip '{cid}': key 'boxes.{c}' must be {n} rows of 4 floats")
            boxes[c] = np.asarray(rows, dtype=np.float64)
            flags = exist_doc[c]
            if len(flags) != n or any(not isinstance(v, bool) for v in flags):
                raise SchemaError(f"clip '{cid}': key 'existence.{c}' must be {n} booleans")
            existence[c] = np.asarray(flags, dtype=bool)

        for rel in frames:
            if not isinstance(rel, str):
                raise SchemaError(f"clip '{cid}': key 'frames' must contain path strings")
            if not os.path.exists(os.path.join(root, rel)):
                raise MissingFrameError(f"clip '{cid}': frame file not found: {rel}")

        clips.append(ClipEntry(id=cid, frames=frames, gaze=np.asarray(gaze_doc, dtype=np.float64),
                               boxes=boxes, existence=existence))

    return Manifest(version=version, clips=clips, metadata=metadata, root=root)


def load_clip(manifest: Manifest, entry: ClipEntry) -> VideoClip:
    """Materialize a manifest entry: load frames and attach annotations."""
    frames = np.stack([load_frame_png(os.path.join(manifest.root, rel)) for rel in entry.frames])
    ann = ClipAnnotations(gaze=entry.gaze.copy(), boxes={c: entry.boxes[c].copy() for c in CLUES},
                          existence={c: entry.existence[c].copy() for c in CLUES})
    return VideoClip(frames=frames, frame_indices=np.arange(entry.n_frames), annotations=ann)


def enumerate_training_windows(manifest: Manifest, clip_len: int) -> list[tuple[int, int]]:
    """All (clip index, start offset) pairs of full-length windows.

    Source clips shorter than ``clip_len`` contribute nothing.
    """
    if clip_len < 1:
        raise ValueError(f"clip_len must be >= 1, got {clip_len}")
    windows = []
    for ci, entry in enumerate(manifest.clips):
        for start in range(0, entry.n_frames - clip_len + 1):
            windows.append((ci, start))
    return windows


def sample_training_clips(manifest: Manifest, clip_len: int, seed: int) -> Iterator[VideoClip]:
    """Yield fixed-length training windows in a seeded shuffled order.

    One pass over every available window; reproducible for a given seed.
    """
    windows = enumerate_training_windows(manifest, clip_len)
    order = np.random.default_rng(seed).permutation(len(windows))
    for idx in order:
        ci, start = windows[idx]
        clip = load_clip(manifest, manifest.clips[ci])
        yield clip.window(start, start + clip_len)


def enumerate_inference_windows(n_frames: int, clip_len: int, stride: int) -> list[tuple[int, int]]:
    """Sliding [start, end) windows covering every frame of a video.

    Windows advance by ``stride``; the final window is shifted left so its
    end lands exactly on ``n_frames``. Videos shorter than ``clip_len``
    get a single [0, n_frames) window. A stride larger than the window
    length is capped to it, otherwise interior frames would be skipped.
    """
    if n_frames < 1 or clip_len < 1 or stride < 1:
        raise ValueError("n_frames, clip_len and stride must all be >= 1")
    if n_frames <= clip_len:
        return [(0, n_frames)]
    stride = min(stride, clip_len)
    windows = [(s, s + clip_len) for s in range(0, n_frames - clip_len + 1, stride)]
    if windows[-1][1] < n_frames:
        windows.append((n_frames - clip_len, n_frames))
    return windows
