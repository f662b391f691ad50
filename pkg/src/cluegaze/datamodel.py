"""Shared value types: video clips, annotations, boxes, gaze vectors.

Conventions used throughout the package:

* Images are float32 arrays of shape (H, W, 3) with values in [0, 1].
* Boxes are center-form (cx, cy, w, h), normalized to [0, 1] image
  coordinates.
* Gaze is a 3-vector (x, y, z). The camera looks down +z, so a subject
  looking straight into the camera has gaze (0, 0, -1). x points right
  and y points down in image coordinates.

All types here are immutable value objects and safe to share between
concurrent workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DegenerateGazeError, InvalidBoxError

GAZE_NORM_TOL = 1e-6
MIN_GAZE_NORM = 1e-12


class ClueKind(str, Enum):
    """The three semantic regions feeding gaze estimation.

    Iteration order is fixed (head, face, eye); the fusion head relies on
    it for deterministic concatenation.
    """

    HEAD = "head"
    FACE = "face"
    EYE = "eye"


CLUES: tuple[str, ...] = tuple(kind.value for kind in ClueKind)


@dataclass(frozen=True)
class Box:
    """Center-form box normalized to [0, 1] image coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidBoxError(f"box width/height must be positive, got w={self.w}, h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Box":
        cx, cy, w, h = (float(v) for v in a)
        return Box(cx, cy, w, h)


def box_center_to_corner(b: Box) -> tuple[float, float, float, float]:
    """Convert a center-form box to corner form (x1, y1, x2, y2), clamped to [0, 1]."""
    x1 = min(max(b.cx - b.w / 2, 0.0), 1.0)
    y1 = min(max(b.cy - b.h / 2, 0.0), 1.0)
    x2 = min(max(b.cx + b.w / 2, 0.0), 1.0)
    y2 = min(max(b.cy + b.h / 2, 0.0), 1.0)
    return (x1, y1, x2, y2)


def box_corner_to_center(corners: tuple[float, float, float, float]) -> Box:
    """Inverse of :func:`box_center_to_corner` (exact when no clamping occurred)."""
    x1, y1, x2, y2 = corners
    if not (x2 > x1 and y2 > y1):
        raise InvalidBoxError(f"corner box must have positive extent, got {corners}")
    return Box((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def normalize_gaze(g) -> np.ndarray:
    """Return ``g`` scaled to unit norm.

    Idempotent bit-for-bit: inputs already unit-norm (within a few ulp)
    are returned unchanged, so a second normalization cannot drift.
    """
    v = np.asarray(g, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n <= MIN_GAZE_NORM:
        raise DegenerateGazeError(f"gaze norm {n} too small to normalize")
    if abs(n - 1.0) <= 8 * np.finfo(np.float64).eps:
        return v.copy()
    return v / n


@dataclass(frozen=True)
class ClipAnnotations:
    """Per-frame ground truth for one clip.

    ``gaze`` holds unit 3-vectors, one per frame. ``boxes`` and
    ``existence`` are keyed by clue name; wherever existence is false the
    corresponding box entry is ignored by all consumers and may hold any
    value.
    """

    gaze: np.ndarray                  # (T, 3) float64, unit rows
    boxes: dict[str, np.ndarray]      # clue -> (T, 4) center-form
    existence: dict[str, np.ndarray]  # clue -> (T,) bool

    def validate(self, n_frames: int) -> None:
        if self.gaze.shape != (n_frames, 3):
            raise ValueError(f"gaze shape {self.gaze.shape} != ({n_frames}, 3)")
        norms = np.linalg.norm(self.gaze, axis=1)
        if not np.all(np.abs(norms - 1.0) <= GAZE_NORM_TOL):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValueError(f"gaze rows must be unit norm (worst deviation {worst:g})")
        for mapping, name in ((self.boxes, "boxes"), (self.existence, "existence")):
            if set(mapping) != set(CLUES):
                raise ValueError(f"{name} keys must be exactly {CLUES}, got {sorted(mapping)}")
        for clue in CLUES:
            if self.boxes[clue].shape != (n_frames, 4):
                raise ValueError(f"boxes[{clue}] shape {self.boxes[clue].shape} != ({n_frames}, 4)")
            if self.existence[clue].shape != (n_frames,):
                raise ValueError(f"existence[{clue}] shape {self.existence[clue].shape} != ({n_frames},)")

    def window(self, start: int, end: int) -> "ClipAnnotations":
        return ClipAnnotations(
            gaze=self.gaze[start:end],
            boxes={c: self.boxes[c][start:end] for c in CLUES},
            existence={c: self.existence[c][start:end] for c in CLUES},
        )


@dataclass(frozen=True)
class VideoClip:
    """T RGB frames plus their positions in the source video."""

    frames: np.ndarray               # (T, H, W, 3) float32 in [0, 1]
    frame_indices: np.ndarray        # (T,) int, strictly increasing
    annotations: ClipAnnotations | None = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        t = self.frames.shape[0]
        if t < 1:
            raise ValueError("clip must contain at least one frame")
        if self.frame_indices.shape != (t,):
            raise ValueError(f"frame_indices shape {self.frame_indices.shape} != ({t},)")
        if t > 1 and not np.all(np.diff(self.frame_indices) > 0):
            raise ValueError("frame_indices must be strictly increasing")
        if self.annotations is not None:
            self.annotations.validate(t)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def window(self, start: int, end: int) -> "VideoClip":
        """Sub-clip covering source frames [start, end)."""
        ann = self.annotations.window(start, end) if self.annotations is not None else None
        return VideoClip(
            frames=self.frames[start:end],
            frame_indices=self.frame_indices[start:end],
            annotations=ann,
        )
