"""Procedural generation of labeled synthetic gaze-video clips.

Each frame shows a stylized subject built from geometric shapes:

* a filled head disc whose brightness encodes the depth component of the
  gaze (brighter = looking away from the camera), with a dark "nose"
  marker whose offset from the disc center encodes coarse yaw/pitch;
* a face disc that shifts with head orientation;
* a both-eyes strip with two eyes whose pupil offsets encode the gaze
  direction at sub-pixel precision (anti-aliased rendering).

The three cues deliberately carry the signal at different fidelities. The
nose marker is snapped to a coarse pixel grid and the face center to a
finer one, while pupils are placed continuously, so models reading only
the large regions face a quantization floor that models reading the eye
region do not. Gaze follows a smooth first-order autoregressive walk in
(yaw, pitch), which keeps the temporal regularizer meaningfully nonzero.

When |yaw| exceeds ``occlusion_yaw`` the subject has turned away: the face
and eye strip are not rendered and their existence flags are false.

All randomness is owned by a seeded generator, so identical configs render
bit-identical clips.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .datamodel import CLUES, ClipAnnotations, VideoClip
from .errors import ConfigError

# Geometry in fractions of the image side.
HEAD_RADIUS = 0.40
NOSE_GAIN = 0.30
NOSE_RADIUS = 0.035
FACE_RADIUS = 0.26
FACE_GAIN_X = 0.10
FACE_GAIN_Y = 0.08
EYE_DX = 0.10
EYE_DY = -0.05
EYE_RADIUS = 0.055
PUPIL_RADIUS = 0.02
PUPIL_GAIN = 0.03

# Pixel grids the coarse cues snap to (at any resolution, in pixels).
NOSE_GRID_PX = 8
FACE_GRID_PX = 2

BG_COLOR = np.array([0.92, 0.92, 0.92], dtype=np.float32)
FACE_COLOR = np.array([0.82, 0.70, 0.58], dtype=np.float32)
EYE_COLOR = np.array([0.98, 0.98, 0.98], dtype=np.float32)
PUPIL_COLOR = np.array([0.05, 0.05, 0.08], dtype=np.float32)
NOSE_COLOR = np.array([0.45, 0.15, 0.12], dtype=np.float32)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    T: int = 7
    image_size: int = 64
    yaw_range: float = 0.7
    pitch_range: float = 0.4
    walk_smoothness: float = 0.8
    occlusion_yaw: float = math.pi / 2

    def __post_init__(self):
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if not (0.0 < self.walk_smoothness < 1.0):
            raise ConfigError(f"walk_smoothness must be in (0, 1), got {self.walk_smoothness}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.yaw_range < 0 or self.pitch_range < 0:
            raise ConfigError("yaw_range and pitch_range must be nonnegative")


def yaw_pitch_to_gaze(yaw: float, pitch: float) -> np.ndarray:
    """(yaw, pitch) -> unit gaze; (0, 0) faces the camera, i.e. (0, 0, -1)."""
    return np.array(
        [math.sin(yaw) * math.cos(pitch), math.sin(pitch), -math.cos(yaw) * math.cos(pitch)],
        dtype=np.float64,
    )


def gaze_walk(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth AR(1) trajectory over (yaw, pitch), clipped to the configured ranges."""
    s = cfg.walk_smoothness
    ranges = np.array([cfg.yaw_range, cfg.pitch_range])
    # Innovation scale chosen so the stationary std is about half the range.
    sigma = (ranges / 2.0) * math.sqrt(1.0 - s * s)
    traj = np.zeros((cfg.T, 2), dtype=np.float64)
    traj[0] = rng.uniform(-ranges, ranges)
    for t in range(1, cfg.T):
        step = s * traj[t - 1] + sigma * rng.standard_normal(2)
        traj[t] = np.clip(step, -ranges, ranges)
    return traj


@dataclass(frozen=True)
class FrameGeometry:
    """Pixel-space placement of every rendered element for one frame.

    Shared between the renderer and tests so the pupil-offset invariant can
    be checked against the exact geometry that was drawn.
    """

    head_center: tuple[float, float]
    head_radius: float
    nose_center: tuple[float, float]
    face_center: tuple[float, float]
    eye_centers: tuple[tuple[float, float], tuple[float, float]]
    pupil_centers: tuple[tuple[float, float], tuple[float, float]]
    face_visible: bool
    boxes: dict[str, np.ndarray]  # clue -> (4,) normalized center-form


def frame_geometry(cfg: SynthConfig, yaw: float, pitch: float) -> FrameGeometry:
    size = float(cfg.image_size)
    gaze = yaw_pitch_to_gaze(yaw, pitch)
    head_c = (0.5 * size, 0.5 * size)
    head_r = HEAD_RADIUS * size

    def snap(v: float, grid: int) -> float:
        return round(v / grid) * grid

    nose = (
        snap(head_c[0] + NOSE_GAIN * size * math.sin(yaw), NOSE_GRID_PX),
        snap(head_c[1] + NOSE_GAIN * size * math.sin(pitch), NOSE_GRID_PX),
    )
    face_c = (
        snap(head_c[0] + FACE_GAIN_X * size * math.sin(yaw), FACE_GRID_PX),
        snap(head_c[1] + FACE_GAIN_Y * size * math.sin(pitch), FACE_GRID_PX),
    )
    eyes = (
        (face_c[0] - EYE_DX * size, face_c[1] + EYE_DY * size),
        (face_c[0] + EYE_DX * size, face_c[1] + EYE_DY * size),
    )
    pupil_off = (PUPIL_GAIN * size * gaze[0], PUPIL_GAIN * size * gaze[1])
    pupils = tuple((ex + pupil_off[0], ey + pupil_off[1]) for ex, ey in eyes)

    boxes = {
        "head": np.array([0.5, 0.5, 2 * HEAD_RADIUS, 2 * HEAD_RADIUS]),
        "face": np.array([face_c[0] / size, face_c[1] / size, 2 * FACE_RADIUS, 2 * FACE_RADIUS]),
        "eye": np.array(
            [face_c[0] / size, (face_c[1] + EYE_DY * size) / size,
             2 * (EYE_DX + EYE_RADIUS), 2 * EYE_RADIUS]
        ),
    }
    return FrameGeometry(
        head_center=head_c,
        head_radius=head_r,
        nose_center=nose,
        face_center=face_c,
        eye_centers=eyes,
        pupil_centers=pupils,
        face_visible=abs(yaw) <= cfg.occlusion_yaw,
        boxes=boxes,
    )


def _paint_disc(canvas: np.ndarray, center: tuple[float, float], radius: float, color: np.ndarray):
    """Alpha-composite an anti-aliased filled disc (1 px soft edge)."""
    size = canvas.shape[0]
    cx, cy = center
    x0 = max(int(math.floor(cx - radius - 1)), 0)
    x1 = min(int(math.ceil(cx + radius + 2)), size)
    y0 = max(int(math.floor(cy - radius - 1)), 0)
    y1 = min(int(math.ceil(cy + radius + 2)), size)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dist = np.sqrt((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2)
    alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0).astype(np.float32)[..., None]
    canvas[y0:y1, x0:x1] = alpha * color + (1.0 - alpha) * canvas[y0:y1, x0:x1]


def render_frame(cfg: SynthConfig, yaw: float, pitch: float) -> np.ndarray:
    geo = frame_geometry(cfg, yaw, pitch)
    gaze = yaw_pitch_to_gaze(yaw, pitch)
    size = cfg.image_size
    canvas = np.empty((size, size, 3), dtype=np.float32)
    canvas[:] = BG_COLOR

    # Head brightness encodes depth: looking away (+z) renders brighter.
    head_level = 0.5 + 0.3 * gaze[2]
    head_color = np.array([head_level, head_level * 0.97, head_level * 0.93], dtype=np.float32)
    _paint_disc(canvas, geo.head_center, geo.head_radius, head_color)
    if geo.face_visible:
        _paint_disc(canvas, geo.face_center, FACE_RADIUS * size, FACE_COLOR)
        for eye_c, pupil_c in zip(geo.eye_centers, geo.pupil_centers):
            _paint_disc(canvas, eye_c, EYE_RADIUS * size, EYE_COLOR)
            _paint_disc(canvas, pupil_c, PUPIL_RADIUS * size, PUPIL_COLOR)
    _paint_disc(canvas, geo.nose_center, NOSE_RADIUS * size, NOSE_COLOR)
    return canvas


def _generate_clip(cfg: SynthConfig, rng: np.random.Generator) -> VideoClip:
    traj = gaze_walk(cfg, rng)
    frames = np.stack([render_frame(cfg, y, p) for y, p in traj])
    gaze = np.stack([yaw_pitch_to_gaze(y, p) for y, p in traj])
    boxes = {c: np.zeros((cfg.T, 4)) for c in CLUES}
    existence = {c: np.zeros(cfg.T, dtype=bool) for c in CLUES}
    for t, (yaw, pitch) in enumerate(traj):
        geo = frame_geometry(cfg, yaw, pitch)
        for c in CLUES:
            boxes[c][t] = geo.boxes[c]
        existence["head"][t] = True
        existence["face"][t] = geo.face_visible
        existence["eye"][t] = geo.face_visible
    ann = ClipAnnotations(gaze=gaze, boxes=boxes, existence=existence)
    return VideoClip(frames=frames, frame_indices=np.arange(cfg.T), annotations=ann)


def generate_clip(cfg: SynthConfig) -> VideoClip:
    """Render one fully annotated clip. Pure function of the config."""
    return _generate_clip(cfg, np.random.default_rng(cfg.seed))


def generate_dataset(cfg: SynthConfig, n_clips: int, out_dir) -> str:
    """Render ``n_clips`` clips to PNG frames plus a manifest; returns the manifest path.

    Per-clip seeds derive deterministically from (cfg.seed, clip index), so
    regeneration with the same config is byte-identical.
    """
    from . import dataio  # local import: dataio depends on datamodel only

    if n_clips < 0:
        raise ConfigError(f"n_clips must be nonnegative, got {n_clips}")
    out_dir = os.fspath(out_dir)
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)

    entries = []
    for i in range(n_clips):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(i,)))
        clip = _generate_clip(cfg, rng)
        rel_paths = []
        for t in range(clip.n_frames):
            rel = os.path.join("frames", f"clip{i:04d}_f{t:03d}.png")
            dataio.save_frame_png(clip.frames[t], os.path.join(out_dir, rel))
            rel_paths.append(rel)
        entries.append(dataio.ClipEntry(
            id=f"clip{i:04d}",
            frames=rel_paths,
            gaze=clip.annotations.gaze,
            boxes=clip.annotations.boxes,
            existence=clip.annotations.existence,
        ))

    manifest = dataio.Manifest(
        version=dataio.MANIFEST_VERSION,
        clips=entries,
        metadata={
            "generator": "cluegaze.synthgen",
            "config": {
                "seed": cfg.seed, "T": cfg.T, "image_size": cfg.image_size,
                "yaw_range": cfg.yaw_range, "pitch_range": cfg.pitch_range,
                "walk_smoothness": cfg.walk_smoothness, "occlusion_yaw": cfg.occlusion_yaw,
            },
        },
    )
    manifest_path = os.path.join(out_dir, "manifest.json")
    dataio.save_manifest(manifest, manifest_path)
    return manifest_path
