"""Overlay rendering: gaze arrows drawn on frames.

Arrows start at the head-box center; length follows the image-plane
projection of the gaze. Predictions draw cyan, ground truth red.
"""
from __future__ import annotations

import math
import os

import numpy as np
from PIL import Image, ImageDraw

from .dataio import Manifest, load_frame_png

PRED_COLOR = (0, 255, 255)
GT_COLOR = (255, 0, 0)
ARROW_SCALE = 0.45  # arrow length at full in-plane gaze, as fraction of image


def draw_gaze_arrow(draw: ImageDraw.ImageDraw, origin: tuple[float, float],
                    gaze, size: int, color: tuple[int, int, int]) -> None:
    gx, gy = float(gaze[0]), float(gaze[1])
    ox, oy = origin
    ex = ox + gx * ARROW_SCALE * size
    ey = oy + gy * ARROW_SCALE * size
    draw.line([(ox, oy), (ex, ey)], fill=color, width=max(1, size // 64))
    # Arrowhead: two short strokes, or a dot when the projection vanishes.
    mag = math.hypot(ex - ox, ey - oy)
    if mag < 2.0:
        r = max(2, size // 40)
        draw.ellipse([ox - r, oy - r, ox + r, oy + r], fill=color)
        return
    ux, uy = (ex - ox) / mag, (ey - oy) / mag
    head = max(4.0, size * 0.05)
    for side in (-1, 1):
        px = ex - head * (ux * math.cos(0.5) - side * uy * math.sin(0.5))
        py = ey - head * (uy * math.cos(0.5) + side * ux * math.sin(0.5))
        draw.line([(ex, ey), (px, py)], fill=color, width=max(1, size // 64))


def render_overlay(frame: np.ndarray, head_box, pred_gaze, gt_gaze=None) -> Image.Image:
    """Return the frame as a PIL image with gaze arrows drawn on it."""
    img = Image.fromarray(np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(img)
    size = img.width
    origin = (float(head_box[0]) * size, float(head_box[1]) * size)
    if gt_gaze is not None:
        draw_gaze_arrow(draw, origin, gt_gaze, size, GT_COLOR)
    draw_gaze_arrow(draw, origin, pred_gaze, size, PRED_COLOR)
    return img


def render_manifest_overlays(manifest: Manifest, predictions: list[dict], out_dir,
                             draw_gt: bool = False) -> list[str]:
    """Write one overlay PNG per predicted frame; returns the output paths."""
    by_key = {(r["clip_id"], int(r["frame_index"])): r["gaze"] for r in predictions}
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for entry in manifest.clips:
        for t, rel in enumerate(entry.frames):
            key = (entry.id, t)
            if key not in by_key:
                continue
            frame = load_frame_png(os.path.join(manifest.root, rel))
            gt = entry.gaze[t] if draw_gt else None
            img = render_overlay(frame, entry.boxes["head"][t], by_key[key], gt)
            out_path = os.path.join(out_dir, f"{entry.id}_f{t:03d}.png")
            img.save(out_path, format="PNG")
            written.append(out_path)
    return written
