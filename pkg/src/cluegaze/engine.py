"""Model assembly, iterative forward pass, training, checkpoints, inference.

The estimator holds learnable per-frame queries and proposal boxes for
each enabled clue and refines them through N stages. One stage runs
spatial interaction, temporal interaction, the RoI-based dynamic update,
then its own heads; box deltas move the proposals for the next stage.
Every stage's outputs are kept for deep supervision; inference reads only
the last stage.

Checkpoints are single files: a magic string, a sorted-key JSON header
(format version, config, iteration, seed, tensor directory, optimizer
directory) and raw little-endian tensor blobs in directory order. Saving,
loading and saving again is byte-identical.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import dataio
from .backbone import assign_pyramid_level, build_backbone
from .datamodel import CLUES, VideoClip
from .errors import ConfigError, DegenerateGazeError, TrainingAbortError
from .heads import StageHeads, StagePrediction
from .losses import BatchTargets, LossReport, LossWeights, total_loss
from .stqi import DynamicUpdate, SpatialInteraction, TemporalInteraction, roi_align

CHECKPOINT_MAGIC = b"CGCK0001"
MIN_BOX_SIZE = 1e-3
DELTA_CLAMP = 4.0  # caps exp() growth of a single box update

_DTYPE_CODES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "toy"            # "toy" | "full"
    T: int = 5                      # frames per training clip / window
    num_stages: int = 4             # refinement iterations N
    channels: int = 64              # query and feature width C
    attn_heads: int = 2
    roi_size: int = 7
    image_size: int = 64
    use_head_clue: bool = True
    use_face_clue: bool = True
    use_eye_clue: bool = True
    use_spatial_interaction: bool = True
    use_temporal_interaction: bool = True
    use_localization_head: bool = True
    attention_ffn: bool = False
    confidence_sigmoid: bool = False
    existence_threshold: float = 0.5
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.variant not in ("toy", "full"):
            raise ConfigError(f"unknown variant '{self.variant}'")
        if self.num_stages < 1:
            raise ConfigError(f"num_stages must be >= 1, got {self.num_stages}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not self.enabled_clues():
            raise ConfigError("at least one clue must be enabled")
        if self.channels % self.attn_heads != 0:
            raise ConfigError(f"attn_heads ({self.attn_heads}) must divide channels ({self.channels})")

    def enabled_clues(self) -> tuple[str, ...]:
        flags = {"head": self.use_head_clue, "face": self.use_face_clue, "eye": self.use_eye_clue}
        return tuple(c for c in CLUES if flags[c])

    @staticmethod
    def toy(**overrides) -> "ModelConfig":
        return replace(ModelConfig(), **overrides)

    @staticmethod
    def full(**overrides) -> "ModelConfig":
        base = ModelConfig(variant="full", T=7, num_stages=4, channels=256,
                           attn_heads=8, image_size=448)
        return replace(base, **overrides)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    iterations: int = 500
    lr_backbone: float = 1e-4
    lr_other: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_iteration: int = 12000
    weight_decay: float = 1e-4
    checkpoint_every: int = 200
    seed: int = 0

    @staticmethod
    def full(**overrides) -> "TrainConfig":
        base = TrainConfig(batch_size=8, iterations=13000)
        return replace(base, **overrides)


@dataclass(frozen=True)
class GazeOutput:
    """Per-frame fused gaze for a clip or stitched video."""

    gaze: np.ndarray          # (n, 3) unit rows
    frame_indices: np.ndarray


INIT_PROPOSALS = {
    "head": (0.5, 0.5, 1.0, 1.0),
    "face": (0.5, 0.5, 0.6, 0.6),
    "eye": (0.5, 0.5, 0.6, 0.2),
}


def clamp_boxes(boxes: torch.Tensor) -> torch.Tensor:
    """Force center-form boxes back into the valid range."""
    cx = boxes[..., 0].clamp(0.0, 1.0)
    cy = boxes[..., 1].clamp(0.0, 1.0)
    w = boxes[..., 2].clamp(MIN_BOX_SIZE, 1.0)
    h = boxes[..., 3].clamp(MIN_BOX_SIZE, 1.0)
    return torch.stack([cx, cy, w, h], dim=-1)


def apply_box_deltas(boxes: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Standard detection-style delta update on center-form boxes."""
    dx, dy, dw, dh = deltas.unbind(-1)
    dw = dw.clamp(-DELTA_CLAMP, DELTA_CLAMP)
    dh = dh.clamp(-DELTA_CLAMP, DELTA_CLAMP)
    cx = boxes[..., 0] + dx * boxes[..., 2]
    cy = boxes[..., 1] + dy * boxes[..., 3]
    w = boxes[..., 2] * torch.exp(dw)
    h = boxes[..., 3] * torch.exp(dh)
    return clamp_boxes(torch.stack([cx, cy, w, h], dim=-1))


class RefinementStage(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        clues = cfg.enabled_clues()
        self.spatial = (SpatialInteraction(cfg.channels, cfg.attn_heads, cfg.attention_ffn)
                        if cfg.use_spatial_interaction else None)
        self.temporal = (TemporalInteraction(cfg.channels, cfg.attn_heads, cfg.attention_ffn)
                         if cfg.use_temporal_interaction else None)
        self.dynamic = DynamicUpdate(cfg.channels, cfg.roi_size)
        self.heads = StageHeads(cfg.channels, clues, cfg.use_localization_head,
                                cfg.confidence_sigmoid)


class GazeEstimator(nn.Module):
    """The end-to-end video gaze model."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.clues = cfg.enabled_clues()
        self.backbone = build_backbone(cfg.variant, cfg.channels, cfg.image_size)
        k, t, c = len(self.clues), cfg.T, cfg.channels
        self.init_queries = nn.Parameter(torch.randn(k, t, c) * 0.02)
        init_boxes = torch.tensor([INIT_PROPOSALS[clue] for clue in self.clues])
        self.init_proposals = nn.Parameter(init_boxes.unsqueeze(1).repeat(1, t, 1))
        self.stages = nn.ModuleList(RefinementStage(cfg) for _ in range(cfg.num_stages))

    def _pool_rois(self, feature_maps: list[torch.Tensor], boxes: torch.Tensor) -> torch.Tensor:
        """RoI-align each (clip, clue, frame) box from its pyramid level.

        feature_maps: per level (B*T, C, h, w); boxes (B, K, T, 4).
        Returns (B, K, T, C, S, S).
        """
        b, k, t, _ = boxes.shape
        s = self.cfg.roi_size
        c = self.cfg.channels
        # Frame index of each box into the (B*T) feature batch.
        frame_idx = torch.arange(b)[:, None] * t + torch.arange(t)[None, :]
        frame_idx = frame_idx[:, None, :].expand(b, k, t).reshape(-1)
        flat_boxes = boxes.reshape(-1, 4)

        if len(feature_maps) == 1:
            pooled = roi_align(feature_maps[0][frame_idx], flat_boxes, s)
            return pooled.reshape(b, k, t, c, s, s)

        levels = torch.tensor([
            assign_pyramid_level(float(bx[2]), float(bx[3]), len(feature_maps))
            for bx in flat_boxes.detach()
        ])
        pooled = flat_boxes.new_zeros(flat_boxes.shape[0], c, s, s)
        for lv, fmap in enumerate(feature_maps):
            sel = (levels == lv).nonzero(as_tuple=True)[0]
            if sel.numel() == 0:
                continue
            pooled[sel] = roi_align(fmap[frame_idx[sel]], flat_boxes[sel], s)
        return pooled.reshape(b, k, t, c, s, s)

    def forward(self, frames: torch.Tensor) -> list[StagePrediction]:
        """Run all refinement stages over a batch of clips.

        ``frames``: (B, T_w, 3, H, W) with T_w <= the configured T; shorter
        windows use the first T_w rows of the learnable queries/proposals.
        """
        if frames.dim() != 5:
            raise ConfigError(f"frames must be (B, T, 3, H, W), got {tuple(frames.shape)}")
        b, tw = frames.shape[0], frames.shape[1]
        if tw > self.cfg.T:
            raise ConfigError(f"window length {tw} exceeds configured T={self.cfg.T}")
        feats = self.backbone(frames.reshape(b * tw, *frames.shape[2:]))

        k, c = len(self.clues), self.cfg.channels
        queries = self.init_queries[:, :tw].unsqueeze(0).expand(b, k, tw, c)
        proposals = clamp_boxes(self.init_proposals[:, :tw]).unsqueeze(0).expand(b, k, tw, 4)

        preds: list[StagePrediction] = []
        for stage in self.stages:
            if stage.spatial is not None:
                queries = stage.spatial(queries)
            if stage.temporal is not None:
                queries = stage.temporal(queries)
            rois = self._pool_rois(feats, proposals)
            queries = stage.dynamic(
                queries.reshape(b * k * tw, c),
                rois.reshape(b * k * tw, c, self.cfg.roi_size, self.cfg.roi_size),
            ).reshape(b, k, tw, c)

            heads = stage.heads
            gaze = heads.gaze_vectors(queries)
            confidence = heads.confidences(queries)
            fused = heads.fuse(gaze, confidence)
            if self.cfg.use_localization_head:
                existence = heads.existence_scores(queries)
                deltas = heads.box_deltas(queries)
                proposals = apply_box_deltas(proposals, deltas)
            else:
                existence, deltas = None, None
            preds.append(StagePrediction(
                clues=self.clues, existence=existence, box_deltas=deltas,
                boxes=proposals, gaze=gaze, confidence=confidence, fused=fused,
            ))
        return preds


def build_model(cfg: ModelConfig, seed: int = 0) -> GazeEstimator:
    """Construct a model with a fully seeded initialization."""
    torch.manual_seed(seed)
    return GazeEstimator(cfg)


def forward_clip(model: GazeEstimator, clip: VideoClip) -> tuple[list[StagePrediction], np.ndarray]:
    """Single-clip forward; returns all stage outputs and the final fused gaze."""
    frames = torch.from_numpy(clip.frames).permute(0, 3, 1, 2).unsqueeze(0)
    frames = frames.to(next(model.parameters()).dtype)
    with torch.no_grad():
        preds = model(frames)
    fused = preds[-1].fused[0].detach().cpu().double().numpy()
    return preds, fused


def batch_targets(clips: list[VideoClip], clues: tuple[str, ...],
                  dtype=torch.float32) -> BatchTargets:
    gaze = torch.tensor(np.stack([c.annotations.gaze for c in clips]), dtype=dtype)
    boxes = torch.tensor(
        np.stack([[c.annotations.boxes[cl] for cl in clues] for c in clips]), dtype=dtype)
    exist = torch.tensor(
        np.stack([[c.annotations.existence[cl] for cl in clues] for c in clips]))
    return BatchTargets(clues=clues, gaze=gaze, boxes=boxes, existence=exist)


def clips_to_tensor(clips: list[VideoClip], dtype=torch.float32) -> torch.Tensor:
    frames = np.stack([c.frames for c in clips])  # (B, T, H, W, 3)
    return torch.tensor(frames, dtype=dtype).permute(0, 1, 4, 2, 3).contiguous()


# ---------------------------------------------------------------------------
# Checkpoint format


def _config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def _config_from_dict(doc: dict) -> ModelConfig:
    doc = dict(doc)
    loss = doc.pop("loss", None)
    cfg = ModelConfig(**doc, loss=LossWeights(**loss) if loss else LossWeights())
    return cfg


def save_checkpoint(path, model: GazeEstimator, iteration: int, seed: int,
                    optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None) -> None:
    tensors: list[tuple[str, torch.Tensor]] = list(model.state_dict().items())
    optim_dir = {}
    if optimizer is not None:
        param_names = [name for name, _ in model.named_parameters()]
        params = [p for _, p in model.named_parameters()]
        for name, p in zip(param_names, params):
            state = optimizer.state.get(p)
            if not state:
                continue
            optim_dir[name] = {"step": float(state["step"])}
            tensors.append((f"optim.{name}.exp_avg", state["exp_avg"]))
            tensors.append((f"optim.{name}.exp_avg_sq", state["exp_avg_sq"]))

    directory = []
    offset = 0
    blobs = []
    for name, t in tensors:
        t = t.detach().cpu().contiguous()
        code = _DTYPE_CODES[t.dtype]
        raw = t.numpy().astype(code, copy=False).tobytes()
        directory.append({"name": name, "shape": list(t.shape), "dtype": code,
                          "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    header = {
        "format_version": 1,
        "config": _config_to_dict(model.cfg),
        "iteration": iteration,
        "seed": seed,
        "tensors": directory,
        "optimizer": optim_dir,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


@dataclass
class Checkpoint:
    config: ModelConfig
    iteration: int
    seed: int
    tensors: dict[str, torch.Tensor]
    optimizer: dict[str, dict]
    extra: dict

    def build_model(self) -> GazeEstimator:
        model = build_model(self.config, seed=self.seed)
        state = {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}
        model.load_state_dict(state)
        return model


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"not a checkpoint file (bad magic): {path}")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header.get("format_version") != 1:
            raise ConfigError(f"unsupported checkpoint format version in {path}")
        payload = f.read()
    tensors = {}
    for ent in header["tensors"]:
        raw = payload[ent["offset"]: ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype=ent["dtype"]).reshape(ent["shape"]).copy()
        tensors[ent["name"]] = torch.from_numpy(arr)
    return Checkpoint(
        config=_config_from_dict(header["config"]),
        iteration=header["iteration"],
        seed=header["seed"],
        tensors=tensors,
        optimizer=header["optimizer"],
        extra=header.get("extra", {}),
    )


def _restore_optimizer(optimizer: torch.optim.Optimizer, model: GazeEstimator,
                       ckpt: Checkpoint) -> None:
    by_name = dict(model.named_parameters())
    for name, meta in ckpt.optimizer.items():
        p = by_name[name]
        optimizer.state[p] = {
            "step": torch.tensor(meta["step"]),
            "exp_avg": ckpt.tensors[f"optim.{name}.exp_avg"].clone(),
            "exp_avg_sq": ckpt.tensors[f"optim.{name}.exp_avg_sq"].clone(),
        }


# ---------------------------------------------------------------------------
# Training


def make_optimizer(model: GazeEstimator, tc: TrainConfig) -> torch.optim.Optimizer:
    backbone_params = list(model.backbone.parameters())
    backbone_ids = {id(p) for p in backbone_params}
    other_params = [p for p in model.parameters() if id(p) not in backbone_ids]
    return torch.optim.AdamW(
        [
            {"params": backbone_params, "lr": tc.lr_backbone, "base_lr": tc.lr_backbone},
            {"params": other_params, "lr": tc.lr_other, "base_lr": tc.lr_other},
        ],
        weight_decay=tc.weight_decay,
    )


def lr_at_iteration(base_lr: float, iteration: int, tc: TrainConfig) -> float:
    """Step decay: multiply by the decay factor from lr_decay_iteration on."""
    if iteration >= tc.lr_decay_iteration:
        return base_lr * tc.lr_decay_factor
    return base_lr


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))
    return rng.permutation(n)


def _batch_windows(windows: list[tuple[int, int]], iteration: int, batch_size: int,
                   seed: int) -> list[tuple[int, int]]:
    """Deterministic, resume-stable batch selection for a given iteration."""
    n = len(windows)
    picks = []
    for j in range(iteration * batch_size, (iteration + 1) * batch_size):
        epoch, pos = divmod(j, n)
        order = _epoch_order(seed, epoch, n)
        picks.append(windows[order[pos]])
    return picks


@dataclass
class TrainResult:
    model: GazeEstimator
    reports: list[tuple[int, LossReport]]
    checkpoint_path: str | None


def train(manifest: dataio.Manifest, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir=None, resume: Checkpoint | None = None,
          log: Callable[[int, LossReport], None] | None = None) -> TrainResult:
    """Optimize the model on a manifest; emits periodic checkpoints and a loss CSV.

    Fully seeded and resume-stable: batch composition and the LR schedule
    are pure functions of the iteration counter, so resuming from a
    checkpoint continues the exact run. Aborts with TrainingAbortError if
    the loss goes non-finite.
    """
    windows = dataio.enumerate_training_windows(manifest, model_cfg.T)
    if not windows:
        raise ConfigError(
            f"manifest has no source clip long enough for T={model_cfg.T}")

    if resume is not None:
        model = resume.build_model()
        start_iteration = resume.iteration
    else:
        model = build_model(model_cfg, seed=train_cfg.seed)
        start_iteration = 0
    model.train()
    optimizer = make_optimizer(model, train_cfg)
    if resume is not None:
        _restore_optimizer(optimizer, model, resume)

    clip_cache: dict[int, VideoClip] = {}

    def window_clip(ci: int, start: int) -> VideoClip:
        if ci not in clip_cache:
            clip_cache[ci] = dataio.load_clip(manifest, manifest.clips[ci])
        return clip_cache[ci].window(start, start + model_cfg.T)

    csv_file = None
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "losses.csv")
        csv_file = open(csv_path, "a" if resume is not None else "w", newline="")
        writer = csv.writer(csv_file)
        if resume is None:
            writer.writerow(["iteration", "anchor", "gaze_fusion",
                             *[f"gaze_{c}" for c in CLUES], "temporal", "total"])

    reports: list[tuple[int, LossReport]] = []
    ckpt_path = None
    try:
        for iteration in range(start_iteration, train_cfg.iterations):
            for group in optimizer.param_groups:
                group["lr"] = lr_at_iteration(group["base_lr"], iteration, train_cfg)

            picks = _batch_windows(windows, iteration, train_cfg.batch_size, train_cfg.seed)
            clips = [window_clip(ci, start) for ci, start in picks]
            frames = clips_to_tensor(clips)
            targets = batch_targets(clips, model.clues)

            preds = model(frames)
            loss, report = total_loss(preds, targets, model_cfg.loss)
            if not math.isfinite(report.total):
                batch_ids = [manifest.clips[ci].id for ci, _ in picks]
                raise TrainingAbortError(
                    f"non-finite loss at iteration {iteration} on batch {batch_ids}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            reports.append((iteration, report))
            if writer is not None:
                writer.writerow([iteration] + [f"{v:.8f}" for v in report.as_row(CLUES)])
            if log is not None:
                log(iteration, report)

            done = iteration + 1
            if out_dir is not None and (done % train_cfg.checkpoint_every == 0
                                        or done == train_cfg.iterations):
                ckpt_path = os.path.join(out_dir, f"ckpt_{done:06d}.ckpt")
                save_checkpoint(ckpt_path, model, done, train_cfg.seed, optimizer)
        if out_dir is not None and train_cfg.iterations == start_iteration:
            # Zero remaining work: still emit a checkpoint of the current state.
            ckpt_path = os.path.join(out_dir, f"ckpt_{start_iteration:06d}.ckpt")
            save_checkpoint(ckpt_path, model, start_iteration, train_cfg.seed, optimizer)
    finally:
        if csv_file is not None:
            csv_file.close()
    model.eval()
    return TrainResult(model=model, reports=reports, checkpoint_path=ckpt_path)


# ---------------------------------------------------------------------------
# Sliding-window inference


def infer_video(frames: np.ndarray, model: GazeEstimator, stride: int = 4,
                window_len: int | None = None) -> GazeOutput:
    """Per-frame gaze for a whole video via overlapping windows.

    Windows of ``window_len`` (default: the model's T) advance by
    ``stride``; per-frame predictions from overlapping windows are
    averaged, smoothed with a centered 3-frame moving average (shrinking
    at the boundaries), and normalized to unit vectors.
    """
    n = frames.shape[0]
    if n == 0:
        return GazeOutput(gaze=np.zeros((0, 3)), frame_indices=np.zeros(0, dtype=int))
    wl = model.cfg.T if window_len is None else min(window_len, model.cfg.T)
    windows = dataio.enumerate_inference_windows(n, wl, stride)

    model.eval()
    per_frame: list[list[np.ndarray]] = [[] for _ in range(n)]
    for start, end in windows:
        clip = torch.from_numpy(frames[start:end]).permute(0, 3, 1, 2).unsqueeze(0)
        clip = clip.to(next(model.parameters()).dtype)
        with torch.no_grad():
            preds = model(clip)
        fused = preds[-1].fused[0].detach().cpu().double().numpy()
        for i, t in enumerate(range(start, end)):
            per_frame[t].append(fused[i])

    raw = np.stack([np.mean(np.stack(v, axis=0), axis=0) for v in per_frame])
    smooth = np.stack([np.mean(raw[max(0, t - 1): t + 2], axis=0) for t in range(n)])
    norms = np.linalg.norm(smooth, axis=1)
    if np.any(norms <= 1e-12):
        raise DegenerateGazeError("smoothed gaze collapsed to zero norm")
    return GazeOutput(gaze=smooth / norms[:, None], frame_indices=np.arange(n))
