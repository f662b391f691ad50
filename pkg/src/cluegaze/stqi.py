"""Spatial-temporal query interaction.

The refinement state is one embedding per (clue, frame) plus a proposal
box per (clue, frame). One interaction round applies:

* spatial attention — the clue tokens of each frame attend to each other
  (no cross-frame mixing);
* temporal attention — each clue's frame sequence attends along time
  (no cross-clue mixing);
* dynamic update — each query generates two 1x1 filter banks that are run
  over its RoI-pooled feature, and the result is folded back into the
  query.

Residual branches are norm-first, so zeroing a branch's output projection
makes that branch an exact identity.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, InvalidBoxError


@dataclass
class ClueQueryState:
    """Queries and proposal boxes for the enabled clues of a batch of clips.

    ``queries``: (B, K, T, C); ``proposals``: (B, K, T, 4) center-form
    normalized boxes. K indexes ``clues`` in order.
    """

    clues: tuple[str, ...]
    queries: torch.Tensor
    proposals: torch.Tensor
    stage: int = 0

    def clue_index(self, clue: str) -> int:
        return self.clues.index(clue)

    def with_queries(self, queries: torch.Tensor) -> "ClueQueryState":
        return replace(self, queries=queries)


class MultiheadSelfAttention(nn.Module):
    """Plain multi-head self-attention over the last two dims (tokens, C)."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ConfigError(f"attention heads ({n_heads}) must divide width ({dim})")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.in_proj = nn.Linear(dim, 3 * dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, c = x.shape
        qkv = self.in_proj(x).reshape(*lead, n, 3, self.n_heads, self.head_dim)
        q = qkv[..., 0, :, :].transpose(-3, -2)  # (..., H, n, dh)
        k = qkv[..., 1, :, :].transpose(-3, -2)
        v = qkv[..., 2, :, :].transpose(-3, -2)
        scores = q @ k.transpose(-1, -2) / self.head_dim ** 0.5
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(-3, -2).reshape(*lead, n, c)
        return self.out_proj(out)


class _FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * expansion)
        self.fc2 = nn.Linear(dim * expansion, dim)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(self.norm(x))))


class SpatialInteraction(nn.Module):
    """Attention among the clue tokens of each frame independently."""

    def __init__(self, dim: int, n_heads: int, use_ffn: bool = False):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiheadSelfAttention(dim, n_heads)
        self.ffn = _FeedForward(dim) if use_ffn else None

    def forward(self, queries: torch.Tensor) -> torch.Tensor:
        # (B, K, T, C) -> tokens per frame are the K clues
        b, k, t, c = queries.shape
        x = queries.permute(0, 2, 1, 3).reshape(b * t, k, c)
        x = x + self.attn(self.norm(x))
        if self.ffn is not None:
            x = x + self.ffn(x)
        return x.reshape(b, t, k, c).permute(0, 2, 1, 3)


class TemporalInteraction(nn.Module):
    """Attention along each clue's frame sequence independently."""

    def __init__(self, dim: int, n_heads: int, use_ffn: bool = False):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiheadSelfAttention(dim, n_heads)
        self.ffn = _FeedForward(dim) if use_ffn else None

    def forward(self, queries: torch.Tensor) -> torch.Tensor:
        # (B, K, T, C) -> tokens per clue are the T frames
        b, k, t, c = queries.shape
        x = queries.reshape(b * k, t, c)
        x = x + self.attn(self.norm(x))
        if self.ffn is not None:
            x = x + self.ffn(x)
        return x.reshape(b, k, t, c)


def spatial_interaction(state: ClueQueryState, module: SpatialInteraction) -> ClueQueryState:
    return state.with_queries(module(state.queries))


def temporal_interaction(state: ClueQueryState, module: TemporalInteraction) -> ClueQueryState:
    return state.with_queries(module(state.queries))


def roi_align(features: torch.Tensor, boxes: torch.Tensor, out_size: int,
              sampling_ratio: int = 2) -> torch.Tensor:
    """Average-pooled bilinear sampling of ``features`` inside ``boxes``.

    ``features``: (C, H, W) or (N, C, H, W). ``boxes``: (4,) or (N, 4)
    center-form boxes normalized to [0, 1] image coordinates. Each output
    cell averages ``sampling_ratio``^2 bilinear samples on a regular grid.
    Sample positions treat feature cell (i, j) as centered at
    (j + 0.5, i + 0.5); out-of-range samples clamp to the border.

    Differentiable with respect to both the features and the boxes.
    """
    single = features.dim() == 3
    if single:
        features = features.unsqueeze(0)
        boxes = boxes.reshape(1, 4)
    if out_size < 1:
        raise InvalidBoxError(f"out_size must be >= 1, got {out_size}")
    n, c, h, w = features.shape
    scale = torch.tensor([w, h], dtype=features.dtype, device=features.device)

    cx, cy, bw, bh = boxes.unbind(-1)
    x1 = torch.clamp(cx - bw / 2, 0.0, 1.0) * scale[0]
    x2 = torch.clamp(cx + bw / 2, 0.0, 1.0) * scale[0]
    y1 = torch.clamp(cy - bh / 2, 0.0, 1.0) * scale[1]
    y2 = torch.clamp(cy + bh / 2, 0.0, 1.0) * scale[1]
    if torch.any(x2 - x1 <= 0).item() or torch.any(y2 - y1 <= 0).item():
        raise InvalidBoxError("box degenerates to zero width/height after clamping")

    s, r = out_size, sampling_ratio
    # Fractional positions of the r samples within each of the s cells.
    steps = (torch.arange(s * r, dtype=features.dtype, device=features.device) + 0.5) / (s * r)
    xs = x1[:, None] + steps[None, :] * (x2 - x1)[:, None]  # (N, s*r)
    ys = y1[:, None] + steps[None, :] * (y2 - y1)[:, None]

    def bilinear_1d(coord: torch.Tensor, limit: int):
        f = coord - 0.5
        i0 = torch.floor(f)
        frac = f - i0
        i0 = i0.long()
        i1 = i0 + 1
        return i0.clamp(0, limit - 1), i1.clamp(0, limit - 1), frac

    ix0, ix1, fx = bilinear_1d(xs, w)
    iy0, iy1, fy = bilinear_1d(ys, h)

    flat = features.reshape(n, c, h * w)

    def gather(iy, ix):
        # iy: (N, s*r) over rows, ix: (N, s*r) over cols -> (N, C, s*r, s*r)
        idx = iy[:, :, None] * w + ix[:, None, :]                 # (N, s*r, s*r)
        idx = idx.reshape(n, 1, -1).expand(n, c, idx.shape[1] * idx.shape[2])
        return flat.gather(2, idx).reshape(n, c, s * r, s * r)

    v00 = gather(iy0, ix0)
    v01 = gather(iy0, ix1)
    v10 = gather(iy1, ix0)
    v11 = gather(iy1, ix1)
    wx = fx[:, None, None, :]
    wy = fy[:, None, :, None]
    sampled = (v00 * (1 - wy) * (1 - wx) + v01 * (1 - wy) * wx
               + v10 * wy * (1 - wx) + v11 * wy * wx)        # (N, C, s*r, s*r)
    pooled = sampled.reshape(n, c, s, r, s, r).mean(dim=(3, 5))
    return pooled.squeeze(0) if single else pooled


class DynamicUpdate(nn.Module):
    """Query-conditioned 1x1 filters over the RoI feature, folded into the query.

    The (normalized) query generates two filter banks of shapes (C, C/4)
    and (C/4, C). The RoI feature, seen as S*S tokens of width C, passes
    through both with LayerNorm + ReLU in between, is flattened, projected
    back to C, and added residually via a norm-first branch.
    """

    def __init__(self, dim: int, roi_size: int, hidden_divisor: int = 4):
        super().__init__()
        if dim % hidden_divisor != 0:
            raise ConfigError(f"hidden divisor ({hidden_divisor}) must divide width ({dim})")
        self.dim = dim
        self.hidden = dim // hidden_divisor
        self.roi_size = roi_size
        self.norm_in = nn.LayerNorm(dim)
        self.generator = nn.Linear(dim, 2 * dim * self.hidden)
        self.norm_mid = nn.LayerNorm(self.hidden)
        self.norm_feat = nn.LayerNorm(dim)
        self.out_proj = nn.Linear(roi_size * roi_size * dim, dim)
        self.norm_update = nn.LayerNorm(dim)

    def forward(self, queries: torch.Tensor, roi_feats: torch.Tensor) -> torch.Tensor:
        # queries: (M, C); roi_feats: (M, C, S, S)
        m, c = queries.shape
        params = self.generator(self.norm_in(queries))
        w1 = params[:, : c * self.hidden].reshape(m, c, self.hidden)
        w2 = params[:, c * self.hidden:].reshape(m, self.hidden, c)
        x = roi_feats.flatten(2).transpose(1, 2)          # (M, S*S, C)
        x = F.relu(self.norm_mid(x @ w1))
        x = F.relu(self.norm_feat(x @ w2))
        update = self.out_proj(x.flatten(1))
        return queries + self.norm_update(update)


def dynamic_update(state: ClueQueryState, roi_feats: torch.Tensor,
                   module: DynamicUpdate) -> ClueQueryState:
    """Apply the dynamic update to every (clue, frame) query of the state.

    ``roi_feats``: (B, K, T, C, S, S) pooled at the state's proposals.
    """
    b, k, t, c = state.queries.shape
    q = module(state.queries.reshape(b * k * t, c),
               roi_feats.reshape(b * k * t, c, module.roi_size, module.roi_size))
    return state.with_queries(q.reshape(b, k, t, c))
