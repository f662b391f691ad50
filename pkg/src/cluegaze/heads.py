"""Task-specific heads: clue existence/localization and gaze fusion.

Every head is a 2-layer MLP (hidden width C, ReLU) with separate
parameters per clue; fusion is a single shared linear layer over the
confidence-weighted concatenation of the per-clue gaze vectors. Disabled
clues shrink the fusion input accordingly.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import InternalConsistencyError

EXISTENCE_EPS = 1e-7


@dataclass
class StagePrediction:
    """Outputs of one refinement stage for a batch of clips.

    ``boxes`` holds the absolute proposals after this stage's update (the
    deltas already applied and clamped); ``box_deltas`` the raw head
    output. Tensors are (B, K, T, ...) with K the enabled clues in order.
    """

    clues: tuple[str, ...]
    existence: torch.Tensor | None   # (B, K, T) in (0, 1); None without localization head
    box_deltas: torch.Tensor | None  # (B, K, T, 4)
    boxes: torch.Tensor              # (B, K, T, 4) absolute center-form
    gaze: torch.Tensor               # (B, K, T, 3)
    confidence: torch.Tensor         # (B, K, T)
    fused: torch.Tensor              # (B, T, 3)

    def clue_index(self, clue: str) -> int:
        return self.clues.index(clue)


class ClueMlp(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, out_dim)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class StageHeads(nn.Module):
    """All heads of one refinement stage (each stage owns its parameters)."""

    def __init__(self, dim: int, clues: tuple[str, ...], use_localization: bool = True,
                 confidence_sigmoid: bool = False):
        super().__init__()
        self.clues = tuple(clues)
        self.use_localization = use_localization
        self.confidence_sigmoid = confidence_sigmoid
        if use_localization:
            self.existence_mlps = nn.ModuleDict({c: ClueMlp(dim, 1) for c in self.clues})
            self.box_mlps = nn.ModuleDict({c: ClueMlp(dim, 4) for c in self.clues})
        self.gaze_mlps = nn.ModuleDict({c: ClueMlp(dim, 3) for c in self.clues})
        self.confidence_mlps = nn.ModuleDict({c: ClueMlp(dim, 1) for c in self.clues})
        self.fusion = nn.Linear(3 * len(self.clues), 3)

    def _per_clue(self, mlps: nn.ModuleDict, queries: torch.Tensor) -> torch.Tensor:
        # queries: (B, K, T, C) -> (B, K, T, out)
        outs = [mlps[c](queries[:, i]) for i, c in enumerate(self.clues)]
        return torch.stack(outs, dim=1)

    def existence_scores(self, queries: torch.Tensor) -> torch.Tensor:
        """Sigmoid region-existence scores, clamped strictly inside (0, 1)."""
        logits = self._per_clue(self.existence_mlps, queries).squeeze(-1)
        return torch.sigmoid(logits).clamp(EXISTENCE_EPS, 1.0 - EXISTENCE_EPS)

    def box_deltas(self, queries: torch.Tensor) -> torch.Tensor:
        return self._per_clue(self.box_mlps, queries)

    def gaze_vectors(self, queries: torch.Tensor) -> torch.Tensor:
        return self._per_clue(self.gaze_mlps, queries)

    def confidences(self, queries: torch.Tensor) -> torch.Tensor:
        raw = self._per_clue(self.confidence_mlps, queries).squeeze(-1)
        return torch.sigmoid(raw) if self.confidence_sigmoid else raw

    def fuse(self, gaze: torch.Tensor, confidence: torch.Tensor) -> torch.Tensor:
        """Confidence-weighted concatenation of per-clue gazes -> final gaze.

        gaze (B, K, T, 3) and confidence (B, K, T) -> (B, T, 3).
        """
        if gaze.shape[:3] != confidence.shape:
            raise InternalConsistencyError(
                f"gaze {tuple(gaze.shape)} and confidence {tuple(confidence.shape)} disagree"
            )
        weighted = gaze * confidence.unsqueeze(-1)        # (B, K, T, 3)
        b, k, t, _ = weighted.shape
        stacked = weighted.permute(0, 2, 1, 3).reshape(b, t, 3 * k)
        return self.fusion(stacked)
