"""Per-frame convolutional feature extraction.

Two variants sit behind the same interface:

* ``toy`` — four conv blocks with GroupNorm, single-scale output at
  stride 8. Cheap enough for gradient checks and CPU training.
* ``full`` — ResNet-50 body with a feature-pyramid neck producing maps at
  strides {4, 8, 16, 32} with 256 channels. Batch-norm layers are frozen
  so each frame's features depend only on that frame.

Frames are always processed independently; no temporal mixing happens
here. Divisibility of the input size by the coarsest stride is validated
at construction time so shape errors cannot surface mid-training.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import torch
from torch import nn

from .datamodel import VideoClip
from .errors import ConfigError


@dataclass(frozen=True)
class FeatureMap:
    """One scale of backbone output: (T, C, H', W') with its pixel stride."""

    features: torch.Tensor
    stride: int

    @property
    def channels(self) -> int:
        return self.features.shape[1]


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class ToyBackbone(nn.Module):
    """Four conv blocks, overall stride 8, single output scale."""

    strides = (8,)

    def __init__(self, channels: int = 64, image_size: int = 64):
        super().__init__()
        if image_size % 8 != 0:
            raise ConfigError(f"toy backbone needs image_size divisible by 8, got {image_size}")
        self.channels = channels
        self.image_size = image_size
        mid = max(channels // 2, 8)
        self.blocks = nn.Sequential(
            nn.Conv2d(3, mid, 3, stride=2, padding=1), _group_norm(mid), nn.ReLU(),
            nn.Conv2d(mid, channels, 3, stride=2, padding=1), _group_norm(channels), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1), _group_norm(channels), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, stride=1, padding=1), _group_norm(channels), nn.ReLU(),
        )

    def forward(self, frames: torch.Tensor) -> list[torch.Tensor]:
        # frames: (N, 3, H, W)
        return [self.blocks(frames)]


class ResNetFpnBackbone(nn.Module):
    """ResNet-50 body + pyramid neck; outputs 4 scales, 256 channels each."""

    strides = (4, 8, 16, 32)

    def __init__(self, channels: int = 256, image_size: int = 448):
        super().__init__()
        import torchvision
        from torchvision.ops import FeaturePyramidNetwork
        from torchvision.ops.misc import FrozenBatchNorm2d

        if image_size % 32 != 0:
            raise ConfigError(f"full backbone needs image_size divisible by 32, got {image_size}")
        self.channels = channels
        self.image_size = image_size

        rn = torchvision.models.resnet50(weights=None, norm_layer=FrozenBatchNorm2d)
        self.stem = nn.Sequential(rn.conv1, rn.bn1, rn.relu, rn.maxpool)
        self.layer1 = rn.layer1
        self.layer2 = rn.layer2
        self.layer3 = rn.layer3
        self.layer4 = rn.layer4
        self.fpn = FeaturePyramidNetwork([256, 512, 1024, 2048], channels)

    def load_pretrained(self, path) -> None:
        """Load an externally provided ResNet-50 state dict (classifier ignored)."""
        sd = torch.load(path, map_location="cpu", weights_only=True)
        remap = {"conv1.": "stem.0.", "bn1.": "stem.1."}
        own = {}
        for key, value in sd.items():
            if key.startswith("fc.") or key.endswith("num_batches_tracked"):
                continue
            for src, dst in remap.items():
                if key.startswith(src):
                    key = dst + key[len(src):]
                    break
            own[key] = value
        missing, unexpected = self.load_state_dict(own, strict=False)
        unexpected = [k for k in unexpected]
        if unexpected:
            raise ConfigError(f"pretrained weights carry unknown keys: {unexpected[:5]}")
        non_fpn_missing = [k for k in missing if not k.startswith("fpn.")]
        if non_fpn_missing:
            raise ConfigError(f"pretrained weights are incomplete, missing: {non_fpn_missing[:5]}")

    def forward(self, frames: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(frames)
        c2 = self.layer1(x)
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        maps = self.fpn(OrderedDict([("0", c2), ("1", c3), ("2", c4), ("3", c5)]))
        return list(maps.values())


def build_backbone(variant: str, channels: int, image_size: int) -> nn.Module:
    if variant == "toy":
        return ToyBackbone(channels=channels, image_size=image_size)
    if variant == "full":
        return ResNetFpnBackbone(channels=channels, image_size=image_size)
    raise ConfigError(f"unknown backbone variant '{variant}' (expected 'toy' or 'full')")


def extract_features(clip: VideoClip, backbone: nn.Module) -> list[FeatureMap]:
    """Run the backbone over a clip's frames; returns one FeatureMap per scale."""
    h, w = clip.image_size
    if h != backbone.image_size or w != backbone.image_size:
        raise ConfigError(
            f"clip frames are {h}x{w} but the backbone was built for "
            f"{backbone.image_size}x{backbone.image_size}"
        )
    frames = torch.from_numpy(clip.frames).permute(0, 3, 1, 2).contiguous()
    frames = frames.to(next(backbone.parameters()).dtype)
    with torch.no_grad():
        maps = backbone(frames)
    return [FeatureMap(features=m, stride=s) for m, s in zip(maps, backbone.strides)]


def assign_pyramid_level(w: float, h: float, n_levels: int) -> int:
    """Index of the pyramid scale a normalized (w, h) box pools from.

    level = floor(4 + log2(sqrt(w*h))) on normalized dimensions, clamped to
    the available levels; with 4 levels these are strides {4, 8, 16, 32}
    mapped to levels 2..5. Single-scale backbones always return 0.
    """
    if n_levels == 1:
        return 0
    area = max(float(w) * float(h), 1e-12)
    level = math.floor(4 + math.log2(math.sqrt(area)))
    lo, hi = 2, 2 + n_levels - 1
    return min(max(level, lo), hi) - lo
