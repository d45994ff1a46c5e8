"""Hierarchical 4-stage convolutional encoder.

Each stage is a stack of depthwise-separable residual blocks. The stem stride
is adjustable (1, 2 or 4) so that tiny targets survive the first embedding;
every later stage halves the resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import torch
import torch.nn as nn

VALID_STEMS = (1, 2, 4)


class ShapeError(ValueError):
    """Raised when an input tensor violates a spatial-size contract."""


@dataclass
class EncoderConfig:
    stem_downsample: int = 4
    stage_channels: Sequence[int] = (64, 128, 256, 512)
    stage_depths: Sequence[int] = (2, 2, 6, 2)
    input_channels: int = 3
    mlp_ratio: float = 2.0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        if self.stem_downsample not in VALID_STEMS:
            raise ValueError(
                f"stem_downsample must be one of {VALID_STEMS}, got {self.stem_downsample}"
            )
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ValueError("stage_channels and stage_depths need exactly 4 entries")
        if min(self.stage_channels) < 1 or min(self.stage_depths) < 1:
            raise ValueError("stage channels and depths must be positive")
        if self.input_channels not in (1, 3):
            raise ValueError(f"input_channels must be 1 or 3, got {self.input_channels}")

    @property
    def size_multiple(self) -> int:
        return self.stem_downsample * 8


@dataclass
class FeaturePyramid:
    """Stage outputs S1..S4, highest resolution first."""

    stages: List[torch.Tensor]
    stem_downsample: int
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, i):
        return self.stages[i]

    @property
    def sizes(self):
        return [tuple(s.shape[-2:]) for s in self.stages]


def norm2d(channels: int) -> nn.GroupNorm:
    # single group: normalizes each sample independently, batch size 1 is fine
    return nn.GroupNorm(1, channels)


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, kernel=3, stride=1, groups=1, act=True):
        layers = [
            nn.Conv2d(cin, cout, kernel, stride, kernel // 2, groups=groups, bias=False),
            norm2d(cout),
        ]
        if act:
            layers.append(nn.GELU())
        super().__init__(*layers)


class SeparableBlock(nn.Module):
    """Depthwise 3x3 token mixer followed by a pointwise channel MLP, both residual."""

    def __init__(self, channels: int, mlp_ratio: float = 2.0):
        super().__init__()
        hidden = max(1, int(round(channels * mlp_ratio)))
        self.token_mixer = ConvNormAct(channels, channels, 3, groups=channels, act=False)
        self.channel_mixer = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.GELU(),
            nn.Conv2d(hidden, channels, 1),
            norm2d(channels),
        )

    def forward(self, x):
        x = x + self.token_mixer(x)
        return x + self.channel_mixer(x)


def _make_stem(cin: int, cout: int, stride: int) -> nn.Sequential:
    # two 3x3 convs; strides split so the product equals the requested stem stride
    s1, s2 = {1: (1, 1), 2: (2, 1), 4: (2, 2)}[stride]
    mid = max(1, cout // 2)
    return nn.Sequential(ConvNormAct(cin, mid, 3, s1), ConvNormAct(mid, cout, 3, s2, act=False))


class Stage(nn.Module):
    def __init__(self, cin: int, cout: int, depth: int, downsample: bool, mlp_ratio: float):
        super().__init__()
        self.downsample = ConvNormAct(cin, cout, 3, 2, act=False) if downsample else None
        for j in range(depth):
            self.add_module(f"block{j}", SeparableBlock(cout, mlp_ratio))
        self.depth = depth

    def forward(self, x):
        if self.downsample is not None:
            x = self.downsample(x)
        for j in range(self.depth):
            x = getattr(self, f"block{j}")(x)
        return x


class Encoder(nn.Module):
    """Plug-in point for image encoders.

    Subclasses (or any module with the same attributes) must expose ``config``
    and ``run_stage(i, x)``; the query engine drives the stages one at a time so
    it can interleave its own updates.
    """

    config: EncoderConfig

    def run_stage(self, i: int, x: torch.Tensor) -> torch.Tensor:  # pragma: no cover
        raise NotImplementedError

    def check_input(self, images: torch.Tensor) -> None:
        if images.dim() != 4:
            raise ShapeError(f"expected (B, C, H, W) images, got shape {tuple(images.shape)}")
        if images.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"expected {self.config.input_channels} input channels, got {images.shape[1]}"
            )
        m = self.config.size_multiple
        h, w = images.shape[-2:]
        if h % m or w % m:
            raise ShapeError(
                f"input size {h}x{w} is not divisible by {m} (stem {self.config.stem_downsample} x 8)"
            )

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        self.check_input(images)
        stages = []
        x = images
        for i in range(4):
            x = self.run_stage(i, x)
            stages.append(x)
        return FeaturePyramid(stages, self.config.stem_downsample)


class ConvEncoder(Encoder):
    """Default encoder. Parameters are named ``stage{i}.block{j}.*`` (i from 1)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        ch = config.stage_channels
        self.stem = _make_stem(config.input_channels, ch[0], config.stem_downsample)
        for i in range(4):
            cin = ch[0] if i == 0 else ch[i - 1]
            stage = Stage(cin, ch[i], config.stage_depths[i], downsample=i > 0, mlp_ratio=config.mlp_ratio)
            self.add_module(f"stage{i + 1}", stage)

    def run_stage(self, i, x):
        if i == 0:
            x = self.stem(x)
        return getattr(self, f"stage{i + 1}")(x)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_encoder(config: EncoderConfig, seed: int | None = 0) -> ConvEncoder:
    """Construct the encoder with deterministic initialization for ``seed``."""
    if config.stem_downsample not in VALID_STEMS:
        raise ValueError(f"stem_downsample must be one of {VALID_STEMS}")
    if seed is None:
        enc = ConvEncoder(config)
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            enc = ConvEncoder(config)
    enc.num_parameters = count_parameters(enc)
    return enc


def encode(encoder: Encoder, images: torch.Tensor) -> FeaturePyramid:
    return encoder(images)


def replicate_channels(images: torch.Tensor, channels: int) -> torch.Tensor:
    """Grayscale to ``channels`` by replication; a no-op when already matching."""
    if images.shape[1] == channels:
        return images
    if images.shape[1] != 1:
        raise ShapeError(f"cannot map {images.shape[1]} channels to {channels}")
    return images.expand(-1, channels, -1, -1).contiguous()


def expected_stage_sizes(h: int, w: int, stem: int):
    return [(h // (stem * 2**i), w // (stem * 2**i)) for i in range(4)]


__all__ = [
    "EncoderConfig",
    "FeaturePyramid",
    "Encoder",
    "ConvEncoder",
    "ShapeError",
    "build_encoder",
    "encode",
    "count_parameters",
    "replicate_channels",
    "expected_stage_sizes",
]
