"""Tiny FPN neck with top-down query interaction, early mask heads and dense prompts."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeaturePyramid, ShapeError
from .layers import MLP
from .queries import BiDirectionAttention

EARLY_ENCODER = "early_encoder"
EARLY_FPN = "early_fpn"
FINAL = "final"
STAGES = (EARLY_ENCODER, EARLY_FPN, FINAL)


@dataclass
class FusedPyramid:
    levels: List[torch.Tensor]
    prompt_injected: bool = False
    # per-level maps before query interaction, kept only when requested
    diagnostics: dict = field(default_factory=dict)

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return len(self.levels)


@dataclass
class MaskPrediction:
    logits: torch.Tensor  # (B, 1, h, w)
    stage: str
    threshold: float = 0.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown prediction stage {self.stage!r}")

    @property
    def resolution(self):
        return tuple(self.logits.shape[-2:])


class TinyFPN(nn.Module):
    """1x1 laterals to ``dim`` channels, nearest top-down adds, 3x3 smoothing.

    When ``query_dim`` is set, each merged level (coarsest first) also runs a
    bi-direction attention block with the concatenated encoder+FPN queries
    before it is passed down.
    """

    def __init__(self, in_channels, dim: int = 256, query_dim: Optional[int] = None, num_heads: int = 8):
        super().__init__()
        if len(in_channels) != 4:
            raise ValueError("the FPN expects exactly 4 input stages")
        self.dim = dim
        self.lateral = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in in_channels)
        self.smooth = nn.ModuleList(nn.Conv2d(dim, dim, 3, padding=1) for _ in in_channels)
        if query_dim is not None:
            if query_dim != dim:
                raise ValueError(f"FPN query dim {query_dim} must equal FPN width {dim}")
            self.query_blocks = nn.ModuleList(BiDirectionAttention(dim, dim, num_heads) for _ in in_channels)
        else:
            self.query_blocks = None

    def forward(self, pyramid, queries: Optional[torch.Tensor] = None, keep_diagnostics: bool = False):
        stages = pyramid.stages if isinstance(pyramid, FeaturePyramid) else list(pyramid)
        if len(stages) != 4:
            raise ShapeError(f"expected a 4-stage pyramid, got {len(stages)} stages")
        use_queries = queries is not None and self.query_blocks is not None
        lat = [conv(s) for conv, s in zip(self.lateral, stages)]
        merged: List[Optional[torch.Tensor]] = [None] * 4
        diag = {}
        top = None
        for i in range(3, -1, -1):
            x = lat[i]
            if top is not None:
                x = x + F.interpolate(top, size=x.shape[-2:], mode="nearest")
            if keep_diagnostics:
                diag[f"P{i + 1}_before"] = x.detach()
            if use_queries:
                queries, x = self.query_blocks[i](queries, x)
            if keep_diagnostics:
                diag[f"P{i + 1}_after"] = x.detach()
            merged[i] = x
            top = x
        levels = [conv(x) for conv, x in zip(self.smooth, merged)]
        return FusedPyramid(levels, diagnostics=diag), queries


def fpn_forward(fpn: TinyFPN, pyramid, q_encoder=None, q_fpn=None, keep_diagnostics=False):
    """Run the neck; queries (B, n, d) are concatenated encoder-first when given."""
    queries = None
    if q_encoder is not None and q_fpn is not None:
        queries = torch.cat([q_encoder, q_fpn], dim=1)
    elif (q_encoder is None) != (q_fpn is None):
        raise ValueError("pass both query groups or neither")
    return fpn(pyramid, queries, keep_diagnostics)


class EarlyHead(nn.Module):
    """Mask logits from the inner product of an MLP-encoded query and a feature map."""

    def __init__(self, query_dim: int, feat_channels: int, mask_channels: Optional[int] = None,
                 feature_conv: bool = True):
        super().__init__()
        mask_channels = mask_channels or query_dim
        if feature_conv:
            self.feature = nn.Conv2d(feat_channels, mask_channels, 3, padding=1)
        else:
            if feat_channels != mask_channels:
                raise ValueError("without a feature conv the mask channels must match the features")
            self.feature = nn.Identity()
        self.mlp = MLP(query_dim, query_dim, mask_channels, num_layers=2)

    def forward(self, query: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        """``query`` (B, d), ``features`` (B, c, h, w) -> logits (B, 1, h, w)."""
        emb = self.mlp(query)
        feat = self.feature(features)
        return torch.einsum("bc,bchw->bhw", emb, feat).unsqueeze(1)


def early_decode_encoder(head: EarlyHead, q_dense: torch.Tensor, q_encoder: torch.Tensor) -> MaskPrediction:
    return MaskPrediction(head(q_encoder[:, 0], q_dense), EARLY_ENCODER)


def early_decode_fpn(head: EarlyHead, fused: FusedPyramid, q_fpn: torch.Tensor) -> MaskPrediction:
    return MaskPrediction(head(q_fpn[:, 0], fused.levels[0]), EARLY_FPN)


class DensePromptEncoder(nn.Module):
    """conv3x3 -> GELU -> conv3x3 lifting a 1-channel mask to ``dim`` channels."""

    def __init__(self, dim: int, hidden: int = 16):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(1, hidden, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, dim, 3, padding=1),
        )

    def forward(self, mask_logits):
        return self.block(mask_logits)


def inject_dense_prompt(prompt_encoder: DensePromptEncoder, early_fpn_pred: MaskPrediction,
                        fused: FusedPyramid) -> FusedPyramid:
    if fused.prompt_injected:
        raise RuntimeError("dense prompt already injected into this pyramid")
    if early_fpn_pred.resolution != tuple(fused.levels[0].shape[-2:]):
        raise ShapeError(
            f"early prediction at {early_fpn_pred.resolution} does not match the top level "
            f"{tuple(fused.levels[0].shape[-2:])}"
        )
    emb = prompt_encoder(early_fpn_pred.logits)
    levels = []
    for lvl in fused.levels:
        e = emb if lvl.shape[-2:] == emb.shape[-2:] else F.interpolate(emb, size=lvl.shape[-2:], mode="nearest")
        levels.append(lvl + e)
    return replace(fused, levels=levels, prompt_injected=True)
