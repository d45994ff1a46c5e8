"""SAM-style two-way transformer decoder with a convolutional (non-upsampling) mask head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ShapeError
from .fpn import FINAL, FusedPyramid, MaskPrediction
from .layers import MLP, Attention, LayerNorm2d, flatten_map, sine_pos_embed, unflatten_map


@dataclass
class DecoderConfig:
    depth: int = 2
    d: int = 256
    mlp_ratio: float = 8.0
    head_count: int = 8
    attention_downsample_rate: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"decoder depth must be >= 1, got {self.depth}")
        if self.d < 1 or self.head_count < 1:
            raise ValueError("d and head_count must be positive")


class TwoWayBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_dim, downsample_rate=2, skip_first_pe=False):
        super().__init__()
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = Attention(dim, num_heads, downsample_rate)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim, dim, act=nn.ReLU)
        self.norm3 = nn.LayerNorm(dim)
        self.norm4 = nn.LayerNorm(dim)
        self.cross_image_to_token = Attention(dim, num_heads, downsample_rate)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))

        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_image_to_token(k, q, queries))
        return queries, keys


class TwoWayTransformer(nn.Module):
    def __init__(self, depth, dim, num_heads, mlp_dim, downsample_rate=2):
        super().__init__()
        self.layers = nn.ModuleList(
            TwoWayBlock(dim, num_heads, mlp_dim, downsample_rate, skip_first_pe=(i == 0))
            for i in range(depth)
        )
        self.final_attn_token_to_image = Attention(dim, num_heads, downsample_rate)
        self.norm_final = nn.LayerNorm(dim)

    def forward(self, image, image_pe, tokens):
        """``image`` (B, C, h, w), ``image_pe`` (h*w, C), ``tokens`` (B, T, C)."""
        keys = flatten_map(image)
        key_pe = image_pe.unsqueeze(0)
        queries = tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, key_pe)
        q = queries + tokens
        k = keys + key_pe
        queries = self.norm_final(queries + self.final_attn_token_to_image(q, k, keys))
        return queries, keys


class MaskDecoder(nn.Module):
    """Two-way transformer over all sparse tokens; only the last token makes the mask.

    The deconvolution upsampler of SAM is swapped for two 3x3 convolutions at
    the embedding resolution; logits are bilinearly resized to the input size.
    """

    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        d = config.d
        self.transformer = TwoWayTransformer(
            config.depth, d, config.head_count, int(d * config.mlp_ratio), config.attention_downsample_rate
        )
        hidden = max(1, d // 4)
        mask_ch = max(1, d // 8)
        self.mask_convs = nn.Sequential(
            nn.Conv2d(d, hidden, 3, padding=1),
            LayerNorm2d(hidden),
            nn.GELU(),
            nn.Conv2d(hidden, mask_ch, 3, padding=1),
            nn.GELU(),
        )
        self.hypernet = MLP(d, d, mask_ch, num_layers=3, act=nn.ReLU)

    def forward(self, image: torch.Tensor, tokens: torch.Tensor, output_size=None) -> MaskPrediction:
        if image.shape[1] != self.config.d or tokens.shape[-1] != self.config.d:
            raise ShapeError(
                f"decoder width {self.config.d} does not match image ({image.shape[1]}) "
                f"or tokens ({tokens.shape[-1]})"
            )
        h, w = image.shape[-2:]
        pe = sine_pos_embed(h, w, self.config.d, like=image)
        queries, keys = self.transformer(image, pe, tokens)
        # every token except the last (the decoder query) is dropped here
        mask_token = queries[:, -1]
        feats = self.mask_convs(unflatten_map(keys, h, w))
        logits = torch.einsum("bc,bchw->bhw", self.hypernet(mask_token), feats).unsqueeze(1)
        if output_size is not None and tuple(output_size) != (h, w):
            logits = F.interpolate(logits, size=tuple(output_size), mode="bilinear", align_corners=False)
        return MaskPrediction(logits, FINAL)


def decode(decoder: MaskDecoder, fused: FusedPyramid, q_encoder, q_fpn, q_decoder, output_size=None) -> MaskPrediction:
    """All queries are (B, n, d); the decoder query goes last."""
    tokens = torch.cat([q_encoder, q_fpn, q_decoder], dim=1)
    return decoder(fused.levels[0], tokens, output_size)


def binarize(pred, threshold: float | None = None) -> torch.Tensor:
    """Boolean mask ``logits > threshold``; defaults to the prediction's stored threshold."""
    logits = pred.logits if isinstance(pred, MaskPrediction) else pred
    if threshold is None:
        threshold = pred.threshold if isinstance(pred, MaskPrediction) else 0.0
    return logits > threshold
