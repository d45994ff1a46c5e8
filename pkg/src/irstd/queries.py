"""Sparse and dense learnable queries that thread information through the encoder.

Sparse queries are a handful of tokens that meet each feature map through a
four-step bi-direction attention block. The dense query map starts as a copy
of the first encoder stage and is refined against the deeper stages with
multi-scale deformable attention, which stays linear in the number of pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.flop_counter import FlopCounterMode

from .backbone import Encoder, FeaturePyramid, ShapeError
from .layers import MLP, Attention, flatten_map, sine_pos_embed, unflatten_map

GROUPS = ("encoder", "fpn", "decoder")
DEFAULT_COUNTS = {"encoder": 4, "fpn": 4, "decoder": 1}

# hidden width 4.5*d makes the block's linear-layer cost exactly 17*n*d^2 MACs,
# the query-side term of the published bi-attention operation count
BI_ATTN_MLP_RATIO = 4.5


class SparseQuerySet(nn.Module):
    """A learnable (n, d) token set belonging to one of the three groups."""

    def __init__(self, group: str, n: int, d: int):
        super().__init__()
        if group not in GROUPS:
            raise ValueError(f"unknown query group {group!r}; expected one of {GROUPS}")
        if n < 1 or d < 1:
            raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
        self.group = group
        self.tokens = nn.Parameter(torch.empty(n, d))
        nn.init.normal_(self.tokens)

    @property
    def n(self):
        return self.tokens.shape[0]

    @property
    def d(self):
        return self.tokens.shape[1]

    def expand(self, batch: int) -> torch.Tensor:
        return self.tokens.unsqueeze(0).expand(batch, -1, -1)


def init_sparse(group: str, n: int | None = None, d: int = 256, seed: int = 0) -> SparseQuerySet:
    if group not in GROUPS:
        raise ValueError(f"unknown query group {group!r}; expected one of {GROUPS}")
    n = DEFAULT_COUNTS[group] if n is None else n
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SparseQuerySet(group, n, d)


def init_dense(stage1_features: torch.Tensor) -> torch.Tensor:
    """Dense query map: an independent copy of the first-stage output."""
    return stage1_features.clone()


class BiDirectionAttention(nn.Module):
    """Queries <-> feature-map interaction.

    Steps: cross-attention queries->features, point-wise MLP on the queries,
    self-attention among the queries, then cross-attention features->queries.
    Every step is pre-normalized and residual. Features with ``feat_channels``
    different from ``dim`` go through a learned projection in and out.
    """

    def __init__(self, dim: int, feat_channels: int | None = None, num_heads: int = 8,
                 mlp_ratio: float = BI_ATTN_MLP_RATIO):
        super().__init__()
        feat_channels = dim if feat_channels is None else feat_channels
        self.dim = dim
        self.feat_channels = feat_channels
        if feat_channels != dim:
            self.feat_in = nn.Linear(feat_channels, dim)
            self.feat_out = nn.Linear(dim, feat_channels)
        else:
            self.feat_in = self.feat_out = None
        self.norm_q1 = nn.LayerNorm(dim)
        self.norm_f1 = nn.LayerNorm(dim)
        self.cross_q2f = Attention(dim, num_heads)
        self.norm_q2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(round(dim * mlp_ratio)), dim)
        self.norm_q3 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, num_heads)
        self.norm_f2 = nn.LayerNorm(dim)
        self.norm_q4 = nn.LayerNorm(dim)
        self.cross_f2q = Attention(dim, num_heads)

    def forward(self, queries: torch.Tensor, features: torch.Tensor):
        """``queries`` (B, n, d), ``features`` (B, c, h, w); returns both updated."""
        b, c, h, w = features.shape
        if c != self.feat_channels:
            raise ShapeError(
                f"feature channels {c} do not match this block ({self.feat_channels}); "
                "no projection registered"
            )
        if queries.shape[-1] != self.dim:
            raise ShapeError(f"query dim {queries.shape[-1]} != block dim {self.dim}")
        f = flatten_map(features)
        fd = self.feat_in(f) if self.feat_in is not None else f
        pos = sine_pos_embed(h, w, self.dim, like=fd)

        fn = self.norm_f1(fd)
        queries = queries + self.cross_q2f(self.norm_q1(queries), fn + pos, fn)
        queries = queries + self.mlp(self.norm_q2(queries))
        qn = self.norm_q3(queries)
        queries = queries + self.self_attn(qn, qn, qn)

        kq = self.norm_q4(queries)
        delta = self.cross_f2q(self.norm_f2(fd) + pos, kq, kq)
        if self.feat_out is not None:
            delta = self.feat_out(delta)
        f = f + delta
        return queries, unflatten_map(f, h, w)


def bi_direction_attention(block: BiDirectionAttention, queries, features):
    return block(queries, features)


class DeformableFusion(nn.Module):
    """Multi-scale deformable attention across a list of maps.

    Every location of every level is a query; it samples ``num_points``
    bilinear points on each level around its own reference point, with
    predicted offsets and softmax weights, and the result is added back to the
    level it came from.
    """

    def __init__(self, level_channels: Sequence[int], dim: int, num_heads: int = 8, num_points: int = 4):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.level_channels = tuple(level_channels)
        self.num_levels = len(level_channels)
        self.dim = dim
        self.num_heads = num_heads
        self.num_points = num_points
        self.input_proj = nn.ModuleList(nn.Linear(c, dim) for c in level_channels)
        self.output_back = nn.ModuleList(nn.Linear(dim, c) for c in level_channels)
        self.norm = nn.LayerNorm(dim)
        self.level_embed = nn.Parameter(torch.zeros(self.num_levels, dim))
        self.sampling_offsets = nn.Linear(dim, num_heads * self.num_levels * num_points * 2)
        self.attention_weights = nn.Linear(dim, num_heads * self.num_levels * num_points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.normal_(self.level_embed, std=0.02)
        nn.init.zeros_(self.sampling_offsets.weight)
        # initial offsets fan out radially, point k at distance k+1 pixels
        thetas = torch.arange(self.num_heads, dtype=torch.float32) * (2.0 * torch.pi / self.num_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(self.num_heads, 1, 1, 2).repeat(1, self.num_levels, self.num_points, 1)
        for k in range(self.num_points):
            grid[:, :, k, :] *= k + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.view(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    @staticmethod
    def reference_points(shapes, like):
        refs = []
        for h, w in shapes:
            ys = (torch.arange(h, dtype=like.dtype, device=like.device) + 0.5) / h
            xs = (torch.arange(w, dtype=like.dtype, device=like.device) + 0.5) / w
            ry, rx = torch.meshgrid(ys, xs, indexing="ij")
            refs.append(torch.stack([rx.reshape(-1), ry.reshape(-1)], -1))
        return torch.cat(refs, 0)  # (sum hw, 2) in (x, y)

    def sample(self, query: torch.Tensor, values: List[torch.Tensor], shapes) -> torch.Tensor:
        """Core aggregation before ``output_proj``.

        ``query`` (B, Nq, dim) with reference points from ``shapes``;
        ``values`` per level (B, h_l*w_l, dim). Returns (B, Nq, dim).
        """
        b, nq, _ = query.shape
        H, L, K = self.num_heads, self.num_levels, self.num_points
        dh = self.dim // H
        ref = self.reference_points(shapes, query)  # (Nq, 2)
        offsets = self.sampling_offsets(query).view(b, nq, H, L, K, 2)
        weights = self.attention_weights(query).view(b, nq, H, L * K)
        weights = torch.softmax(weights, -1).view(b, nq, H, L, K)
        normalizer = torch.tensor([[w, h] for h, w in shapes], dtype=query.dtype, device=query.device)
        loc = ref[None, :, None, None, None, :] + offsets / normalizer[None, None, None, :, None, :]
        grids = 2.0 * loc - 1.0

        out = query.new_zeros(b, H, dh, nq)
        for lvl, (h, w) in enumerate(shapes):
            v = self.value_proj(values[lvl])  # (B, hw, dim)
            v = v.transpose(1, 2).reshape(b * H, dh, h, w)
            g = grids[:, :, :, lvl].permute(0, 2, 1, 3, 4).reshape(b * H, nq, K, 2)
            s = F.grid_sample(v, g, mode="bilinear", padding_mode="zeros", align_corners=False)
            # s: (B*H, dh, Nq, K)
            wl = weights[:, :, :, lvl].permute(0, 2, 1, 3).reshape(b * H, 1, nq, K)
            out = out + (s * wl).sum(-1).view(b, H, dh, nq)
        return out.reshape(b, H * dh, nq).transpose(1, 2)

    def forward(self, maps: List[torch.Tensor]) -> List[torch.Tensor]:
        if not maps:
            raise ValueError("deformable fusion needs at least one feature map")
        if len(maps) != self.num_levels:
            raise ShapeError(f"expected {self.num_levels} levels, got {len(maps)}")
        shapes = []
        tokens = []
        for lvl, m in enumerate(maps):
            if m.shape[1] != self.level_channels[lvl]:
                raise ShapeError(f"level {lvl} has {m.shape[1]} channels, expected {self.level_channels[lvl]}")
            h, w = m.shape[-2:]
            shapes.append((h, w))
            tokens.append(self.norm(self.input_proj[lvl](flatten_map(m))))
        query = torch.cat(
            [t + self.level_embed[lvl] + sine_pos_embed(h, w, self.dim, like=t)
             for lvl, (t, (h, w)) in enumerate(zip(tokens, shapes))],
            dim=1,
        )
        fused = self.output_proj(self.sample(query, tokens, shapes))
        outs = []
        start = 0
        for lvl, (m, (h, w)) in enumerate(zip(maps, shapes)):
            part = fused[:, start:start + h * w]
            start += h * w
            outs.append(m + unflatten_map(self.output_back[lvl](part), h, w))
        return outs


def deformable_fuse(block: DeformableFusion, dense: torch.Tensor, stages: List[torch.Tensor]):
    if not stages:
        raise ValueError("deformable fusion needs at least one pyramid stage")
    outs = block([dense] + list(stages))
    return outs[0], outs[1:]


class EncoderQueryEngine(nn.Module):
    """Drives an encoder stage by stage, interleaving sparse and dense query updates."""

    def __init__(self, stage_channels: Sequence[int], dim: int, num_heads: int = 8,
                 deform_heads: int = 8, deform_points: int = 4):
        super().__init__()
        self.dim = dim
        self.sparse = nn.ModuleList(BiDirectionAttention(dim, c, num_heads) for c in stage_channels)
        c1 = stage_channels[0]
        self.dense = nn.ModuleList(
            DeformableFusion([c1, c], dim, deform_heads, deform_points) for c in stage_channels[1:]
        )

    def forward(self, encoder: Encoder, images: torch.Tensor, q_encoder: torch.Tensor,
                use_queries: bool = True):
        encoder.check_input(images)
        stages = []
        x = images
        q_dense = None
        for i in range(4):
            x = encoder.run_stage(i, x)
            if i == 0:
                q_dense = init_dense(x)
            if use_queries:
                q_encoder, x = self.sparse[i](q_encoder, x)
                if i > 0:
                    q_dense, (x,) = deformable_fuse(self.dense[i - 1], q_dense, [x])
            stages.append(x)
        return FeaturePyramid(stages, encoder.config.stem_downsample), q_encoder, q_dense


def run_encoder_queries(engine: EncoderQueryEngine, encoder: Encoder, images, q_encoder: SparseQuerySet | torch.Tensor,
                        use_queries: bool = True):
    tokens = q_encoder.expand(images.shape[0]) if isinstance(q_encoder, SparseQuerySet) else q_encoder
    return engine(encoder, images, tokens, use_queries)


# --------------------------------------------------------------------------
# operation counting


@dataclass(frozen=True)
class BiAttnCost:
    b: int
    n: int
    d: int
    h: int
    w: int

    def __post_init__(self):
        for k in ("b", "n", "d", "h", "w"):
            v = getattr(self, k)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{k} must be a positive integer, got {v!r}")

    @property
    def terms(self):
        b, n, d, h, w = self.b, self.n, self.d, self.h, self.w
        return {
            "query_linear": 34 * b * n * d * d,
            "feature_linear": 8 * b * h * w * d * d,
            "cross_dot": 8 * b * n * h * w * d,
            "self_dot": 4 * b * n * n * d,
        }

    @property
    def total_ops(self) -> int:
        return sum(self.terms.values())


def bi_attn_cost(b: int, n: int, d: int, h: int, w: int) -> BiAttnCost:
    return BiAttnCost(b, n, d, h, w)


def count_flops(fn, *args, **kwargs):
    """Run ``fn`` under torch's FLOP counter; returns (result, total, per-op dict).

    One multiply-add counts as 2 operations; element-wise work (softmax,
    normalization, activations, bilinear sampling) is not counted here.
    """
    with FlopCounterMode(display=False) as counter:
        result = fn(*args, **kwargs)
    per_op = {str(k): int(v) for k, v in counter.get_flop_counts().get("Global", {}).items()}
    return result, int(counter.get_total_flops()), per_op


def bi_attn_extras(b, n, d, h, w, num_heads=8):
    """Element-wise work left out of the accounted terms (approximate counts)."""
    hw = h * w
    return {
        "softmax_exp": b * num_heads * (2 * n * hw + n * n),
        "layernorm_elems": b * (5 * n * d + 2 * hw * d),
        "mlp_activation": b * n * int(round(d * BI_ATTN_MLP_RATIO)),
        "positional_add": 2 * b * hw * d,
    }


def measure_bi_attention(b, n, d, h, w, num_heads=8, seed=0):
    """Instrumented operation count of one bi-direction attention block with c == d."""
    torch.manual_seed(seed)
    block = BiDirectionAttention(d, d, num_heads)
    q = torch.randn(b, n, d)
    f = torch.randn(b, d, h, w)
    with torch.no_grad():
        _, total, per_op = count_flops(block, q, f)
    return {"measured": total, "per_op": per_op, "extras": bi_attn_extras(b, n, d, h, w, num_heads)}


def deformable_sampling_macs(num_queries, dim, num_levels, num_points):
    # 4 bilinear taps per sample per channel plus the weighted sum
    return num_queries * num_levels * num_points * dim * 5


def measure_deformable(level_channels, sizes, dim, b=1, num_heads=8, num_points=4, seed=0):
    """Operation count of one deformable fusion call: linear layers + sampling taps."""
    torch.manual_seed(seed)
    block = DeformableFusion(level_channels, dim, num_heads, num_points)
    maps = [torch.randn(b, c, h, w) for c, (h, w) in zip(level_channels, sizes)]
    with torch.no_grad():
        _, linear, _ = count_flops(block, maps)
    nq = b * sum(h * w for h, w in sizes)
    sampling = 2 * deformable_sampling_macs(nq, dim, len(sizes), num_points)
    return {"linear": linear, "sampling": sampling, "total": linear + sampling}
