"""Small building blocks shared by the query engine and the mask decoder."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class Attention(nn.Module):
    """Multi-head attention with explicit projections.

    ``downsample_rate`` shrinks the internal width as in SAM's cross-attention.
    Matmuls are written out (no fused kernel) so FLOP counters see every one.
    """

    def __init__(self, dim: int, num_heads: int = 8, downsample_rate: int = 1, kv_dim: int | None = None):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.internal_dim = dim // downsample_rate
        if self.internal_dim % num_heads:
            raise ValueError(f"internal dim {self.internal_dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, self.internal_dim)
        self.k_proj = nn.Linear(kv_dim, self.internal_dim)
        self.v_proj = nn.Linear(kv_dim, self.internal_dim)
        self.out_proj = nn.Linear(self.internal_dim, dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q, k, v):
        q = self._split(self.q_proj(q))
        k = self._split(self.k_proj(k))
        v = self._split(self.v_proj(v))
        scale = 1.0 / math.sqrt(q.shape[-1])
        attn = torch.softmax(torch.matmul(q, k.transpose(-2, -1)) * scale, dim=-1)
        out = torch.matmul(attn, v)
        b, h, n, c = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * c))


class MLP(nn.Module):
    def __init__(self, in_dim, hidden_dim, out_dim, num_layers=2, act=nn.GELU):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.act = act()

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


def sine_pos_embed(h: int, w: int, dim: int, *, like: torch.Tensor | None = None,
                   temperature: float = 10000.0) -> torch.Tensor:
    """2-D sinusoidal encoding, shape (h*w, dim), row-major over (y, x)."""
    kw = {} if like is None else {"dtype": like.dtype, "device": like.device}
    ys = (torch.arange(h, **kw) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, **kw) + 0.5) / w * 2 * math.pi
    dy = dim // 2
    dx = dim - dy

    def enc(pos, n):
        half = (n + 1) // 2
        freqs = temperature ** (torch.arange(half, **kw) / max(half, 1))
        ang = pos[:, None] / freqs[None]
        return torch.cat([ang.sin(), ang.cos()], dim=-1)[:, :n]

    ey = enc(ys, dy)[:, None, :].expand(h, w, dy)
    ex = enc(xs, dx)[None, :, :].expand(h, w, dx)
    return torch.cat([ey, ex], dim=-1).reshape(h * w, dim)


def flatten_map(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    return x.flatten(2).transpose(1, 2)


def unflatten_map(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """(B, H*W, C) -> (B, C, H, W)."""
    b, _, c = tokens.shape
    return tokens.transpose(1, 2).reshape(b, c, h, w)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def point_sample(inputs: torch.Tensor, coords: torch.Tensor, **kwargs) -> torch.Tensor:
    """Bilinear readout of (B, C, H, W) at (B, P, 2) points in [0, 1]^2 (x, y order).

    Returns (B, C, P). Pixel centers sit at ``(j + 0.5) / W``.
    """
    grid = 2.0 * coords[:, :, None, :] - 1.0
    out = F.grid_sample(inputs, grid, align_corners=False, **kwargs)
    return out[..., 0]
