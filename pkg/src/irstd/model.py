"""Full detector assembly: encoder + queries -> FPN -> early heads -> prompt -> decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict

import torch
import torch.nn as nn

from .backbone import EncoderConfig, build_encoder, replicate_channels
from .decoder import DecoderConfig, MaskDecoder, decode
from .fpn import (
    DensePromptEncoder,
    EarlyHead,
    MaskPrediction,
    TinyFPN,
    early_decode_encoder,
    early_decode_fpn,
    fpn_forward,
    inject_dense_prompt,
)
from .queries import EncoderQueryEngine, SparseQuerySet


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dim: int = 256  # sparse query width == FPN width == decoder width
    n_encoder_queries: int = 4
    n_fpn_queries: int = 4
    n_decoder_queries: int = 1
    num_heads: int = 8
    deform_heads: int = 8
    deform_points: int = 4
    decoder_depth: int = 2
    decoder_mlp_ratio: float = 8.0
    use_queries: bool = True
    inject_prompt: bool = True

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(self.decoder_depth, self.dim, self.decoder_mlp_ratio, self.num_heads)

    def to_flat(self, prefix="model") -> Dict[str, object]:
        out = {}
        for k, v in asdict(self).items():
            if k == "encoder":
                for ek, ev in v.items():
                    out[f"{prefix}.encoder.{ek}"] = list(ev) if isinstance(ev, tuple) else ev
            else:
                out[f"{prefix}.{k}"] = v
        return out

    @classmethod
    def from_flat(cls, flat: Dict[str, object], prefix="model") -> "ModelConfig":
        enc = {}
        top = {}
        for k, v in flat.items():
            if not k.startswith(prefix + "."):
                continue
            rest = k[len(prefix) + 1:]
            if rest.startswith("encoder."):
                enc[rest[len("encoder."):]] = v
            else:
                top[rest] = v
        return cls(encoder=EncoderConfig(**enc), **top)


PROFILES = {
    "paper": dict(),
    "desk": dict(
        encoder=dict(stage_channels=(16, 32, 64, 128), stage_depths=(1, 1, 1, 1)),
        dim=32,
        decoder_mlp_ratio=4.0,
    ),
}


def model_config(profile: str = "desk", stem: int = 1, **overrides) -> ModelConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    base = dict(PROFILES[profile])
    enc = dict(base.pop("encoder", {}))
    enc["stem_downsample"] = stem
    enc.update(overrides.pop("encoder", {}))
    base.update(overrides)
    return ModelConfig(encoder=EncoderConfig(**enc), **base)


class IRSTDModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        ec = config.encoder
        d = config.dim
        self.encoder = build_encoder(ec, seed=None)
        self.queries = nn.ModuleDict({
            "encoder": SparseQuerySet("encoder", config.n_encoder_queries, d),
            "fpn": SparseQuerySet("fpn", config.n_fpn_queries, d),
            "decoder": SparseQuerySet("decoder", config.n_decoder_queries, d),
        })
        self.encoder_queries = EncoderQueryEngine(
            ec.stage_channels, d, config.num_heads, config.deform_heads, config.deform_points
        )
        self.fpn = TinyFPN(ec.stage_channels, d, query_dim=d, num_heads=config.num_heads)
        self.early_encoder_head = EarlyHead(d, ec.stage_channels[0], d)
        self.early_fpn_head = EarlyHead(d, d, d, feature_conv=False)
        self.prompt_encoder = DensePromptEncoder(d)
        self.decoder = MaskDecoder(config.decoder_config())

    def forward(self, images: torch.Tensor, keep_diagnostics: bool = False) -> Dict[str, object]:
        cfg = self.config
        images = replicate_channels(images, cfg.encoder.input_channels)
        b = images.shape[0]
        q_enc = self.queries["encoder"].expand(b)
        q_fpn = self.queries["fpn"].expand(b)
        q_dec = self.queries["decoder"].expand(b)

        pyramid, q_enc, q_dense = self.encoder_queries(self.encoder, images, q_enc, cfg.use_queries)
        early_enc = early_decode_encoder(self.early_encoder_head, q_dense, q_enc)

        if cfg.use_queries:
            fused, q_all = fpn_forward(self.fpn, pyramid, q_enc, q_fpn, keep_diagnostics)
            n_enc = q_enc.shape[1]
            q_enc, q_fpn = q_all[:, :n_enc], q_all[:, n_enc:]
        else:
            fused, _ = fpn_forward(self.fpn, pyramid, keep_diagnostics=keep_diagnostics)
        early_fpn = early_decode_fpn(self.early_fpn_head, fused, q_fpn)
        if cfg.inject_prompt:
            fused = inject_dense_prompt(self.prompt_encoder, early_fpn, fused)
        final = decode(self.decoder, fused, q_enc, q_fpn, q_dec, output_size=images.shape[-2:])
        return {
            "final": final,
            "early_encoder": early_enc,
            "early_fpn": early_fpn,
            "pyramid": pyramid,
            "fused": fused,
            "q_dense": q_dense,
        }

    def predictions(self, out) -> Dict[str, MaskPrediction]:
        return {k: out[k] for k in ("early_encoder", "early_fpn", "final")}


def build_model(config: ModelConfig, seed: int = 0) -> IRSTDModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return IRSTDModel(config)
