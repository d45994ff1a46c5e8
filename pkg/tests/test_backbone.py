import pytest
import torch
from hypothesis import given, settings, strategies as st

from irstd.backbone import (
    EncoderConfig,
    ShapeError,
    build_encoder,
    encode,
    expected_stage_sizes,
    replicate_channels,
)

SMALL = dict(stage_channels=(8, 16, 16, 32), stage_depths=(1, 1, 1, 1))


def sizes(pyr):
    return [tuple(s.shape[-2:]) for s in pyr.stages]


@pytest.mark.parametrize("stem,size,expected", [
    (4, 256, [64, 32, 16, 8]),
    (2, 512, [256, 128, 64, 32]),
    (1, 256, [256, 128, 64, 32]),
])
def test_stage_sizes(stem, size, expected):
    enc = build_encoder(EncoderConfig(stem_downsample=stem, **SMALL))
    with torch.no_grad():
        pyr = encode(enc, torch.zeros(1, 3, size, size))
    assert sizes(pyr) == [(s, s) for s in expected]
    assert [s.shape[1] for s in pyr.stages] == [8, 16, 16, 32]


def test_default_channels_and_param_count():
    cfg = EncoderConfig(stem_downsample=4)
    assert cfg.stage_channels == (64, 128, 256, 512)
    assert cfg.stage_depths == (2, 2, 6, 2)
    enc = build_encoder(cfg)
    assert enc.num_parameters == sum(p.numel() for p in enc.parameters())
    with torch.no_grad():
        pyr = encode(enc, torch.randn(2, 3, 64, 64))
    assert [s.shape[1] for s in pyr.stages] == [64, 128, 256, 512]


@pytest.mark.parametrize("stem", [0, 3, 8])
def test_invalid_stem(stem):
    with pytest.raises(ValueError):
        EncoderConfig(stem_downsample=stem)


def test_non_divisible_input_rejected():
    enc = build_encoder(EncoderConfig(stem_downsample=2, **SMALL))
    with pytest.raises(ShapeError):
        encode(enc, torch.zeros(1, 3, 40, 48))


def test_zero_input_finite_and_deterministic():
    cfg = EncoderConfig(stem_downsample=1, **SMALL)
    a = build_encoder(cfg, seed=3)
    b = build_encoder(cfg, seed=3)
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        pa, pb = encode(a, x), encode(b, x)
        pz = encode(a, torch.zeros(1, 3, 32, 32))
    for s, t in zip(pa.stages, pb.stages):
        assert torch.equal(s, t)
    assert all(torch.isfinite(s).all() for s in pz.stages)


def test_parameter_names_follow_stage_block_scheme():
    enc = build_encoder(EncoderConfig(stem_downsample=1, **SMALL))
    names = [n for n, _ in enc.named_parameters()]
    assert any(n.startswith("stage1.block0.") for n in names)
    assert any(n.startswith("stage4.block0.") for n in names)


def test_batch_independent_normalization():
    enc = build_encoder(EncoderConfig(stem_downsample=1, **SMALL)).double()
    x = torch.randn(3, 3, 16, 16, dtype=torch.float64)
    with torch.no_grad():
        full = encode(enc, x)
        single = encode(enc, x[1:2])
    for s, t in zip(full.stages, single.stages):
        torch.testing.assert_close(s[1:2], t, rtol=1e-10, atol=1e-12)


def test_replicate_channels():
    x = torch.rand(2, 1, 8, 8)
    y = replicate_channels(x, 3)
    assert y.shape == (2, 3, 8, 8)
    assert torch.equal(y[:, 2], x[:, 0])
    assert replicate_channels(y, 3) is y


@settings(max_examples=15, deadline=None)
@given(stem=st.sampled_from([1, 2, 4]), kh=st.integers(1, 3), kw=st.integers(1, 3))
def test_halving_property(stem, kh, kw):
    m = stem * 8
    h, w = m * kh, m * kw
    enc = build_encoder(EncoderConfig(stem_downsample=stem, stage_channels=(4, 4, 8, 8), stage_depths=(1, 1, 1, 1)))
    with torch.no_grad():
        pyr = encode(enc, torch.zeros(1, 3, h, w))
        big = encode(enc, torch.zeros(1, 3, 2 * h, 2 * w))
    got = sizes(pyr)
    assert got == expected_stage_sizes(h, w, stem)
    for (a, b), (c, d) in zip(got, got[1:]):
        assert (c * 2, d * 2) == (a, b)
    assert [(2 * a, 2 * b) for a, b in got] == sizes(big)
