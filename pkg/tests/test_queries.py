import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from irstd.backbone import EncoderConfig, ShapeError, build_encoder, encode
from irstd.layers import flatten_map
from irstd.queries import (
    BiDirectionAttention,
    DeformableFusion,
    EncoderQueryEngine,
    bi_attn_cost,
    bi_direction_attention,
    deformable_fuse,
    init_dense,
    init_sparse,
    measure_bi_attention,
    measure_deformable,
    run_encoder_queries,
)

from oracles import bilinear, finite_difference_check


# ---------------------------------------------------------------- sparse / dense init

@pytest.mark.parametrize("group,n", [("encoder", 4), ("fpn", 4), ("decoder", 1)])
def test_init_sparse_default_counts(group, n):
    q = init_sparse(group, d=256, seed=1)
    assert q.tokens.shape == (n, 256)
    assert q.tokens.requires_grad
    assert torch.equal(q.tokens, init_sparse(group, d=256, seed=1).tokens)
    assert not torch.equal(q.tokens, init_sparse(group, d=256, seed=2).tokens)


def test_init_sparse_validation():
    with pytest.raises(ValueError):
        init_sparse("encoder", n=0)
    with pytest.raises(ValueError):
        init_sparse("neck")


def test_init_dense_copy_semantics():
    s1 = torch.randn(1, 8, 16, 16)
    dense = init_dense(s1)
    assert torch.equal(dense, s1)
    before = s1.clone()
    dense += 1.0
    assert torch.equal(s1, before)
    assert torch.equal(init_dense(torch.zeros(2, 4, 8, 8)), torch.zeros(2, 4, 8, 8))


# ---------------------------------------------------------------- bi-direction attention

def test_bi_attention_shapes():
    block = BiDirectionAttention(256, 256)
    q, f = torch.randn(1, 4, 256), torch.randn(1, 256, 16, 16)
    with torch.no_grad():
        q2, f2 = bi_direction_attention(block, q, f)
    assert q2.shape == q.shape and f2.shape == f.shape


def test_bi_attention_projects_other_channel_counts():
    block = BiDirectionAttention(32, 48)
    with torch.no_grad():
        q2, f2 = block(torch.randn(2, 4, 32), torch.randn(2, 48, 8, 8))
    assert q2.shape == (2, 4, 32) and f2.shape == (2, 48, 8, 8)
    with pytest.raises(ShapeError):
        block(torch.randn(2, 4, 32), torch.randn(2, 32, 8, 8))


def test_bi_attention_permutation_equivariance():
    block = BiDirectionAttention(16, 24, num_heads=4).double()
    q = torch.randn(2, 4, 16, dtype=torch.float64)
    f = torch.randn(2, 24, 6, 6, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        qa, fa = block(q, f)
        qb, fb = block(q[:, perm], f)
    torch.testing.assert_close(qb, qa[:, perm], rtol=1e-12, atol=1e-12)
    torch.testing.assert_close(fb, fa, rtol=1e-12, atol=1e-12)


def test_bi_attention_zero_weights_is_identity():
    block = BiDirectionAttention(16, 24, num_heads=4)
    for mod in (block.cross_q2f, block.mlp, block.self_attn, block.cross_f2q, block.feat_out):
        for p in mod.parameters():
            torch.nn.init.zeros_(p)
    q, f = torch.randn(1, 4, 16), torch.randn(1, 24, 4, 4)
    with torch.no_grad():
        q2, f2 = block(q, f)
    assert torch.equal(q2, q)
    assert torch.equal(f2, f)


def test_bi_attention_gradients_all_parameter_groups():
    torch.manual_seed(1)
    block = BiDirectionAttention(8, 12, num_heads=2).double()
    q = torch.randn(1, 3, 8, dtype=torch.float64, requires_grad=True)
    f = torch.randn(1, 12, 3, 3, dtype=torch.float64, requires_grad=True)
    w1, w2 = torch.randn(1, 3, 8, dtype=torch.float64), torch.randn(1, 12, 3, 3, dtype=torch.float64)

    def loss():
        a, b = block(q, f)
        return (a * w1).sum() + (b * w2).sum()

    for name, mod in block.named_children():
        params = list(mod.parameters())
        if not params:
            continue
        errs = finite_difference_check(loss, params, n_checks=6, seed=hash(name) % 1000)
        assert max(errs) <= 1e-3, (name, errs)
    assert max(finite_difference_check(loss, [q, f], n_checks=10)) <= 1e-3


# ---------------------------------------------------------------- deformable fusion

def test_deformable_shapes():
    block = DeformableFusion([16, 32, 64, 128], 32)
    dense = torch.randn(1, 16, 32, 32)
    stages = [torch.randn(1, 32, 16, 16), torch.randn(1, 64, 8, 8), torch.randn(1, 128, 4, 4)]
    with torch.no_grad():
        d2, s2 = deformable_fuse(block, dense, stages)
    assert d2.shape == dense.shape
    assert [s.shape for s in s2] == [s.shape for s in stages]


def test_deformable_requires_stages():
    block = DeformableFusion([8], 8)
    with pytest.raises(ValueError):
        deformable_fuse(block, torch.randn(1, 8, 4, 4), [])


def test_deformable_zero_offsets_uniform_weights_closed_form():
    torch.manual_seed(0)
    dim, heads, points = 8, 2, 3
    block = DeformableFusion([8, 8], dim, heads, points).double()
    with torch.no_grad():
        block.sampling_offsets.bias.zero_()
    shapes = [(4, 6), (2, 3)]
    values = [torch.randn(1, h * w, dim, dtype=torch.float64) for h, w in shapes]
    query = torch.randn(1, sum(h * w for h, w in shapes), dim, dtype=torch.float64)
    with torch.no_grad():
        got = block.sample(query, values, shapes)[0].numpy()
        projected = [block.value_proj(v)[0].numpy() for v in values]
    maps = [p.T.reshape(dim, h, w) for p, (h, w) in zip(projected, shapes)]
    refs = [((j + 0.5) / w, (i + 0.5) / h) for h, w in shapes for i in range(h) for j in range(w)]
    for qi, (x, y) in enumerate(refs):
        expected = np.mean([bilinear(m, x, y) for m in maps], axis=0)
        np.testing.assert_allclose(got[qi], expected, rtol=1e-10, atol=1e-12)


def test_deformable_sampling_matches_bilinear_oracle_with_offsets():
    torch.manual_seed(3)
    dim, heads, points = 4, 1, 2
    block = DeformableFusion([4], dim, heads, points).double()
    with torch.no_grad():
        block.sampling_offsets.bias.copy_(torch.tensor([0.3, -0.7, -1.2, 0.45], dtype=torch.float64))
        block.attention_weights.bias.copy_(torch.tensor([0.5, -0.25], dtype=torch.float64))
    h, w = 5, 4
    v = torch.randn(1, h * w, dim, dtype=torch.float64)
    query = torch.randn(1, h * w, dim, dtype=torch.float64)
    with torch.no_grad():
        got = block.sample(query, [v], [(h, w)])[0].numpy()
        m = block.value_proj(v)[0].numpy().T.reshape(dim, h, w)
    wts = np.exp([0.5, -0.25])
    wts /= wts.sum()
    offs = [(0.3, -0.7), (-1.2, 0.45)]
    for i in range(h):
        for j in range(w):
            x, y = (j + 0.5) / w, (i + 0.5) / h
            exp = sum(wk * bilinear(m, x + ox / w, y + oy / h) for wk, (ox, oy) in zip(wts, offs))
            np.testing.assert_allclose(got[i * w + j], exp, rtol=1e-10, atol=1e-12)


def test_deformable_gradients():
    torch.manual_seed(2)
    block = DeformableFusion([4, 6], 8, num_heads=2, num_points=2).double()
    with torch.no_grad():
        block.attention_weights.weight.normal_(0, 0.3)
        block.sampling_offsets.weight.normal_(0, 0.1)
    maps = [torch.randn(1, 4, 4, 4, dtype=torch.float64), torch.randn(1, 6, 2, 2, dtype=torch.float64)]
    ws = [torch.randn_like(m) for m in maps]

    def loss():
        return sum((o * w).sum() for o, w in zip(block(maps), ws))

    errs = finite_difference_check(loss, list(block.parameters()), n_checks=20)
    assert max(errs) <= 1e-3


# ---------------------------------------------------------------- encoder query engine

def _engine(stem, dim=16):
    cfg = EncoderConfig(stem_downsample=stem, stage_channels=(8, 16, 16, 32), stage_depths=(1, 1, 1, 1))
    return build_encoder(cfg), EncoderQueryEngine(cfg.stage_channels, dim, num_heads=4, deform_heads=4)


def test_run_encoder_queries_shapes():
    enc, engine = _engine(2)
    q = init_sparse("encoder", d=16)
    with torch.no_grad():
        pyr, q2, dense = run_encoder_queries(engine, enc, torch.randn(1, 3, 64, 64), q)
    assert pyr.sizes == [(32, 32), (16, 16), (8, 8), (4, 4)]
    assert q2.shape == (1, 4, 16)
    assert dense.shape == (1, 8, 32, 32)


def test_disabled_queries_reproduce_encoder():
    enc, engine = _engine(1)
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        pyr, _, dense = run_encoder_queries(engine, enc, x, init_sparse("encoder", d=16), use_queries=False)
        ref = encode(enc, x)
    for a, b in zip(pyr.stages, ref.stages):
        assert torch.equal(a, b)
    assert torch.equal(dense, ref.stages[0])


def test_query_token_gradient_finite_differences():
    torch.manual_seed(4)
    cfg = EncoderConfig(stem_downsample=1, stage_channels=(4, 4, 8, 8), stage_depths=(1, 1, 1, 1))
    enc = build_encoder(cfg).double()
    engine = EncoderQueryEngine(cfg.stage_channels, 8, num_heads=2, deform_heads=2, deform_points=2).double()
    q = init_sparse("encoder", d=8).double()
    x = torch.randn(1, 3, 8, 8, dtype=torch.float64)

    def loss():
        pyr, qo, dense = run_encoder_queries(engine, enc, x, q)
        return qo.pow(2).sum() + pyr.stages[-1].sum() + dense.mean()

    errs = finite_difference_check(loss, [q.tokens], n_checks=20, step=1e-3)
    assert max(errs) <= 1e-3


# ---------------------------------------------------------------- cost model

def test_cost_examples():
    c = bi_attn_cost(1, 4, 2, 2, 2)
    assert c.terms == {"query_linear": 544, "feature_linear": 128, "cross_dot": 256, "self_dot": 128}
    assert c.total_ops == 1056
    assert bi_attn_cost(1, 1, 1, 1, 1).total_ops == 54
    with pytest.raises(ValueError):
        bi_attn_cost(0, 1, 1, 1, 1)


@given(b=st.integers(1, 4), n=st.integers(1, 16), d=st.integers(1, 512), h=st.integers(1, 64), w=st.integers(1, 64))
def test_cost_formula_properties(b, n, d, h, w):
    c = bi_attn_cost(b, n, d, h, w)
    assert c.total_ops == 34 * b * n * d * d + 8 * b * h * w * d * d + 8 * b * n * h * w * d + 4 * b * n * n * d
    big = bi_attn_cost(b, n, d, 2 * h, 2 * w).terms
    assert big["query_linear"] == c.terms["query_linear"]
    assert big["self_dot"] == c.terms["self_dot"]
    assert big["feature_linear"] == 4 * c.terms["feature_linear"]
    assert big["cross_dot"] == 4 * c.terms["cross_dot"]


@given(d=st.integers(8, 256), b=st.integers(1, 3), extra=st.integers(0, 4096))
def test_cost_dominated_by_feature_projection(d, b, extra):
    hw = 16 * d + extra
    c = bi_attn_cost(b, 4, d, hw, 1)
    assert c.terms["feature_linear"] > 0.5 * c.total_ops


@pytest.mark.parametrize("shape", [(1, 4, 16, 8, 8), (2, 4, 32, 4, 4), (1, 9, 64, 16, 8)])
def test_measured_matches_formula(shape):
    m = measure_bi_attention(*shape, num_heads=4)
    assert m["measured"] == bi_attn_cost(*shape).total_ops


def test_measured_counts_scale_linearly():
    bi = [measure_bi_attention(1, 4, 16, s, s, num_heads=4)["measured"] for s in (8, 16, 32)]
    de = [measure_deformable([8, 16], [(s, s), (s // 2, s // 2)], 16, num_heads=4)["total"] for s in (8, 16, 32)]
    for counts in (bi, de):
        for a, b in zip(counts, counts[1:]):
            assert b / a <= 4.1
