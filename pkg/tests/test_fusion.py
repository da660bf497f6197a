import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import identity_attention
from oracles import np_block, np_ffn_block, np_weights
from docfusion import autograd as ag
from docfusion.autograd import Tensor
from docfusion.errors import ConfigError, ContractError, ShapeError
from docfusion.fusion import (AVERAGE, DROP_BRANCH, TRUNK, FusedModel, attn_block, drop_branch,
                              external_stack, fused_decoder_layer, fused_encoder_layer, merge)
from docfusion.gradcheck import check_gradients
from docfusion.notation import parse_spec
from docfusion.providers import ProviderConfig, ProviderModel
from docfusion.transformer import Transformer, TransformerConfig, init_attention, select
from docfusion.vocab import BOS_ID

D, H, HEADS = 4, 6, 2
CFG = TransformerConfig(vocab_size=24, model_dim=D, num_heads=HEADS, num_layers=1, ffn_dim=8,
                        max_positions=10, dropout_rate=0.0)


def make_base(seed=0):
    return Transformer(CFG, seed=seed, dtype=np.float64)


def make_blocks(n, part="enc", seed=1, widths=None):
    """``n`` glorot-initialised external blocks (larger weights than the 0.02 init)."""
    rng = np.random.default_rng(seed)
    params = {}
    widths = widths or [H] * n
    for i, w in enumerate(widths):
        init_attention(params, f"fusion.2.{part}0.{i}", w, D, rng, np.float64)
    return params, [select(params, f"fusion.2.{part}0.{i}") for i in range(n)]


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def zero_values(w):
    for name in ("wv", "bv", "bo"):
        w[name].data = np.zeros_like(w[name].data)


# attention block -------------------------------------------------------------

def test_zero_value_projection_returns_query():
    rng = np.random.default_rng(0)
    _, (w,) = make_blocks(1)
    zero_values(w)
    Q = rng.normal(size=(3, D))
    out = attn_block(rng.normal(size=(5, H)), rng.normal(size=(5, H)), Q, w, HEADS)
    np.testing.assert_array_equal(out.data, Q)


def test_scalar_block_hand_oracle():
    # 1 head, d=2, identity projections, layer-norm gain (1, 1) and bias (0.5, -0.5)
    w = identity_attention(2)
    w["ln_b"] = Tensor(np.array([0.5, -0.5]))
    K = [[1.0, 0.0], [0.0, 2.0]]
    Q = [[1.0, 1.0]]
    s1, s2 = 1.0 / math.sqrt(2), 2.0 / math.sqrt(2)
    p1 = math.exp(s1) / (math.exp(s1) + math.exp(s2))
    a = [p1 * 1.0, (1 - p1) * 2.0]
    mu = (a[0] + a[1]) / 2
    sd = math.sqrt(((a[0] - mu) ** 2 + (a[1] - mu) ** 2) / 2 + 1e-6)
    expected = [(a[0] - mu) / sd + 0.5 + 1.0, (a[1] - mu) / sd - 0.5 + 1.0]
    out = attn_block(K, K, Q, w, 1)
    np.testing.assert_allclose(out.data[0], expected, rtol=0, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(5)), st.integers(0, 1000))
def test_query_permutation_permutes_rows(perm, seed):
    rng = np.random.default_rng(seed)
    _, (w,) = make_blocks(1, seed=seed)
    K = rng.normal(size=(4, H))
    Q = rng.normal(size=(5, D))
    out = attn_block(K, K, Q, w, HEADS).data
    permuted = attn_block(K, K, Q[list(perm)], w, HEADS).data
    np.testing.assert_allclose(permuted, out[list(perm)], atol=1e-13)


def test_provider_width_mismatch_is_shape_error():
    _, (w,) = make_blocks(1)
    with pytest.raises(ShapeError):
        attn_block(np.ones((2, H + 1)), np.ones((2, H + 1)), np.ones((1, D)), w, HEADS)


# drop-branch and merge -------------------------------------------------------

@pytest.mark.parametrize("u,picked", [(0.7, "M"), (0.3, "N"), (0.5, "M"), (0.0, "N")])
def test_drop_branch_indicator(u, picked):
    M, N = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert drop_branch(M, N, u) is (M if picked == "M" else N)


def test_drop_branch_errors():
    with pytest.raises(ShapeError):
        drop_branch(np.ones(2), np.ones(3), 0.1)
    with pytest.raises(ContractError):
        drop_branch(np.ones(2), np.ones(2), 1.0)


def test_inference_merge_is_exact_mean():
    rng = np.random.default_rng(3)
    R, S = Tensor(rng.normal(size=(4, 5)) * 1e3), Tensor(rng.normal(size=(4, 5)))
    np.testing.assert_array_equal(merge(R, S, AVERAGE).data, (R.data + S.data) / 2)
    assert merge(R, S, TRUNK) is R


def test_merge_argument_contract():
    R = Tensor(np.ones(2))
    with pytest.raises(ContractError):
        merge(R, R, DROP_BRANCH)
    with pytest.raises(ContractError):
        merge(R, R, AVERAGE, 0.3)
    with pytest.raises(ConfigError):
        merge(R, R, "max")


def test_drop_branch_frequency_over_10k_steps():
    model = FusedModel(make_base())
    rng = np.random.default_rng(2024)
    M, N = Tensor(np.ones(1)), Tensor(np.zeros(1))
    draws = [model.sample_us(rng) for _ in range(10_000)]
    for key in draws[0]:
        picked_m = sum(drop_branch(M, N, d[key]) is M for d in draws)
        assert abs(picked_m / 10_000 - 0.5) <= 0.02


# fused layers ----------------------------------------------------------------

def test_empty_chain_and_u_contracts():
    base = make_base()
    E = Tensor(np.ones((1, 3, D)))
    with pytest.raises(ContractError):
        fused_encoder_layer(base, 0, [], E, [])
    _, blocks = make_blocks(1)
    ext = [np.ones((1, 2, H))]
    with pytest.raises(ContractError):
        fused_encoder_layer(base, 0, blocks, E, ext, DROP_BRANCH)
    with pytest.raises(ContractError):
        fused_encoder_layer(base, 0, blocks, E, ext + ext)


def test_residual_collapse_zero_values_everywhere():
    rng = np.random.default_rng(4)
    base = make_base()
    zero_values(select(base.params, "base.enc.0.self"))
    _, blocks = make_blocks(3)
    for w in blocks:
        zero_values(w)
    E = Tensor(rng.normal(size=(1, 3, D)))
    ext = [rng.normal(size=(1, 4, H)) for _ in blocks]
    out = fused_encoder_layer(base, 0, blocks, E, ext, AVERAGE)
    np.testing.assert_allclose(out.data, base.encoder_ffn(0, E).data, atol=1e-15)


def test_zero_feed_forward_passes_merge_through():
    rng = np.random.default_rng(5)
    base = make_base()
    for name, t in select(base.params, "base.enc.0.ffn").items():
        if name != "ln_g":
            t.data = np.zeros_like(t.data)
    _, blocks = make_blocks(2)
    E = Tensor(rng.normal(size=(1, 3, D)))
    ext = [rng.normal(size=(1, 4, H)) for _ in blocks]
    out = fused_encoder_layer(base, 0, blocks, E, ext, AVERAGE).data
    R = base.encoder_trunk(0, E, None).data
    S = E.data
    for w, x in zip(blocks, ext):
        S = attn_block(x, x, S, w, HEADS).data
    np.testing.assert_allclose(out, (R + S) / 2, atol=1e-15)


def _bert_fused_encoder_oracle(base, w_ext, E, B):
    p = base.params
    R = np_block(E, E, E, np_weights(p, "base.enc.0.self"), HEADS)
    S = np_block(B, B, E, w_ext, HEADS)
    return np_ffn_block((R + S) / 2, np_weights(p, "base.enc.0.ffn"))


def _bert_fused_decoder_oracle(base, w_ext, Dp, mem, B):
    p = base.params
    L = Dp.shape[0]
    causal = np.tril(np.ones((L, L), bool))
    y = np_block(Dp, Dp, Dp, np_weights(p, "base.dec.0.self"), HEADS, causal)
    R = np_block(mem, mem, y, np_weights(p, "base.dec.0.cross"), HEADS)
    S = np_block(B, B, Dp, w_ext, HEADS)
    return np_ffn_block((R + S) / 2, np_weights(p, "base.dec.0.ffn"))


@pytest.mark.parametrize("seed", range(5))
def test_chain_of_one_is_bert_fused(seed):
    rng = np.random.default_rng(seed)
    base = make_base(seed)
    params, blocks = make_blocks(1, seed=seed)
    E, B = rng.normal(size=(5, D)), rng.normal(size=(7, H))
    out = fused_encoder_layer(base, 0, blocks, Tensor(E), [B], AVERAGE).data
    ref = _bert_fused_encoder_oracle(base, np_weights(params, "fusion.2.enc0.0"), E, B)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)

    dparams, dblocks = make_blocks(1, part="dec", seed=seed + 50)
    Dp, mem = rng.normal(size=(4, D)), rng.normal(size=(5, D))
    out = fused_decoder_layer(base, 0, dblocks, Tensor(Dp), Tensor(mem), [B], AVERAGE).data
    ref = _bert_fused_decoder_oracle(base, np_weights(dparams, "fusion.2.dec0.0"), Dp, mem, B)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_chain_of_three_decoder_oracle():
    rng = np.random.default_rng(9)
    base = make_base(3)
    widths = [H, 2, 8]
    params, blocks = make_blocks(3, part="dec", seed=4, widths=widths)
    Dp, mem = rng.normal(size=(3, D)), rng.normal(size=(4, D))
    ext = [rng.normal(size=(2 + i, w)) for i, w in enumerate(widths)]
    p = base.params
    causal = np.tril(np.ones((3, 3), bool))
    y = np_block(Dp, Dp, Dp, np_weights(p, "base.dec.0.self"), HEADS, causal)
    R = np_block(mem, mem, y, np_weights(p, "base.dec.0.cross"), HEADS)
    S = Dp
    for i, x in enumerate(ext):
        S = np_block(x, x, S, np_weights(params, f"fusion.2.dec0.{i}"), HEADS)
    for u, T in ((0.9, R), (0.1, S), (None, (R + S) / 2)):
        mode = AVERAGE if u is None else DROP_BRANCH
        out = fused_decoder_layer(base, 0, blocks, Tensor(Dp), Tensor(mem), ext, mode, u).data
        ref = np_ffn_block(T, np_weights(p, "base.dec.0.ffn"))
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_decoder_branch_collapse_and_causality():
    rng = np.random.default_rng(6)
    base = make_base()
    _, blocks = make_blocks(2, part="dec")
    for w in blocks:
        zero_values(w)
    Dp, mem = rng.normal(size=(1, 4, D)), rng.normal(size=(1, 5, D))
    ext = [rng.normal(size=(1, 3, H)) for _ in blocks]
    out = fused_decoder_layer(base, 0, blocks, Tensor(Dp), Tensor(mem), ext, AVERAGE).data
    R = base.decoder_trunk(0, Tensor(Dp), Tensor(mem), None).data
    np.testing.assert_allclose(out, base.decoder_ffn(0, Tensor((R + Dp) / 2)).data, atol=1e-15)
    for t in range(3):
        changed = Dp.copy()
        changed[0, t + 1:] += rng.normal(size=changed[0, t + 1:].shape)
        other = fused_decoder_layer(base, 0, blocks, Tensor(changed), Tensor(mem), ext, AVERAGE)
        np.testing.assert_array_equal(other.data[0, :t + 1], out[0, :t + 1])


@pytest.mark.parametrize("seed", range(3))
def test_expectation_over_u_equals_inference_merge(seed):
    rng = np.random.default_rng(seed)
    base = make_base(seed)
    for name, t in select(base.params, "base.enc.0.ffn").items():
        if name != "ln_g":
            t.data = np.zeros_like(t.data)
    _, blocks = make_blocks(3, seed=seed)
    E = Tensor(rng.normal(size=(2, 3, D)))
    ext = [rng.normal(size=(2, 4, H)) for _ in blocks]
    hi = fused_encoder_layer(base, 0, blocks, E, ext, DROP_BRANCH, 0.75).data
    lo = fused_encoder_layer(base, 0, blocks, E, ext, DROP_BRANCH, 0.25).data
    avg = fused_encoder_layer(base, 0, blocks, E, ext, AVERAGE).data
    np.testing.assert_allclose((hi + lo) / 2, avg, atol=1e-14)


@pytest.mark.parametrize("mode,u", [(AVERAGE, None), (DROP_BRANCH, 0.2)])
def test_gradients_through_fused_layers(mode, u):
    # seed chosen so that no ReLU pre-activation sits within a finite-difference
    # step of its kink (checked below); the kink itself is not differentiable
    rng = np.random.default_rng(17)
    base = make_base()
    widths = [H, 3, 5]
    _, enc_blocks = make_blocks(3, "enc", seed=2, widths=widths)
    _, dec_blocks = make_blocks(3, "dec", seed=3, widths=widths)
    E, Dp = rand(rng, 1, 3, D), rand(rng, 1, 2, D)
    ext = [rand(rng, 1, 2, w) for w in widths]
    readout = Tensor(rng.normal(size=(1, 2, D)))

    def build(_):
        enc = fused_encoder_layer(base, 0, enc_blocks, E, ext, mode, u)
        dec = fused_decoder_layer(base, 0, dec_blocks, Dp, enc, ext, mode, u)
        return ag.sum_(ag.mul(dec, readout))

    enc = fused_encoder_layer(base, 0, enc_blocks, E, ext, mode, u)
    margins = []
    for part, T in (("enc", merge(base.encoder_trunk(0, E, None),
                                  external_stack(enc_blocks, ext, E, HEADS), mode, u)),
                    ("dec", merge(base.decoder_trunk(0, Dp, enc, None),
                                  external_stack(dec_blocks, ext, Dp, HEADS), mode, u))):
        margins.append(np.abs(T.data @ base.params[f"base.{part}.0.ffn.w1"].data).min())
    assert min(margins) > 0.05

    inputs = [E, Dp, *ext]
    for blocks in (enc_blocks, dec_blocks):
        inputs += [blocks[0]["wk"], blocks[1]["wv"], blocks[2]["wq"], blocks[1]["ln_g"]]
    inputs += [base.params["base.enc.0.self.wq"], base.params["base.dec.0.ffn.w1"]]
    errors = check_gradients(build, inputs, step=1e-3)
    assert max(errors) < 1e-4, [f"{e:.1e}" for e in errors]


# full model ------------------------------------------------------------------

@pytest.fixture(scope="module")
def fused_setup():
    providers = {}
    for kind in "BP":
        cfg = ProviderConfig(kind, hidden_dim=H, num_heads=2, num_layers=1, ffn_dim=8,
                             max_positions=16)
        providers[f"{kind}.s"] = ProviderModel(cfg, 24, seed=1, dtype=np.float64)
    return providers


def test_fusion_parameter_names(fused_setup):
    model = FusedModel(make_base(), fused_setup)
    model.add_blocks(parse_spec("multi-context"), stage=2)
    names = set(model.fusion_params)
    assert "fusion.2.enc0.0.wq" in names and "fusion.2.dec0.2.ln_b" in names
    assert model.fusion_params["fusion.2.enc0.2.wk"].shape == (H, D)
    assert model.chain_string() == "B_s(p,c) => B_s(c,n) => P_s(3p,c,3n)"
    with pytest.raises(ConfigError):
        model.add_blocks(parse_spec("B_s(c)"), stage=1)
    with pytest.raises(ConfigError):
        model.add_blocks(parse_spec("D_s(c)"), stage=3)
    # new blocks start with the small-init scheme
    assert np.abs(model.fusion_params["fusion.2.enc0.0.wq"].data).max() <= 0.04 + 1e-12


def _inputs(rng, n_ext):
    src = rng.integers(9, 24, size=(2, 5))
    tgt = rng.integers(9, 24, size=(2, 4))
    tgt[:, 0] = BOS_ID
    ext = [rng.normal(size=(2, 3, H)) for _ in range(n_ext)]
    return src, tgt, ext


def test_trunk_mode_with_zeroed_blocks_is_baseline_bit_for_bit(fused_setup):
    rng = np.random.default_rng(8)
    base = make_base(5)
    reference = base.forward(*_inputs(rng, 0)[:2]).data
    model = FusedModel(base, fused_setup)
    model.add_blocks(parse_spec("multi-context"), stage=2, seed=3)
    for name, t in model.fusion_params.items():
        if name.endswith((".wo", ".bo")):
            t.data = np.zeros_like(t.data)
    rng = np.random.default_rng(8)
    src, tgt, _ = _inputs(rng, 0)
    ext = [rng.normal(size=(2, 3, H)) for _ in range(3)]
    logits = model.forward(src, tgt, ext, TRUNK).data
    assert logits.tobytes() == reference.tobytes()


def test_model_without_blocks_is_baseline(fused_setup):
    rng = np.random.default_rng(10)
    base = make_base(6)
    src, tgt, _ = _inputs(rng, 0)
    a = FusedModel(base, fused_setup).forward(src, tgt).data
    assert a.tobytes() == base.forward(src, tgt).data.tobytes()


def test_drop_branch_forward_uses_per_layer_u(fused_setup):
    rng = np.random.default_rng(11)
    model = FusedModel(make_base(), fused_setup)
    model.add_blocks(parse_spec("bert-fused"), stage=2)
    src, tgt, ext = _inputs(rng, 1)
    trunk = model.forward(src, tgt, ext, TRUNK).data
    us = {("enc", 0): 0.9, ("dec", 0): 0.6}
    np.testing.assert_array_equal(model.forward(src, tgt, ext, DROP_BRANCH, us).data, trunk)
    us = {("enc", 0): 0.1, ("dec", 0): 0.6}
    assert not np.array_equal(model.forward(src, tgt, ext, DROP_BRANCH, us).data, trunk)
    with pytest.raises(ContractError):
        model.forward(src, tgt, [], AVERAGE)
