import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import identity_attention
from docfusion import autograd as ag
from docfusion.errors import ConfigError, ContractError, InputError, ShapeError
from docfusion.training import Adam, OptimizerConfig
from docfusion.transformer import (Transformer, TransformerConfig, beam_decode, causal_mask,
                                   greedy_decode, multi_head_attention, teacher_forcing_io)
from docfusion.vocab import BOS_ID, PAD_ID, pad_batch

TINY = TransformerConfig(vocab_size=20, model_dim=8, num_heads=2, num_layers=2, ffn_dim=16,
                         max_positions=12, dropout_rate=0.0)


@pytest.fixture(scope="module")
def tiny():
    return Transformer(TINY, seed=1, dtype=np.float64)


# attention -------------------------------------------------------------------

def test_attention_to_self_returns_value():
    out = multi_head_attention([[1.0, 0.0]], [[1.0, 0.0]], [[1.0, 0.0]], identity_attention(2), 1)
    np.testing.assert_allclose(out.data, [[1.0, 0.0]])


def test_attention_scalar_hand_computation():
    K = V = np.array([[0.0], [10.0]])
    out = multi_head_attention(K, V, [[10.0]], identity_attention(1), 1)
    w = np.exp([0.0, 100.0] - np.float64(100.0))
    w /= w.sum()
    assert out.data[0, 0] == pytest.approx(w @ [0.0, 10.0], rel=1e-15)
    assert out.data[0, 0] == pytest.approx(10.0, abs=1e-12)


def test_causal_mask_hides_later_keys():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    w = identity_attention(4)
    base = multi_head_attention(x, x, x, w, 2, causal_mask(3)).data
    y = x.copy()
    y[1:] += rng.normal(size=(2, 4))
    # query 0 keeps its own row; only keys 1-2 change
    out = multi_head_attention(y, y, x, w, 2, causal_mask(3)).data
    np.testing.assert_array_equal(out[0], base[0])


def test_attention_projects_wider_keys():
    w = identity_attention(2, d_in=3)
    out = multi_head_attention(np.ones((4, 3)), np.ones((4, 3)), np.zeros((2, 2)), w, 1)
    assert out.shape == (2, 2)


def test_attention_errors():
    w = identity_attention(2)
    with pytest.raises(ContractError):
        multi_head_attention(np.zeros((0, 2)), np.zeros((0, 2)), np.ones((1, 2)), w, 1)
    with pytest.raises(ShapeError):
        multi_head_attention(np.ones((3, 2)), np.ones((3, 2)), np.ones((2, 2)), w, 1,
                             mask=np.ones((2, 4), dtype=bool))


# config ------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        TransformerConfig(vocab_size=10, model_dim=10, num_heads=3)
    with pytest.raises(ConfigError):
        TransformerConfig(vocab_size=0)
    with pytest.raises(ConfigError):
        TransformerConfig(vocab_size=10, dropout_rate=1.0)


def test_all_parameters_are_base_prefixed(tiny):
    assert all(n.startswith("base.") for n in tiny.named_parameters())


# encode / decode -----------------------------------------------------------------

def test_bos_prefix_gives_vocab_sized_logits(tiny):
    src = np.array([9, 10, 11])
    logits = tiny.decode(tiny.encode(src), src, [BOS_ID])
    assert logits.shape == (1, TINY.vocab_size)
    probs = ag.softmax(logits, axis=-1).data
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_encode_decode_deterministic(tiny):
    src = np.array([[9, 10, 11, 12]])
    tgt = np.array([[BOS_ID, 13, 14]])
    a = tiny.forward(src, tgt).data
    b = tiny.forward(src, tgt).data
    assert a.tobytes() == b.tobytes()


def test_out_of_vocabulary_id_is_input_error(tiny):
    with pytest.raises(InputError):
        tiny.encode(np.array([9, TINY.vocab_size]))
    with pytest.raises(InputError):
        tiny.encode(np.arange(TINY.max_positions + 1) % 10 + 9)


@settings(max_examples=25, deadline=None)
@given(t=st.integers(0, 5), data=st.data())
def test_decoder_is_causal(t, data):
    model = Transformer(TINY, seed=1, dtype=np.float64)
    rng = np.random.default_rng(t)
    src = rng.integers(9, 20, size=(1, 5))
    tgt = rng.integers(9, 20, size=(1, 7))
    tgt[0, 0] = BOS_ID
    changed = tgt.copy()
    later = data.draw(st.lists(st.integers(9, 19), min_size=6 - t, max_size=6 - t))
    changed[0, t + 1:] = later
    a = model.forward(src, tgt).data[0, :t + 1]
    b = model.forward(src, changed).data[0, :t + 1]
    np.testing.assert_array_equal(a, b)


def test_padding_in_batch_does_not_change_rows(tiny):
    short, long_ = [9, 10], [11, 12, 13, 14]
    batched = tiny.encode(pad_batch([short, long_])).data
    alone = tiny.encode(np.array(short)).data
    np.testing.assert_allclose(batched[0, :2], alone, atol=1e-12)


# decoding ------------------------------------------------------------------------

def _memorise(pairs, vocab_size, steps=300):
    cfg = TransformerConfig(vocab_size, 32, 2, 1, 64, 16, 0.0)
    model = Transformer(cfg, seed=0, dtype=np.float64)
    opt = Adam(model.params, OptimizerConfig(lr=1e-2, warmup_steps=30, label_smoothing=0.0))
    src = pad_batch([p[0] for p in pairs])
    tgt_in, tgt_out = teacher_forcing_io([p[1] for p in pairs])
    for _ in range(steps):
        loss = ag.cross_entropy(model.forward(src, tgt_in), tgt_out, ignore_index=PAD_ID)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model, src


def test_greedy_decode_memorises_fifty_pairs():
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(50):
        s = [int(x) for x in rng.integers(9, 30, size=int(rng.integers(3, 6)))]
        pairs.append((s, [(t * 7) % 21 + 9 for t in reversed(s)]))
    model, src = _memorise(pairs, 30)
    memory = model.encode(src)
    out = greedy_decode(lambda p: model.decode(memory, src, p), len(pairs), 10)
    exact = sum(o == p[1] for o, p in zip(out, pairs))
    assert exact / len(pairs) >= 0.95
    # beam search agrees on a confidently memorised example
    one = src[:1]
    mem1 = model.encode(one)
    beam = beam_decode(lambda p: model.decode(ag.Tensor(np.repeat(mem1.data, len(p), 0)),
                                              np.repeat(one, len(p), 0), p), 10, beam=3)
    assert beam == out[0]


def test_greedy_decode_stops_at_max_len():
    vocab = 12

    def step(prefix):
        logits = np.zeros(prefix.shape + (vocab,))
        logits[..., 9] = 1.0  # never emits </s>
        return ag.Tensor(logits)

    out = greedy_decode(step, 2, 4)
    assert out == [[9] * 4, [9] * 4]
