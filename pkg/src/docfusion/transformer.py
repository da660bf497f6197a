"""Sentence-level encoder-decoder transformer built on :mod:`docfusion.autograd`.

Every sublayer follows the attention-block form ``LayerNorm(f(x)) + x``: the
layer norm sits on the sublayer output, before the residual add. The fusion
module reuses these functions unchanged so that a fused model stripped of its
external blocks is the baseline, bit for bit.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names, which is
what the checkpoint format and the freeze masks operate on.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, InputError, ShapeError
from .vocab import BOS_ID, EOS_ID, PAD_ID

LN_EPS = 1e-6
ATTN_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln_g", "ln_b")


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int
    model_dim: int = 128
    num_heads: int = 4
    num_layers: int = 3
    ffn_dim: int = 512
    max_positions: int = 128
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if min(self.vocab_size, self.model_dim, self.num_layers, self.ffn_dim,
               self.max_positions) <= 0:
            raise ConfigError("transformer sizes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# initialisation


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def init_attention(params: dict, prefix: str, d_in: int, d: int, rng, dtype,
                   scheme: str = "glorot") -> None:
    """Adds the ten tensors of one attention block under ``prefix``.

    ``scheme="glorot"`` is used for the trunk; ``"trunc_normal"`` (std 0.02)
    for newly added fusion blocks.
    """
    def w(n_in, n_out):
        if scheme == "glorot":
            return glorot(rng, n_in, n_out, dtype)
        return truncated_normal(rng, (n_in, n_out), 0.02, dtype)

    params[f"{prefix}.wq"] = _param(w(d, d))
    params[f"{prefix}.bq"] = _param(np.zeros(d, dtype))
    params[f"{prefix}.wk"] = _param(w(d_in, d))
    params[f"{prefix}.bk"] = _param(np.zeros(d, dtype))
    params[f"{prefix}.wv"] = _param(w(d_in, d))
    params[f"{prefix}.bv"] = _param(np.zeros(d, dtype))
    params[f"{prefix}.wo"] = _param(w(d, d))
    params[f"{prefix}.bo"] = _param(np.zeros(d, dtype))
    params[f"{prefix}.ln_g"] = _param(np.ones(d, dtype))
    params[f"{prefix}.ln_b"] = _param(np.zeros(d, dtype))


def init_ffn(params: dict, prefix: str, d: int, ffn_dim: int, rng, dtype) -> None:
    params[f"{prefix}.w1"] = _param(glorot(rng, d, ffn_dim, dtype))
    params[f"{prefix}.b1"] = _param(np.zeros(ffn_dim, dtype))
    params[f"{prefix}.w2"] = _param(glorot(rng, ffn_dim, d, dtype))
    params[f"{prefix}.b2"] = _param(np.zeros(d, dtype))
    params[f"{prefix}.ln_g"] = _param(np.ones(d, dtype))
    params[f"{prefix}.ln_b"] = _param(np.zeros(d, dtype))


def init_encoder_stack(params: dict, prefix: str, cfg: TransformerConfig, rng, dtype) -> None:
    d = cfg.model_dim
    params[f"{prefix}.tok"] = _param(rng.normal(0.0, 1.0, (cfg.vocab_size, d)).astype(dtype))
    params[f"{prefix}.pos"] = _param(rng.normal(0.0, 0.5, (cfg.max_positions, d)).astype(dtype))
    for layer in range(cfg.num_layers):
        init_attention(params, f"{prefix}.{layer}.self", d, d, rng, dtype)
        init_ffn(params, f"{prefix}.{layer}.ffn", d, cfg.ffn_dim, rng, dtype)
    params[f"{prefix}.final_g"] = _param(np.ones(d, dtype))
    params[f"{prefix}.final_b"] = _param(np.zeros(d, dtype))


def select(params: Mapping[str, Tensor], prefix: str) -> dict:
    """Short-name view of the tensors under ``prefix.``."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# layer maths


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ag.matmul(x, w)
    return y if b is None else ag.add(y, b)


def _check_mask(mask, lq: int, lk: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim < 2 or mask.shape[-1] != lk or mask.shape[-2] not in (1, lq):
        raise ShapeError(f"attention mask shape {mask.shape} incompatible with ({lq}, {lk})")
    return mask


def multi_head_attention(keys, values, queries, w: Mapping[str, Tensor], num_heads: int,
                         mask=None) -> Tensor:
    """Scaled dot-product attention with per-head projections.

    Accepts unbatched ``(L, d)`` or batched ``(B, L, d)`` inputs. ``keys`` and
    ``values`` may have a width different from the queries; ``w["wk"]`` and
    ``w["wv"]`` map them to the model width. ``mask`` is boolean, ``True`` where
    attention is allowed, broadcastable to ``(B, Lq, Lk)``.
    """
    keys, values, queries = ag.as_tensor(keys), ag.as_tensor(values), ag.as_tensor(queries)
    unbatched = queries.ndim == 2
    if unbatched:
        keys = ag.reshape(keys, (1,) + keys.shape)
        values = ag.reshape(values, (1,) + values.shape)
        queries = ag.reshape(queries, (1,) + queries.shape)
    B, Lq, d = queries.shape
    Lk = keys.shape[1]
    if Lk == 0:
        raise ContractError("attention over an empty key sequence")
    if values.shape[1] != Lk:
        raise ShapeError(f"keys {keys.shape} and values {values.shape} differ in length")
    if w["wk"].shape[0] != keys.shape[-1] or w["wv"].shape[0] != values.shape[-1]:
        raise ShapeError(
            f"key/value width {keys.shape[-1]} does not match projection {w['wk'].shape}")
    if d % num_heads:
        raise ShapeError(f"model width {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    q = ag.transpose(ag.reshape(linear(queries, w["wq"], w["bq"]), (B, Lq, num_heads, dh)),
                     (0, 2, 1, 3))
    k = ag.transpose(ag.reshape(linear(keys, w["wk"], w["bk"]), (B, Lk, num_heads, dh)),
                     (0, 2, 3, 1))
    v = ag.transpose(ag.reshape(linear(values, w["wv"], w["bv"]), (B, Lk, num_heads, dh)),
                     (0, 2, 1, 3))
    scores = ag.scale(ag.matmul(q, k), 1.0 / math.sqrt(dh))
    if mask is not None:
        mask = _check_mask(mask, Lq, Lk)
        if mask.ndim == 2:
            mask = mask[None, None]
        elif mask.ndim == 3:
            mask = mask[:, None]
    weights = ag.softmax(scores, axis=-1, mask=mask)
    ctx = ag.reshape(ag.transpose(ag.matmul(weights, v), (0, 2, 1, 3)), (B, Lq, d))
    out = linear(ctx, w["wo"], w["bo"])
    if unbatched:
        out = ag.reshape(out, (Lq, d))
    return out


def attention_block(keys, values, queries, w: Mapping[str, Tensor], num_heads: int,
                    mask=None, dropout_rate: float = 0.0, rng=None) -> Tensor:
    """``LayerNorm(Attn(K, V, Q)) + Q``."""
    queries = ag.as_tensor(queries)
    if queries.shape[-1] != w["wq"].shape[0]:
        raise ShapeError(f"queries width {queries.shape[-1]} does not match model width")
    attn = multi_head_attention(keys, values, queries, w, num_heads, mask)
    attn = ag.dropout(attn, dropout_rate, rng)
    return ag.add(ag.layer_norm(attn, w["ln_g"], w["ln_b"], LN_EPS), queries)


def feed_forward_block(x: Tensor, w: Mapping[str, Tensor], dropout_rate: float = 0.0,
                       rng=None) -> Tensor:
    """``LayerNorm(FeedForward(x)) + x`` with a ReLU hidden layer."""
    h = ag.relu(linear(x, w["w1"], w["b1"]))
    h = ag.dropout(linear(h, w["w2"], w["b2"]), dropout_rate, rng)
    return ag.add(ag.layer_norm(h, w["ln_g"], w["ln_b"], LN_EPS), x)


def embed(params: Mapping[str, Tensor], prefix: str, ids: np.ndarray, extra=None) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = params[f"{prefix}.tok"].shape[0]
    max_pos = params[f"{prefix}.pos"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(f"token id outside vocabulary of size {vocab}")
    if ids.shape[-1] > max_pos:
        raise InputError(f"sequence of length {ids.shape[-1]} exceeds max_positions {max_pos}")
    x = ag.embedding(params[f"{prefix}.tok"], ids)
    x = ag.add(x, ag.embedding(params[f"{prefix}.pos"], np.arange(ids.shape[-1])))
    if extra is not None:
        x = ag.add(x, extra)
    return x


def final_norm(params, prefix: str, x: Tensor) -> Tensor:
    return ag.layer_norm(x, params[f"{prefix}.final_g"], params[f"{prefix}.final_b"], LN_EPS)


def padding_mask(ids: np.ndarray) -> np.ndarray:
    """``(B, 1, L)`` mask that hides padded key positions."""
    return (np.asarray(ids) != PAD_ID)[:, None, :]


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def encoder_stack(params, prefix: str, ids: np.ndarray, num_heads: int, num_layers: int,
                  dropout_rate: float = 0.0, rng=None, extra=None) -> Tensor:
    """Plain encoder used by the baseline and by context providers."""
    x = embed(params, prefix, ids, extra)
    mask = padding_mask(ids)
    for layer in range(num_layers):
        x = attention_block(x, x, x, select(params, f"{prefix}.{layer}.self"), num_heads, mask,
                            dropout_rate, rng)
        x = feed_forward_block(x, select(params, f"{prefix}.{layer}.ffn"), dropout_rate, rng)
    return final_norm(params, prefix, x)


# ---------------------------------------------------------------------------
# baseline model


class Transformer:
    """Baseline encoder-decoder. All parameters are named ``base.*``."""

    prefix = "base"

    def __init__(self, config: TransformerConfig, seed: int = 0, dtype=np.float32,
                 params: dict | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        if params is None:
            params = {}
            rng = np.random.default_rng(seed)
            self.init_params(params, config, rng, self.dtype)
        self.params = params

    @staticmethod
    def init_params(params: dict, cfg: TransformerConfig, rng, dtype) -> None:
        d = cfg.model_dim
        init_encoder_stack(params, "base.enc", cfg, rng, dtype)
        params["base.dec.tok"] = _param(rng.normal(0.0, 1.0, (cfg.vocab_size, d)).astype(dtype))
        params["base.dec.pos"] = _param(rng.normal(0.0, 0.5, (cfg.max_positions, d)).astype(dtype))
        for layer in range(cfg.num_layers):
            init_attention(params, f"base.dec.{layer}.self", d, d, rng, dtype)
            init_attention(params, f"base.dec.{layer}.cross", d, d, rng, dtype)
            init_ffn(params, f"base.dec.{layer}.ffn", d, cfg.ffn_dim, rng, dtype)
        params["base.dec.final_g"] = _param(np.ones(d, dtype))
        params["base.dec.final_b"] = _param(np.zeros(d, dtype))
        params["base.out.w"] = _param(glorot(rng, d, cfg.vocab_size, dtype))
        params["base.out.b"] = _param(np.zeros(cfg.vocab_size, dtype))

    # Layer pieces shared with FusedModel.
    def encoder_trunk(self, layer: int, x: Tensor, src_mask, rng=None) -> Tensor:
        cfg = self.config
        return attention_block(x, x, x, select(self.params, f"base.enc.{layer}.self"),
                               cfg.num_heads, src_mask, cfg.dropout_rate, rng)

    def encoder_ffn(self, layer: int, x: Tensor, rng=None) -> Tensor:
        return feed_forward_block(x, select(self.params, f"base.enc.{layer}.ffn"),
                                  self.config.dropout_rate, rng)

    def decoder_trunk(self, layer: int, y: Tensor, memory: Tensor, src_mask, rng=None) -> Tensor:
        cfg = self.config
        self_mask = causal_mask(y.shape[-2])
        y = attention_block(y, y, y, select(self.params, f"base.dec.{layer}.self"),
                            cfg.num_heads, self_mask, cfg.dropout_rate, rng)
        return attention_block(memory, memory, y, select(self.params, f"base.dec.{layer}.cross"),
                               cfg.num_heads, src_mask, cfg.dropout_rate, rng)

    def decoder_ffn(self, layer: int, y: Tensor, rng=None) -> Tensor:
        return feed_forward_block(y, select(self.params, f"base.dec.{layer}.ffn"),
                                  self.config.dropout_rate, rng)

    def embed_source(self, src: np.ndarray) -> Tensor:
        return embed(self.params, "base.enc", src)

    def embed_target(self, tgt: np.ndarray) -> Tensor:
        return embed(self.params, "base.dec", tgt)

    def project(self, y: Tensor) -> Tensor:
        y = final_norm(self.params, "base.dec", y)
        return linear(y, self.params["base.out.w"], self.params["base.out.b"])

    # Public API.
    def encode(self, src, rng=None) -> Tensor:
        """Encoder states ``(B, L, model_dim)`` (or ``(L, d)`` for a 1-D input)."""
        src, single = _batchify(src)
        mask = padding_mask(src)
        x = self.embed_source(src)
        for layer in range(self.config.num_layers):
            x = self.encoder_trunk(layer, x, mask, rng)
            x = self.encoder_ffn(layer, x, rng)
        x = final_norm(self.params, "base.enc", x)
        return ag.reshape(x, x.shape[1:]) if single else x

    def decode(self, memory, src, tgt_prefix, rng=None) -> Tensor:
        """Logits ``(B, T, vocab)`` for every prefix position of ``tgt_prefix``."""
        src, single = _batchify(src)
        tgt_prefix, _ = _batchify(tgt_prefix)
        memory = ag.as_tensor(memory)
        if memory.ndim == 2:
            memory = ag.reshape(memory, (1,) + memory.shape)
        mask = padding_mask(src)
        y = self.embed_target(tgt_prefix)
        for layer in range(self.config.num_layers):
            y = self.decoder_trunk(layer, y, memory, mask, rng)
            y = self.decoder_ffn(layer, y, rng)
        logits = self.project(y)
        return ag.reshape(logits, logits.shape[1:]) if single else logits

    def forward(self, src, tgt_in, rng=None) -> Tensor:
        return self.decode(self.encode(src, rng), src, tgt_in, rng)

    def named_parameters(self) -> dict:
        return self.params


def _batchify(ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        return ids[None, :], True
    return ids, False


def teacher_forcing_io(targets: list[list[int]]):
    """Decoder inputs (``<s>`` + target) and outputs (target + ``</s>``), padded."""
    from .vocab import pad_batch
    tgt_in = pad_batch([[BOS_ID] + list(t) for t in targets])
    tgt_out = pad_batch([list(t) + [EOS_ID] for t in targets])
    return tgt_in, tgt_out


# ---------------------------------------------------------------------------
# decoding


def greedy_decode(step_fn, batch_size: int, max_len: int) -> list[list[int]]:
    """Batched greedy search.

    ``step_fn(prefix_ids)`` returns logits ``(B, T, V)`` for the ``(B, T)``
    prefix; only the last position is used. Decoding stops per row at ``</s>``.
    """
    prefix = np.full((batch_size, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(batch_size, dtype=bool)
    for _ in range(max_len):
        logits = step_fn(prefix).data[:, -1, :]
        nxt = logits.argmax(axis=-1)
        nxt = np.where(done, PAD_ID, nxt)
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        done |= nxt == EOS_ID
        if done.all():
            break
    out = []
    for row in prefix[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS_ID, PAD_ID):
                break
            toks.append(int(t))
        out.append(toks)
    return out


def beam_decode(step_fn, max_len: int, beam: int = 5, length_penalty: float = 1.0) -> list[int]:
    """Single-example beam search; ``step_fn`` accepts a ``(k, T)`` prefix batch."""
    beams = [([BOS_ID], 0.0)]
    finished = []
    for _ in range(max_len):
        prefix = np.array([b[0] for b in beams], dtype=np.int64)
        logits = step_fn(prefix).data[:, -1, :].astype(np.float64)
        logp = logits - logits.max(axis=-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
        cand = []
        for i, (toks, score) in enumerate(beams):
            top = np.argsort(-logp[i], kind="stable")[:beam]
            cand.extend((toks + [int(t)], score + float(logp[i, t])) for t in top)
        cand.sort(key=lambda c: -c[1])
        beams = []
        for toks, score in cand:
            if toks[-1] == EOS_ID:
                finished.append((toks, score / (len(toks) - 1) ** length_penalty))
            else:
                beams.append((toks, score))
            if len(beams) == beam:
                break
        if not beams or len(finished) >= beam:
            break
    finished.extend((t, s / (len(t) - 1) ** length_penalty) for t, s in beams)
    best = max(finished, key=lambda c: c[1])[0]
    return [t for t in best[1:] if t != EOS_ID]
