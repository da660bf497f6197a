"""Miniature context providers and their pretraining objectives.

Three kinds of provider encoders feed the fusion blocks:

* ``B``: masked-word encoder trained on masked tokens plus an adjacent-pair
  classifier over two segments.
* ``P``: masked-sentence encoder trained to decode the one sentence of a
  document window that was replaced by ``<msent>``.
* ``D``: context encoder with no pretraining, trained jointly with the fusion
  blocks.

B and P are frozen once fused training starts, so their outputs are computed
once per input sequence and cached.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError
from .notation import segment_ids
from .transformer import (TransformerConfig, attention_block, causal_mask, embed,
                          encoder_stack, feed_forward_block, final_norm, glorot,
                          init_attention, init_encoder_stack, init_ffn, linear, padding_mask,
                          select)
from .vocab import (BOS_ID, CLS, EOS_ID, MASK_ID, MSENT, MSENT_ID, PAD_ID, SEP, SPECIALS,
                    Vocab, pad_batch)

KINDS = ("B", "P", "D")
IGNORE = -100
MASK_FRACTION = 0.15


@dataclass(frozen=True)
class ProviderConfig:
    kind: str
    side: str = "s"
    hidden_dim: int = 64
    num_heads: int = 2
    num_layers: int = 2
    ffn_dim: int = 128
    max_positions: int = 96
    decoder_layers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown provider kind {self.kind!r}")
        if self.side not in ("s", "t"):
            raise ConfigError(f"unknown provider side {self.side!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")

    def to_dict(self) -> dict:
        return asdict(self)


class ProviderModel:
    """Encoder producing external embeddings, with its pretraining heads."""

    def __init__(self, config: ProviderConfig, vocab_size: int, tokenizer_id: str = "",
                 seed: int = 0, dtype=np.float32, params: dict | None = None):
        self.config = config
        self.vocab_size = vocab_size
        self.tokenizer_id = tokenizer_id
        self.dtype = np.dtype(dtype)
        self.prefix = f"provider.{config.kind}.{config.side}"
        self.frozen = False
        if params is None:
            params = {}
            self._init(params, np.random.default_rng(seed))
        self.params = params
        self._id = None

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    @property
    def max_positions(self) -> int:
        return self.config.max_positions

    def _enc_config(self) -> TransformerConfig:
        c = self.config
        return TransformerConfig(self.vocab_size, c.hidden_dim, c.num_heads, c.num_layers,
                                 c.ffn_dim, c.max_positions, 0.0)

    def _init(self, params: dict, rng) -> None:
        c, dt, H, V = self.config, self.dtype, self.config.hidden_dim, self.vocab_size
        init_encoder_stack(params, f"{self.prefix}.enc", self._enc_config(), rng, dt)
        if c.kind == "B":
            params[f"{self.prefix}.seg"] = Tensor(rng.normal(0, 0.5, (2, H)).astype(dt), True)
            params[f"{self.prefix}.mlm.w"] = Tensor(glorot(rng, H, V, dt), True)
            params[f"{self.prefix}.mlm.b"] = Tensor(np.zeros(V, dt), True)
            params[f"{self.prefix}.pair.w"] = Tensor(glorot(rng, H, 2, dt), True)
            params[f"{self.prefix}.pair.b"] = Tensor(np.zeros(2, dt), True)
        elif c.kind == "P":
            g = f"{self.prefix}.gsg"
            params[f"{g}.tok"] = Tensor(rng.normal(0, 1.0, (V, H)).astype(dt), True)
            params[f"{g}.pos"] = Tensor(rng.normal(0, 0.5, (c.max_positions, H)).astype(dt), True)
            for layer in range(c.decoder_layers):
                init_attention(params, f"{g}.{layer}.self", H, H, rng, dt)
                init_attention(params, f"{g}.{layer}.cross", H, H, rng, dt)
                init_ffn(params, f"{g}.{layer}.ffn", H, c.ffn_dim, rng, dt)
            params[f"{g}.final_g"] = Tensor(np.ones(H, dt), True)
            params[f"{g}.final_b"] = Tensor(np.zeros(H, dt), True)
            params[f"{g}.out.w"] = Tensor(glorot(rng, H, V, dt), True)
            params[f"{g}.out.b"] = Tensor(np.zeros(V, dt), True)

    # identity ------------------------------------------------------------
    @property
    def provider_id(self) -> str:
        """Stable id: prefix plus a hash of the current parameter bytes."""
        if self._id is None or not self.frozen:
            h = hashlib.sha256(self.prefix.encode())
            for name in sorted(self.params):
                h.update(name.encode())
                h.update(self.params[name].data.tobytes())
            self._id = f"{self.prefix}:{h.hexdigest()[:12]}"
        return self._id

    def freeze(self) -> None:
        self.frozen = True
        for t in self.params.values():
            t.requires_grad = False
        self._id = None

    # encoding ------------------------------------------------------------
    def _limit(self) -> int:
        return self.max_positions - (2 if self.kind == "B" else 0)

    def prepare(self, tokens: Sequence[str], vocab: Vocab) -> tuple:
        """Ids (and segment ids for B) ready for the encoder; truncates long inputs.

        Truncation drops tokens evenly from both ends so the middle of the
        window (the current sentence, for symmetric windows) survives.
        """
        tokens = list(tokens)
        limit = self._limit()
        if len(tokens) > limit:
            drop = len(tokens) - limit
            left = drop // 2
            tokens = tokens[left:len(tokens) - (drop - left)]
        if self.kind == "B":
            framed = [CLS] + tokens + [SEP]
            return vocab.encode(framed), segment_ids(framed)
        return vocab.encode(tokens), None

    def encode(self, ids, segs=None, train: bool = False, rng=None) -> Tensor:
        """Final-layer states ``(B, L, hidden)`` for padded id batches."""
        ids = np.asarray(ids, dtype=np.int64)
        extra = None
        if self.kind == "B":
            if segs is None:
                segs = np.zeros_like(ids)
            extra = ag.embedding(self.params[f"{self.prefix}.seg"], np.asarray(segs))
        c = self.config
        return encoder_stack(self.params, f"{self.prefix}.enc", ids, c.num_heads, c.num_layers,
                             0.0, rng if train else None, extra)

    def encode_batch(self, token_lists: Sequence[Sequence[str]], vocab: Vocab):
        """Padded encoder states plus key mask, for in-graph (D) use."""
        prepared = [self.prepare(t, vocab) for t in token_lists]
        ids = pad_batch([p[0] for p in prepared])
        segs = pad_batch([p[1] for p in prepared], pad_id=0) if self.kind == "B" else None
        states = self.encode(ids, segs)
        if self.kind == "B":
            states = ag.getitem(states, (slice(None), slice(1, -1)))
            ids = ids[:, 1:-1]
        return states, padding_mask(ids)

    def named_parameters(self) -> dict:
        return self.params

    def encoder_parameter_names(self) -> list:
        return [n for n in self.params if n.startswith(f"{self.prefix}.enc.")
                or n == f"{self.prefix}.seg"]


# ---------------------------------------------------------------------------
# cached embedding of context windows


class EmbeddingCache:
    """Single-writer, multi-reader map ``(provider id, token hash) -> array``."""

    def __init__(self):
        self._data: dict = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(provider: ProviderModel, tokens: Sequence[str]) -> tuple:
        digest = hashlib.sha1("\x1f".join(tokens).encode("utf-8")).hexdigest()
        return provider.provider_id, digest

    def get(self, key):
        value = self._data.get(key)
        if value is None:
            self.misses += 1
        else:
            self.hits += 1
        return value

    def put(self, key, value) -> None:
        with self._lock:
            self._data.setdefault(key, value)

    def __len__(self) -> int:
        return len(self._data)


_DEFAULT_CACHE = EmbeddingCache()


def embed_context(provider: ProviderModel, tokens: Sequence[str], vocab: Vocab,
                  cache: EmbeddingCache | None = None) -> np.ndarray:
    """Final-layer states ``(L, hidden)`` for one context window, no gradient."""
    return embed_contexts(provider, [tokens], vocab, cache)[0]


def embed_contexts(provider: ProviderModel, windows: Sequence[Sequence[str]], vocab: Vocab,
                   cache: EmbeddingCache | None = None, batch_size: int = 256) -> list:
    """Batched :func:`embed_context` over many windows, sharing the cache.

    Windows are encoded in batches of equal length, so the result for a window
    does not depend on which other windows it was batched with.
    """
    if provider.kind == "D":
        raise ContractError("scratch-context (D) providers are trained in-graph, not cached")
    cache = _DEFAULT_CACHE if cache is None else cache
    keys = [EmbeddingCache.key(provider, list(w)) for w in windows]
    out = [cache.get(k) for k in keys]
    todo = {}
    for i, (k, v) in enumerate(zip(keys, out)):
        if v is None:
            todo.setdefault(k, i)
    by_len: dict = {}
    prepared = {}
    for k, i in todo.items():
        ids, segs = provider.prepare(windows[i], vocab)
        prepared[k] = (ids, segs)
        by_len.setdefault(len(ids), []).append(k)
    for length in sorted(by_len):
        group = by_len[length]
        for start in range(0, len(group), batch_size):
            chunk = group[start:start + batch_size]
            ids = np.array([prepared[k][0] for k in chunk], dtype=np.int64)
            segs = (np.array([prepared[k][1] for k in chunk], dtype=np.int64)
                    if provider.kind == "B" else None)
            states = provider.encode(ids, segs).data
            if provider.kind == "B":
                states = states[:, 1:-1]
            for k, row in zip(chunk, states):
                arr = np.ascontiguousarray(row)
                arr.setflags(write=False)
                cache.put(k, arr)
    return [cache._data[k] for k in keys]


# ---------------------------------------------------------------------------
# masked-word objective


@dataclass
class MLMBatch:
    ids: np.ndarray          # (B, L) corrupted input
    segments: np.ndarray     # (B, L)
    targets: np.ndarray      # (B, L) original id at masked positions, IGNORE elsewhere
    pair_labels: np.ndarray  # (B,) 1 if segment B follows segment A


def mask_tokens(ids: Sequence[int], rng: np.random.Generator, vocab_size: int):
    """Select 15% of the non-special positions (at least one); 80/10/10 corruption."""
    ids = np.array(ids, dtype=np.int64)
    targets = np.full_like(ids, IGNORE)
    candidates = np.flatnonzero(ids >= len(SPECIALS))
    if len(candidates) == 0:
        return ids, targets
    n = max(1, int(round(MASK_FRACTION * len(candidates))))
    chosen = rng.choice(candidates, size=n, replace=False)
    targets[chosen] = ids[chosen]
    for pos in chosen:
        r = rng.random()
        if r < 0.8:
            ids[pos] = MASK_ID
        elif r < 0.9:
            ids[pos] = rng.integers(len(SPECIALS), vocab_size)
    return ids, targets


def make_mlm_batch(pairs: Sequence[tuple], vocab: Vocab, rng: np.random.Generator,
                   max_positions: int) -> MLMBatch:
    """``pairs`` holds ``(segment_a_tokens, segment_b_tokens, is_next)`` triples."""
    rows, segs, tgts, labels = [], [], [], []
    for a, b, label in pairs:
        framed = [CLS] + list(a) + [SEP] + list(b) + [SEP]
        framed = framed[:max_positions]
        ids, tg = mask_tokens(vocab.encode(framed), rng, len(vocab))
        rows.append(ids)
        segs.append(segment_ids(framed))
        tgts.append(tg)
        labels.append(int(label))
    return MLMBatch(pad_batch(rows), pad_batch(segs, pad_id=0), pad_batch(tgts, pad_id=IGNORE),
                    np.array(labels, dtype=np.int64))


def mlm_loss(token_logits, targets, pair_logits, pair_labels) -> Tensor:
    """Masked-token cross-entropy plus adjacent-pair cross-entropy."""
    targets = np.asarray(targets)
    if not (targets != IGNORE).any():
        raise ContractError("masked-word batch contains no masked tokens")
    word = ag.cross_entropy(token_logits, targets, ignore_index=IGNORE)
    pair = ag.cross_entropy(pair_logits, pair_labels)
    return ag.add(word, pair)


def mlm_forward(provider: ProviderModel, batch: MLMBatch, rng=None) -> Tensor:
    if provider.kind != "B":
        raise ContractError("masked-word pretraining needs a B provider")
    h = provider.encode(batch.ids, batch.segments, train=True, rng=rng)
    p = provider.prefix
    token_logits = linear(h, provider.params[f"{p}.mlm.w"], provider.params[f"{p}.mlm.b"])
    cls = ag.getitem(h, (slice(None), 0))
    pair_logits = linear(cls, provider.params[f"{p}.pair.w"], provider.params[f"{p}.pair.b"])
    return mlm_loss(token_logits, batch.targets, pair_logits, batch.pair_labels)


def pretrain_mlm_step(provider: ProviderModel, batch: MLMBatch, optimizer=None) -> float:
    """One optimisation step of the masked-word objective; returns the loss."""
    loss = mlm_forward(provider, batch)
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.data)


def sample_sentence_pairs(documents: Sequence[Sequence[Sequence[str]]], n: int,
                          rng: np.random.Generator) -> list:
    """Half adjacent pairs (label 1), half pairs from different documents (label 0)."""
    multi = [d for d in documents if len(d) > 1]
    if not multi:
        raise ContractError("pair sampling needs at least one multi-sentence document")
    out = []
    for i in range(n):
        doc = multi[rng.integers(len(multi))]
        j = int(rng.integers(len(doc) - 1))
        if i % 2 == 0:
            out.append((doc[j], doc[j + 1], 1))
        else:
            other = documents[rng.integers(len(documents))]
            if other is doc and len(documents) > 1:
                other = documents[(documents.index(doc) + 1) % len(documents)]
            out.append((doc[j], other[int(rng.integers(len(other)))], 0))
    return out


# ---------------------------------------------------------------------------
# masked-sentence objective


@dataclass
class GSGBatch:
    ids: np.ndarray       # (B, L) window with one <msent>
    tgt_in: np.ndarray    # (B, T) <s> + sentence
    tgt_out: np.ndarray   # (B, T) sentence + </s>


def make_gsg_example(sentences: Sequence[Sequence[str]], masked: int, window: int = 3) -> tuple:
    """Window of ``window`` sentences either side of ``masked``, that one replaced."""
    if len(sentences) < 2:
        raise ContractError("masked-sentence examples need a document of >= 2 sentences")
    if not 0 <= masked < len(sentences):
        raise ContractError(f"masked index {masked} outside document")
    lo, hi = max(0, masked - window), min(len(sentences), masked + window + 1)
    tokens = []
    for i in range(lo, hi):
        if tokens:
            tokens.append(SEP)
        tokens.extend([MSENT] if i == masked else sentences[i])
    return tokens, list(sentences[masked])


def make_gsg_batch(examples: Sequence[tuple], vocab: Vocab, max_positions: int) -> GSGBatch:
    rows, tin, tout = [], [], []
    for window_tokens, target in examples:
        ids = vocab.encode(window_tokens)
        if len(ids) > max_positions:
            # keep the mask token inside the truncated window
            m = ids.index(MSENT_ID) if MSENT_ID in ids else 0
            start = min(max(0, m - max_positions // 2), len(ids) - max_positions)
            ids = ids[start:start + max_positions]
        rows.append(ids)
        t = vocab.encode(target)[:max_positions - 1]
        tin.append([BOS_ID] + t)
        tout.append(t + [EOS_ID])
    return GSGBatch(pad_batch(rows), pad_batch(tin), pad_batch(tout))


def gsg_forward(provider: ProviderModel, batch: GSGBatch, rng=None) -> Tensor:
    if provider.kind != "P":
        raise ContractError("masked-sentence pretraining needs a P provider")
    ids = np.asarray(batch.ids)
    n_masks = (ids == MSENT_ID).sum(axis=1)
    if (n_masks != 1).any():
        raise ContractError("each masked-sentence input must contain exactly one <msent> token")
    c, g = provider.config, f"{provider.prefix}.gsg"
    memory = provider.encode(ids, train=True, rng=rng)
    mask = padding_mask(ids)
    y = embed(provider.params, g, batch.tgt_in)
    for layer in range(c.decoder_layers):
        y = attention_block(y, y, y, select(provider.params, f"{g}.{layer}.self"), c.num_heads,
                            causal_mask(y.shape[-2]))
        y = attention_block(memory, memory, y, select(provider.params, f"{g}.{layer}.cross"),
                            c.num_heads, mask)
        y = feed_forward_block(y, select(provider.params, f"{g}.{layer}.ffn"))
    y = final_norm(provider.params, g, y)
    logits = linear(y, provider.params[f"{g}.out.w"], provider.params[f"{g}.out.b"])
    return gsg_loss(logits, batch.tgt_out)


def gsg_loss(logits, tgt_out) -> Tensor:
    """Mean per-token cross-entropy of the masked sentence (padding ignored)."""
    return ag.cross_entropy(logits, tgt_out, ignore_index=PAD_ID)


def pretrain_gsg_step(provider: ProviderModel, batch: GSGBatch, optimizer=None) -> float:
    """One optimisation step of the masked-sentence objective; returns the loss."""
    loss = gsg_forward(provider, batch)
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.data)


def sample_gsg_examples(documents: Sequence[Sequence[Sequence[str]]], n: int,
                        rng: np.random.Generator, window: int = 3) -> list:
    multi = [d for d in documents if len(d) > 1]
    if not multi:
        raise ContractError("masked-sentence sampling needs multi-sentence documents")
    out = []
    for _ in range(n):
        doc = multi[rng.integers(len(multi))]
        out.append(make_gsg_example(doc, int(rng.integers(len(doc))), window))
    return out
