"""Parallel attention stack over external embeddings.

Each encoder and decoder layer of the baseline gets a branch made of one
attention block per element of the fusion chain. The first block queries the
layer input; each later block queries the previous block's output. The branch
output ``S`` and the trunk output ``R`` are merged before the feed-forward
sublayer: one of them is picked at random during training (drop-branch), and
their mean is taken otherwise.

Fusion parameters are named ``fusion.<stage>.<enc|dec><layer>.<chain index>.*``
so that a stage's blocks can be frozen or trained as a group.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .notation import EmbeddingSpec, format_chain
from .providers import ProviderModel
from .transformer import (Transformer, _batchify, attention_block, final_norm, init_attention,
                          padding_mask, select)

DROP_BRANCH, AVERAGE, TRUNK = "drop-branch", "average", "trunk"
MODES = (DROP_BRANCH, AVERAGE, TRUNK)


def attn_block(K, V, Q, params: Mapping[str, Tensor], num_heads: int, mask=None) -> Tensor:
    """``LayerNorm(Attn(K, V, Q)) + Q`` over an external key/value sequence."""
    K = ag.as_tensor(K)
    if K.shape[-1] != params["wk"].shape[0]:
        raise ShapeError(f"external width {K.shape[-1]} does not match block input "
                         f"{params['wk'].shape[0]}")
    return attention_block(K, V, Q, params, num_heads, mask)


def drop_branch(M, N, u: float) -> Tensor:
    """``M`` when ``u >= 0.5`` else ``N``; only the chosen branch gets gradients."""
    M, N = ag.as_tensor(M), ag.as_tensor(N)
    if M.shape != N.shape:
        raise ShapeError(f"drop_branch shapes differ: {M.shape} vs {N.shape}")
    if not 0.0 <= u < 1.0:
        raise ContractError(f"u={u} outside [0, 1)")
    return M if u >= 0.5 else N


def merge(R: Tensor, S: Tensor, mode: str, u: float | None = None) -> Tensor:
    if mode == DROP_BRANCH:
        if u is None:
            raise ContractError("drop-branch merge needs u")
        return drop_branch(R, S, u)
    if u is not None:
        raise ContractError(f"u is only meaningful in {DROP_BRANCH} mode")
    if mode == AVERAGE:
        if R.shape != S.shape:
            raise ShapeError(f"cannot average shapes {R.shape} and {S.shape}")
        return ag.scale(ag.add(R, S), 0.5)
    if mode == TRUNK:
        return R
    raise ConfigError(f"unknown merge mode {mode!r}")


@dataclass
class External:
    """External embeddings for one chain element: ``(B, L, H)`` states and key mask."""

    states: Tensor
    mask: np.ndarray | None = None


def _as_external(x) -> External:
    if isinstance(x, External):
        return x
    return External(ag.as_tensor(x))


def external_stack(blocks: Sequence[Mapping[str, Tensor]], externals: Sequence, queries: Tensor,
                   num_heads: int) -> Tensor:
    """``S^1 = Blk(X1, X1, Q)``, ``S^k = Blk(Xk, Xk, S^(k-1))``; returns the last."""
    out = queries
    for w, ext in zip(blocks, externals):
        ext = _as_external(ext)
        out = attn_block(ext.states, ext.states, out, w, num_heads, ext.mask)
    return out


def _check_layer_args(blocks, externals, mode, u):
    if not blocks:
        raise ContractError("fused layer without external blocks; use the baseline layer")
    if len(externals) != len(blocks):
        raise ContractError(f"{len(externals)} externals for a chain of {len(blocks)}")
    if (mode == DROP_BRANCH) != (u is not None):
        raise ContractError("u must be given exactly when mode is drop-branch")


def fused_encoder_layer(base: Transformer, layer: int, blocks: Sequence[Mapping[str, Tensor]],
                        E_prev: Tensor, externals: Sequence, mode: str = AVERAGE,
                        u: float | None = None, src_mask=None, rng=None) -> Tensor:
    """One encoder layer: trunk self-attention beside the external stack."""
    _check_layer_args(blocks, externals, mode, u)
    R = base.encoder_trunk(layer, E_prev, src_mask, rng)
    S = external_stack(blocks, externals, E_prev, base.config.num_heads)
    T = merge(R, S, mode, u)
    return base.encoder_ffn(layer, T, rng)


def fused_decoder_layer(base: Transformer, layer: int, blocks: Sequence[Mapping[str, Tensor]],
                        D_prev: Tensor, encoder_out: Tensor, externals: Sequence,
                        mode: str = AVERAGE, u: float | None = None, src_mask=None,
                        rng=None) -> Tensor:
    """One decoder layer: the (causal self -> cross) trunk beside the external stack."""
    _check_layer_args(blocks, externals, mode, u)
    R = base.decoder_trunk(layer, D_prev, encoder_out, src_mask, rng)
    S = external_stack(blocks, externals, D_prev, base.config.num_heads)
    T = merge(R, S, mode, u)
    return base.decoder_ffn(layer, T, rng)


@dataclass(frozen=True)
class ChainElement:
    spec: EmbeddingSpec
    stage: int
    index: int
    provider_dim: int


class FusedModel:
    """Baseline transformer plus ordered external attention blocks per layer."""

    def __init__(self, base: Transformer, providers: Mapping[str, ProviderModel] | None = None):
        self.base = base
        self.providers = dict(providers or {})
        self.elements: list = []
        self.fusion_params: dict = {}

    @property
    def config(self):
        return self.base.config

    @property
    def chain(self) -> tuple:
        return tuple(e.spec for e in self.elements)

    def chain_string(self) -> str:
        return format_chain(self.chain) if self.elements else "-"

    def provider_for(self, spec: EmbeddingSpec) -> ProviderModel:
        try:
            return self.providers[spec.provider_key]
        except KeyError:
            raise ConfigError(f"no provider loaded for {spec} (needs {spec.provider_key})") from None

    def block_prefix(self, element: ChainElement, part: str, layer: int) -> str:
        return f"fusion.{element.stage}.{part}{layer}.{element.index}"

    def add_blocks(self, specs: Sequence[EmbeddingSpec], stage: int, seed: int = 0) -> list:
        """Append chain elements added in ``stage``; new blocks use std-0.02 init."""
        if stage not in (2, 3):
            raise ConfigError("external blocks are added in stage 2 or 3")
        rng = np.random.default_rng(seed)
        added = []
        d, dt = self.config.model_dim, self.base.dtype
        for spec in specs:
            provider = self.provider_for(spec)
            el = ChainElement(spec, stage, len(self.elements), provider.hidden_dim)
            for part in ("enc", "dec"):
                for layer in range(self.config.num_layers):
                    init_attention(self.fusion_params, self.block_prefix(el, part, layer),
                                   provider.hidden_dim, d, rng, dt, scheme="trunc_normal")
            self.elements.append(el)
            added.append(el)
        return added

    def blocks(self, part: str, layer: int) -> list:
        return [select(self.fusion_params, self.block_prefix(el, part, layer))
                for el in self.elements]

    def named_parameters(self) -> dict:
        out = dict(self.base.params)
        out.update(self.fusion_params)
        for key in sorted(self.providers):
            out.update(self.providers[key].params)
        return out

    # forward ---------------------------------------------------------------
    def _externals(self, externals):
        externals = [_as_external(x) for x in (externals or [])]
        if len(externals) != len(self.elements):
            raise ContractError(f"expected {len(self.elements)} externals, got {len(externals)}")
        return externals

    def encode(self, src, externals=None, mode: str = AVERAGE, us=None, rng=None) -> Tensor:
        src, _ = _batchify(src)
        externals = self._externals(externals)
        mask = padding_mask(src)
        x = self.base.embed_source(src)
        for layer in range(self.config.num_layers):
            if self.elements:
                u = us[("enc", layer)] if mode == DROP_BRANCH else None
                x = fused_encoder_layer(self.base, layer, self.blocks("enc", layer), x,
                                        externals, mode, u, mask, rng)
            else:
                x = self.base.encoder_ffn(layer, self.base.encoder_trunk(layer, x, mask, rng), rng)
        return final_norm(self.base.params, "base.enc", x)

    def decode(self, memory, src, tgt_in, externals=None, mode: str = AVERAGE, us=None,
               rng=None) -> Tensor:
        src, _ = _batchify(src)
        tgt_in, _ = _batchify(tgt_in)
        externals = self._externals(externals)
        mask = padding_mask(src)
        y = self.base.embed_target(tgt_in)
        for layer in range(self.config.num_layers):
            if self.elements:
                u = us[("dec", layer)] if mode == DROP_BRANCH else None
                y = fused_decoder_layer(self.base, layer, self.blocks("dec", layer), y, memory,
                                        externals, mode, u, mask, rng)
            else:
                y = self.base.decoder_ffn(
                    layer, self.base.decoder_trunk(layer, y, memory, mask, rng), rng)
        return self.base.project(y)

    def forward(self, src, tgt_in, externals=None, mode: str = AVERAGE, us=None, rng=None):
        memory = self.encode(src, externals, mode, us, rng)
        return self.decode(memory, src, tgt_in, externals, mode, us, rng)

    def sample_us(self, rng: np.random.Generator) -> dict:
        """One ``u`` per fused layer for a training step, shared across the batch."""
        return {(part, layer): float(rng.random())
                for part in ("enc", "dec") for layer in range(self.config.num_layers)}

    def context_providers(self) -> list:
        return [self.provider_for(s) for s in self.chain]
