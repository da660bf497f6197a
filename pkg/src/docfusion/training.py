"""Staged training with prefix freeze masks and checkpoint averaging.

Stage 1 trains the baseline (``base.``). Stage 2 restores it, adds the fusion
chain and trains only ``fusion.2.`` (plus a jointly trained ``provider.D.``
encoder when the chain uses one). Stage 3 adds further blocks and trains only
``fusion.3.``. Every parameter is either trainable or frozen in a stage, and
frozen arrays are never written.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .checkpoint import CheckpointRecord, snapshot
from .data import Corpus, sample_batches
from .errors import ConfigError, InputError
from .features import Featurizer
from .fusion import AVERAGE, DROP_BRANCH, FusedModel
from .vocab import PAD_ID

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    label_smoothing: float = 0.1
    batch_size: int = 64

    def to_dict(self) -> dict:
        return asdict(self)


def inverse_sqrt_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warm-up to ``peak`` at ``warmup`` steps, then ``peak*sqrt(warmup/step)``."""
    step = max(step, 1)
    warmup = max(warmup, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    """Adam over a fixed set of named tensors; state exists only for those."""

    def __init__(self, params: Mapping[str, ag.Tensor], config: OptimizerConfig):
        self.params = dict(params)
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> float:
        c = self.config
        self.t += 1
        lr = inverse_sqrt_lr(self.t, c.lr, c.warmup_steps)
        b1, b2 = c.beta1, c.beta2
        corr1, corr2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p._grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (lr / corr1) * m / (np.sqrt(v / corr2) + c.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)
        return lr


# ---------------------------------------------------------------------------
# freeze masks and stage plans


def _matches(name: str, prefixes: Iterable[str]) -> bool:
    return any(name.startswith(p) for p in prefixes)


def apply_freeze_mask(named_params: Mapping[str, ag.Tensor], trainable_prefixes: Sequence[str]) -> dict:
    """Mark parameters under ``trainable_prefixes`` trainable and freeze the rest.

    Returns the trainable view handed to the optimizer. A prefix that matches
    nothing is treated as a typo.
    """
    for prefix in trainable_prefixes:
        if not any(n.startswith(prefix) for n in named_params):
            raise ConfigError(f"prefix {prefix!r} matches no parameter")
    trainable = {}
    for name, tensor in named_params.items():
        on = _matches(name, trainable_prefixes)
        tensor.requires_grad = on
        tensor.zero_grad()
        if on:
            trainable[name] = tensor
    if not trainable:
        raise ConfigError("freeze mask leaves no trainable parameters")
    return trainable


@dataclass
class StagePlan:
    stage: int
    trainable: tuple
    frozen: tuple
    data: str = "sentence"           # sentence | document
    additions: tuple = ()            # specs added to the chain in this stage
    in_domain_fraction: float = 1.0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if set(self.trainable) & set(self.frozen):
            raise ConfigError("trainable and frozen prefixes overlap")
        if self.data not in ("sentence", "document"):
            raise ConfigError("data selector must be 'sentence' or 'document'")
        if self.stage == 1 and (self.additions or any(p.startswith("fusion.") for p in self.trainable)):
            raise ConfigError("stage 1 has no fusion parameters")
        if self.stage == 3 and any(p != "fusion.3." for p in self.trainable):
            raise ConfigError("stage 3 trains only its newly added blocks")

    def check_cover(self, names: Iterable[str]) -> None:
        for name in names:
            t, f = _matches(name, self.trainable), _matches(name, self.frozen)
            if t == f:
                raise ConfigError(f"parameter {name} is {'both' if t else 'neither'} "
                                  f"trainable and frozen in stage {self.stage}")

    def to_dict(self) -> dict:
        from .notation import format_chain
        return {"stage": self.stage, "trainable": list(self.trainable),
                "frozen": list(self.frozen), "data": self.data,
                "additions": format_chain(self.additions) if self.additions else "",
                "in_domain_fraction": self.in_domain_fraction}


def plan_stage(stage: int, additions: Sequence = (), existing_chain: Sequence = (),
               in_domain_fraction: float = 1.0) -> StagePlan:
    """Default plan: train exactly the parameters introduced by this stage."""
    additions = tuple(additions)
    chain = tuple(existing_chain) + additions
    if stage == 1:
        return StagePlan(1, ("base.",), ("provider.",), "sentence", (), in_domain_fraction)
    uses_context = any(s.uses_context for s in chain)
    data = "document" if uses_context else "sentence"
    trainable = [f"fusion.{stage}."]
    if stage == 2 and any(s.model == "D" for s in additions):
        trainable.append("provider.D.")
    frozen = ["base.", "provider.B.", "provider.P."]
    if "provider.D." not in trainable:
        frozen.append("provider.D.")
    if stage == 3:
        frozen.append("fusion.2.")
    return StagePlan(stage, tuple(trainable), tuple(frozen), data, additions, in_domain_fraction)


# ---------------------------------------------------------------------------
# the stage loop


def batch_loss(model: FusedModel, featurizer: Featurizer, records, smoothing: float,
               mode: str = AVERAGE, us=None, rng=None) -> ag.Tensor:
    batch = featurizer.batch(records, model)
    logits = model.forward(batch.src, batch.tgt_in, batch.externals, mode, us, rng)
    return ag.cross_entropy(logits, batch.tgt_out, smoothing, ignore_index=PAD_ID)


def evaluation_loss(model: FusedModel, featurizer: Featurizer, records, batch_size: int = 128,
                    mode: str = AVERAGE) -> float:
    """Token-weighted mean cross-entropy (no smoothing) in inference mode."""
    total, count = 0.0, 0
    records = list(records)
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        loss = batch_loss(model, featurizer, chunk, 0.0, mode)
        n = sum(len(r.target) + 1 for r in chunk)
        total += float(loss.data) * n
        count += n
    return total / max(count, 1)


@dataclass
class StageResult:
    checkpoints: list
    losses: list = field(default_factory=list)


def run_stage(plan: StagePlan, model: FusedModel, corpus: Corpus, featurizer: Featurizer,
              optimizer: OptimizerConfig, steps: int, eval_every: int = 0, seed: int = 0,
              validate: Callable[[FusedModel], float] | None = None,
              metadata: Mapping | None = None) -> StageResult:
    """Train the plan's trainable parameters for ``steps`` steps.

    A checkpoint (with the ``validate`` score, if given) is taken every
    ``eval_every`` steps and after the last step. With ``steps == 0`` the
    single returned checkpoint equals the input model.
    """
    named = model.named_parameters()
    missing = [a for a in plan.additions if a not in model.chain]
    if missing:
        raise ConfigError(f"plan additions not in the model chain: {missing}")
    if plan.stage > 1 and not any(n.startswith(f"fusion.{plan.stage}.") for n in named):
        raise ConfigError(f"stage {plan.stage} plan but the model has no fusion.{plan.stage}. blocks")
    plan.check_cover(named)
    trainable = apply_freeze_mask(named, plan.trainable)
    adam = Adam(trainable, optimizer)
    stream_corpus = corpus.document_stream() if plan.data == "document" else corpus
    if len(stream_corpus) == 0:
        raise InputError(f"stage {plan.stage} has no {plan.data}-level training data")
    stream = sample_batches(stream_corpus, optimizer.batch_size, plan.in_domain_fraction, seed)
    rng = np.random.default_rng(seed + 1)
    fused = bool(model.elements)
    meta = {"stage": plan.stage, "chain": model.chain_string(), "seed": seed}
    meta.update(metadata or {})

    def checkpoint(step):
        score = validate(model) if validate is not None else None
        return snapshot(named, step, score, meta)

    result = StageResult([])
    for step in range(1, steps + 1):
        records = next(stream)
        us = model.sample_us(rng) if fused else None
        loss = batch_loss(model, featurizer, records, optimizer.label_smoothing,
                          DROP_BRANCH if fused else AVERAGE, us, rng)
        adam.zero_grad()
        # a drop-branch draw can route every layer through the frozen trunk;
        # then nothing trainable is in the graph and the step is a no-op
        if loss.requires_grad:
            loss.backward()
            adam.step()
        result.losses.append(float(loss.data))
        if eval_every and step % eval_every == 0:
            result.checkpoints.append(checkpoint(step))
            log.info("stage %d step %d loss %.4f score %s", plan.stage, step,
                     float(loss.data), result.checkpoints[-1].score)
    if not result.checkpoints or result.checkpoints[-1].step != steps:
        result.checkpoints.append(checkpoint(steps))
    for t in named.values():
        t.zero_grad()
    return result


# ---------------------------------------------------------------------------
# checkpoint averaging


def best_window(scores: Sequence[float], window: int) -> int:
    """Start index of the contiguous window with the highest mean (earliest on ties)."""
    if window < 1:
        raise InputError("window must be positive")
    if window > len(scores):
        raise InputError(f"window {window} longer than series of {len(scores)}")
    exact = [Fraction(s) for s in scores]
    best, best_sum = 0, sum(exact[:window])
    running = best_sum
    for start in range(1, len(exact) - window + 1):
        running += exact[start + window - 1] - exact[start - 1]
        if running > best_sum:
            best, best_sum = start, running
    return best


def average_checkpoints(series: Sequence[CheckpointRecord], window: int = 10) -> CheckpointRecord:
    """Element-wise mean of the parameters in the best-scoring contiguous window."""
    if not series:
        raise InputError("empty checkpoint series")
    if any(c.score is None for c in series):
        raise InputError("every checkpoint needs a validation score to be averaged")
    start = best_window([c.score for c in series], window)
    chosen = series[start:start + window]
    names = chosen[0].params.keys()
    for c in chosen[1:]:
        if c.params.keys() != names:
            raise InputError("checkpoints in one run must share parameter names")
    params = {}
    for name in names:
        stack = np.stack([c.params[name] for c in chosen])
        params[name] = stack.mean(axis=0, dtype=np.float64).astype(stack.dtype)
    meta = dict(chosen[-1].metadata)
    meta["averaged_steps"] = [c.step for c in chosen]
    score = float(sum(Fraction(c.score) for c in chosen) / len(chosen))
    return CheckpointRecord(chosen[-1].step, params, score, meta)
