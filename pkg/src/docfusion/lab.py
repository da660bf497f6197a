"""End-to-end workflows: pretrain providers, train stages, evaluate.

A :class:`Lab` owns one train/validation split, the shared vocabulary and the
embedding cache. Pretrained providers are built once per lab and reused by
every fused model; scratch (D) providers are created fresh for each model
because they train with it.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import (CheckpointRecord, load_checkpoint, restore, save_checkpoint,
                         snapshot)
from .data import Corpus
from .errors import ConfigError
from .evaluation import context_accuracy, score, translate
from .features import Featurizer
from .fusion import FusedModel
from .notation import EmbeddingSpec, format_chain, parse_spec
from .providers import (EmbeddingCache, ProviderConfig, ProviderModel, make_gsg_batch,
                        make_mlm_batch, pretrain_gsg_step, pretrain_mlm_step,
                        sample_gsg_examples, sample_sentence_pairs)
from .training import (Adam, OptimizerConfig, average_checkpoints, plan_stage, run_stage)
from .transformer import Transformer, TransformerConfig
from .vocab import Vocab

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabConfig:
    """Model sizes and step budgets; defaults are sized for one CPU core."""

    model_dim: int = 32
    num_heads: int = 2
    num_layers: int = 1
    ffn_dim: int = 64
    dropout_rate: float = 0.1
    max_positions: int = 32
    provider_dim: int = 32
    provider_heads: int = 2
    provider_layers: int = 1
    provider_ffn: int = 64
    provider_max_positions: int = 96
    provider_seed: int = 1000
    lr: float = 3e-3
    warmup_steps: int = 100
    batch_size: int = 64
    label_smoothing: float = 0.1
    pretrain_steps: int = 300
    pretrain_batch: int = 32
    pretrain_lr: float = 3e-3
    stage1_steps: int = 1000
    stage2_steps: int = 600
    stage3_steps: int = 600
    eval_every: int = 100
    window: int = 3
    valid_limit: int = 256
    decode_batch: int = 256

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "LabConfig":
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LabConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown lab settings: {sorted(unknown)}")
        return cls(**{k: type(getattr(cls(), k))(v) for k, v in d.items()})


def build_vocab(*corpora: Corpus) -> Vocab:
    sents = []
    for c in corpora:
        for r in c.records:
            sents.append(r.source)
            sents.append(r.target)
            sents.extend(c.references.get(r.key, []))
    return Vocab.build(sents)


@dataclass
class Trained:
    """A trained model with its averaged checkpoint and training trace."""

    name: str
    model: FusedModel
    record: CheckpointRecord
    series: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    @property
    def chain(self) -> tuple:
        return self.model.chain

    @property
    def checkpoint_id(self) -> str:
        return self.record.digest()


def _side_documents(corpus: Corpus, side: str) -> list:
    attr = "source" if side == "s" else "target"
    return [[getattr(r, attr) for r in recs] for recs in corpus.documents.values()]


class Lab:
    def __init__(self, train: Corpus, valid: Corpus, config: LabConfig | None = None,
                 vocab: Vocab | None = None):
        self.train = train
        self.valid = valid
        self.config = config or LabConfig()
        self.vocab = vocab if vocab is not None else build_vocab(train, valid)
        self.cache = EmbeddingCache()
        self._pretrained: dict = {}

    # configs -------------------------------------------------------------
    def base_config(self) -> TransformerConfig:
        c = self.config
        return TransformerConfig(len(self.vocab), c.model_dim, c.num_heads, c.num_layers,
                                 c.ffn_dim, c.max_positions, c.dropout_rate)

    def provider_config(self, kind: str, side: str) -> ProviderConfig:
        c = self.config
        return ProviderConfig(kind, side, c.provider_dim, c.provider_heads, c.provider_layers,
                              c.provider_ffn, c.provider_max_positions)

    def optimizer(self) -> OptimizerConfig:
        c = self.config
        return OptimizerConfig(c.lr, c.warmup_steps, label_smoothing=c.label_smoothing,
                               batch_size=c.batch_size)

    # providers -----------------------------------------------------------
    def pretrain_provider(self, kind: str, side: str, seed: int | None = None,
                          steps: int | None = None) -> ProviderModel:
        """Fresh provider trained on its objective over ``train`` (frozen after)."""
        c = self.config
        seed = c.provider_seed if seed is None else seed
        steps = c.pretrain_steps if steps is None else steps
        provider = ProviderModel(self.provider_config(kind, side), len(self.vocab),
                                 self.vocab.fingerprint(), seed=seed)
        if kind == "D":
            return provider
        docs = _side_documents(self.train, side)
        rng = np.random.default_rng(seed + 1)
        adam = Adam(provider.params, OptimizerConfig(c.pretrain_lr, c.warmup_steps))
        losses = []
        for _ in range(steps):
            if kind == "B":
                batch = make_mlm_batch(sample_sentence_pairs(docs, c.pretrain_batch, rng),
                                       self.vocab, rng, provider.max_positions)
                losses.append(pretrain_mlm_step(provider, batch, adam))
            else:
                batch = make_gsg_batch(sample_gsg_examples(docs, c.pretrain_batch, rng),
                                       self.vocab, provider.max_positions)
                losses.append(pretrain_gsg_step(provider, batch, adam))
        provider.freeze()
        provider.pretrain_losses = losses
        return provider

    def provider(self, kind: str, side: str) -> ProviderModel:
        """The lab's shared pretrained provider for ``kind``/``side``."""
        if kind == "D":
            raise ConfigError("scratch providers are per model; use pretrain_provider")
        key = (kind, side)
        if key not in self._pretrained:
            log.info("pretraining provider %s_%s", kind, side)
            self._pretrained[key] = self.pretrain_provider(kind, side)
        return self._pretrained[key]

    def set_provider(self, provider: ProviderModel) -> None:
        provider.freeze()
        self._pretrained[(provider.kind, provider.config.side)] = provider

    def providers_for(self, chain: Sequence[EmbeddingSpec], seed: int) -> dict:
        out = {}
        for spec in chain:
            if spec.provider_key in out:
                continue
            if spec.model == "D":
                out[spec.provider_key] = self.pretrain_provider("D", spec.side, seed=seed + 7)
            else:
                out[spec.provider_key] = self.provider(spec.model, spec.side)
        return out

    # training ------------------------------------------------------------
    def featurizer(self, corpus: Corpus, target_context=None) -> Featurizer:
        return Featurizer(self.vocab, corpus, self.cache, target_context)

    def validator(self, corpus: Corpus | None = None):
        corpus = self.valid if corpus is None else corpus
        records = corpus.records[:self.config.valid_limit]
        feat = self.featurizer(corpus)

        def validate(model: FusedModel) -> float:
            hyps = translate(model, feat, records, self.config.decode_batch)
            return score(hyps, records, corpus).score
        return validate

    def _finish(self, name, model, result, window) -> Trained:
        window = min(window or self.config.window, len(result.checkpoints))
        avg = average_checkpoints(result.checkpoints, window)
        restore(model.named_parameters(), avg)
        return Trained(name, model, avg, result.checkpoints, result.losses)

    def train_baseline(self, seed: int = 0, corpus: Corpus | None = None,
                       steps: int | None = None, window: int | None = None) -> Trained:
        corpus = self.train if corpus is None else corpus
        steps = self.config.stage1_steps if steps is None else steps
        model = FusedModel(Transformer(self.base_config(), seed=seed))
        result = run_stage(plan_stage(1), model, corpus, self.featurizer(corpus),
                           self.optimizer(), steps, self.config.eval_every, seed,
                           self.validator(), {"seed": seed})
        return self._finish("transformer", model, result, window)

    def train_fused(self, chain, baseline: Trained, seed: int = 0, corpus: Corpus | None = None,
                    steps: int | None = None, stage: int = 2, parent: Trained | None = None,
                    in_domain_fraction: float = 1.0, window: int | None = None,
                    name: str | None = None) -> Trained:
        """Restore ``baseline`` (and ``parent`` for stage 3) and train the new blocks."""
        additions = parse_spec(chain) if isinstance(chain, str) else tuple(chain)
        corpus = self.train if corpus is None else corpus
        if stage == 3:
            if parent is None or not parent.chain:
                raise ConfigError("stage 3 needs a fused stage-2 parent")
            existing = parent.chain
            steps = self.config.stage3_steps if steps is None else steps
        elif stage == 2:
            existing = ()
            steps = self.config.stage2_steps if steps is None else steps
        else:
            raise ConfigError("fused training runs in stage 2 or 3")
        providers = self.providers_for(existing + additions, seed)
        model = FusedModel(Transformer(self.base_config(), seed=seed), providers)
        restore(model.base.params, baseline.record, prefixes=("base.",))
        if stage == 3:
            model.add_blocks(existing, 2, seed)
            restore(model.named_parameters(), parent.record, prefixes=("fusion.2.", "provider.D."),
                    strict=False)
        model.add_blocks(additions, stage, seed + 100 * stage)
        feat = self.featurizer(corpus)
        feat.warm(model)
        plan = plan_stage(stage, additions, existing, in_domain_fraction)
        result = run_stage(plan, model, corpus, feat, self.optimizer(), steps,
                           self.config.eval_every, seed, self.validator(),
                           {"seed": seed, "baseline": baseline.checkpoint_id})
        return self._finish(name or format_chain(model.chain), model, result, window)

    # evaluation ----------------------------------------------------------
    def evaluate(self, trained: Trained, corpus: Corpus | None = None, target_context=None,
                 drop_last_reference: bool = False, beam: int = 0) -> dict:
        corpus = self.valid if corpus is None else corpus
        feat = self.featurizer(corpus, target_context)
        records = corpus.records
        hyps = translate(trained.model, feat, records, self.config.decode_batch, beam)
        bleu = score(hyps, records, corpus, drop_last_reference)
        correct, total = context_accuracy(trained.model, feat, records,
                                          corpus.context_dependent)
        return {"bleu": bleu.score, "ctx_acc": correct / total if total else float("nan"),
                "ctx_total": total, "hypotheses": hyps, "bleu_detail": bleu}


# ---------------------------------------------------------------------------
# persistence


def trained_metadata(lab: Lab, trained: Trained) -> dict:
    return {"name": trained.name, "lab": lab.config.to_dict(), "vocab": lab.vocab.fingerprint(),
            "elements": [[str(e.spec), e.stage] for e in trained.model.elements],
            "averaged_steps": trained.record.metadata.get("averaged_steps", [])}


def save_trained(lab: Lab, trained: Trained, path) -> CheckpointRecord:
    record = CheckpointRecord(trained.record.step, trained.record.params, trained.record.score,
                              {**trained.record.metadata, **trained_metadata(lab, trained)})
    save_checkpoint(record, path)
    return record


def model_from_record(lab: Lab, record: CheckpointRecord, name: str | None = None) -> Trained:
    """Rebuild a trained model (base, fusion blocks, providers) from one checkpoint."""
    meta = record.metadata
    if meta.get("vocab") not in (None, lab.vocab.fingerprint()):
        raise ConfigError("checkpoint was trained with a different vocabulary")
    if "lab" in meta and LabConfig.from_dict(meta["lab"]) != lab.config:
        lab = Lab(lab.train, lab.valid, LabConfig.from_dict(meta["lab"]), lab.vocab)
    elements = [(parse_spec(s)[0], int(stage)) for s, stage in meta.get("elements", [])]
    providers = {}
    for spec, _ in elements:
        key = spec.provider_key
        if key not in providers:
            p = ProviderModel(lab.provider_config(spec.model, spec.side), len(lab.vocab),
                              lab.vocab.fingerprint(), seed=0)
            restore(p.params, record, strict=True)
            if spec.model != "D":
                p.freeze()
            providers[key] = p
    model = FusedModel(Transformer(lab.base_config(), seed=0), providers)
    for spec, stage in elements:
        model.add_blocks([spec], stage, 0)
    restore(model.named_parameters(), record, strict=True)
    return Trained(name or meta.get("name", model.chain_string()), model, record)


def save_provider(lab: Lab, provider: ProviderModel, path) -> None:
    meta = {"kind": provider.kind, "side": provider.config.side,
            "provider": provider.config.to_dict(), "vocab": lab.vocab.fingerprint(),
            "losses": [round(x, 6) for x in getattr(provider, "pretrain_losses", [])]}
    save_checkpoint(snapshot(provider.params, len(meta["losses"]), None, meta), path)


def load_provider(lab: Lab, path) -> ProviderModel:
    record = load_checkpoint(path)
    meta = record.metadata
    if meta.get("vocab") != lab.vocab.fingerprint():
        raise ConfigError(f"{path}: provider was trained with a different vocabulary")
    cfg = ProviderConfig(**meta["provider"])
    provider = ProviderModel(cfg, len(lab.vocab), lab.vocab.fingerprint(), seed=0)
    restore(provider.params, record)
    provider.freeze()
    return provider
