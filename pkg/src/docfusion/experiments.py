"""Experiment protocols built on :class:`~docfusion.lab.Lab`.

Each protocol returns an :class:`ExperimentReport` whose rows carry the
checkpoint id of the model that produced them and whose provenance records
the corpus fingerprints.
"""
from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .data import Corpus, subsample
from .errors import InputError
from .evaluation import ExperimentReport, heldout_references, score, translate, translations_by_key
from .lab import Lab, Trained
from .notation import canonical, format_chain, parse_spec

# Adds one component at a time up to the full multi-context chain.
ABLATION_LADDER = ("", "B_s(p,c)", "B_s(p,c) => B_s(c,n)", "B_s(p,c) => B_s(c,n) => P_s(3p,c,3n)")
BASELINE = "transformer"


def chain_label(chain: str) -> str:
    return canonical(chain) if chain else BASELINE


def is_subchain(a: str, b: str) -> bool:
    """True when chain ``a`` is a prefix of chain ``b`` (the empty chain included)."""
    pa = parse_spec(a) if a else ()
    pb = parse_spec(b) if b else ()
    return len(pa) <= len(pb) and tuple(pb[:len(pa)]) == tuple(pa)


def _provenance(lab: Lab, **extra) -> dict:
    out = {"train": lab.train.fingerprint(), "valid": lab.valid.fingerprint(),
           "vocab": lab.vocab.fingerprint()}
    out.update(extra)
    return out


def mean_and_se(values: Sequence[float]) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


# ---------------------------------------------------------------------------
# chain comparison and ablation


def compare_chains(lab: Lab, chains: Sequence[str], seeds: Sequence[int],
                   experiment: str = "chains", baselines: Mapping | None = None) -> tuple:
    """Train every chain (empty string = baseline) per seed and evaluate on validation.

    Returns ``(report, trained)`` with ``trained[(label, seed)]``.
    """
    baselines = dict(baselines or {})
    report = ExperimentReport(experiment, {"chains": [chain_label(c) for c in chains],
                                           "seeds": list(seeds), "lab": lab.config.to_dict()})
    trained = {}
    for seed in seeds:
        if seed not in baselines:
            baselines[seed] = lab.train_baseline(seed)
        for chain in chains:
            label = chain_label(chain)
            model = baselines[seed] if not chain else lab.train_fused(chain, baselines[seed], seed)
            trained[(label, seed)] = model
            ev = lab.evaluate(model)
            report.add(chain=label, seed=seed, bleu=ev["bleu"], ctx_acc=ev["ctx_acc"],
                       checkpoint=model.checkpoint_id)
    for chain in chains:
        label = chain_label(chain)
        rows = [r for r in report.rows if r["chain"] == label]
        for metric in ("bleu", "ctx_acc"):
            m, se = mean_and_se([r[metric] for r in rows])
            report.summary[f"{label} {metric} mean"] = m
            report.summary[f"{label} {metric} se"] = se
    report.provenance = _provenance(lab)
    return report, trained


def ablation(lab: Lab, seeds: Sequence[int], ladder: Sequence[str] = ABLATION_LADDER,
             baselines: Mapping | None = None) -> tuple:
    """One component at a time; each row's chain nests in the next one."""
    for a, b in zip(ladder, ladder[1:]):
        if not is_subchain(a, b):
            raise InputError(f"ablation ladder does not nest: {a!r} then {b!r}")
    report, trained = compare_chains(lab, ladder, seeds, "ablation", baselines)
    return report, trained


def monotone_within_noise(report: ExperimentReport, ladder: Sequence[str], metric: str = "bleu",
                          tolerance_se: float = 2.0) -> list:
    """For each consecutive ladder pair: (from, to, delta, allowed drop, ok).

    A step passes when the mean does not drop by more than ``tolerance_se``
    pooled standard errors of the two means.
    """
    out = []
    for a, b in zip(ladder, ladder[1:]):
        la, lb = chain_label(a), chain_label(b)
        ma, sa = report.summary[f"{la} {metric} mean"], report.summary[f"{la} {metric} se"]
        mb, sb = report.summary[f"{lb} {metric} mean"], report.summary[f"{lb} {metric} se"]
        allowed = tolerance_se * math.sqrt(sa ** 2 + sb ** 2)
        out.append((la, lb, mb - ma, allowed, mb - ma >= -allowed))
    return out


# ---------------------------------------------------------------------------
# target-context protocols


def context_quality_eval(lab: Lab, model: Trained, corpus: Corpus,
                         sources: Mapping[str, Mapping | None]) -> ExperimentReport:
    """Evaluate one target-context model under several context sources.

    ``sources`` maps a source name to translations keyed by record key, or to
    ``None`` for the oracle (the reference targets themselves).
    """
    if not any(s.side == "t" for s in model.chain):
        raise InputError("context-quality evaluation needs a chain with a target-side spec")
    report = ExperimentReport("context_quality", {"chain": format_chain(model.chain),
                                                  "sources": list(sources)})
    records = corpus.records
    for name, translations in sources.items():
        if translations is None:
            context = {r.key: r.target for r in records}
        else:
            missing = [r.key for r in records if r.key not in translations]
            if missing:
                raise InputError(f"context run {name!r} lacks translations for {len(missing)} "
                                 f"records, e.g. {missing[0]}")
            context = translations
        quality = score([context[r.key] for r in records], records, corpus).score
        ev = lab.evaluate(model, corpus, target_context=context)
        report.add(context=name, context_bleu=quality, bleu=ev["bleu"], ctx_acc=ev["ctx_acc"],
                   checkpoint=model.checkpoint_id)
    report.provenance = _provenance(lab, corpus=corpus.fingerprint())
    return report


def context_translations(lab: Lab, model: Trained, corpus: Corpus) -> dict:
    """Translations of every record of ``corpus``, for use as target context."""
    feat = lab.featurizer(corpus)
    hyps = translate(model.model, feat, corpus.records, lab.config.decode_batch)
    return translations_by_key(corpus.records, hyps)


def heldout_reference_eval(lab: Lab, models: Mapping[str, Trained], corpus: Corpus) -> ExperimentReport:
    """Hold one reference out as target context; score on the remaining ones."""
    context = heldout_references(corpus)
    n_refs = 1 + min(len(corpus.references.get(r.key, [])) for r in corpus.records)
    report = ExperimentReport("heldout_reference", {"models": list(models),
                                                    "scoring_references": n_refs - 1})
    for name, model in models.items():
        uses_target = any(s.side == "t" for s in model.chain)
        ev = lab.evaluate(model, corpus, target_context=context if uses_target else None,
                          drop_last_reference=True)
        report.add(model=name, chain=model.model.chain_string(), bleu=ev["bleu"],
                   ctx_acc=ev["ctx_acc"], scoring_references=n_refs - 1,
                   checkpoint=model.checkpoint_id)
    report.provenance = _provenance(lab, corpus=corpus.fingerprint())
    return report


# ---------------------------------------------------------------------------
# data scarcity


def crossing_size(sizes: Sequence[int], scores: Sequence[float], baseline: float) -> float:
    """Smallest size whose score exceeds ``baseline``; ``inf`` when none does."""
    for size, s in zip(sizes, scores):
        if s > baseline:
            return size
    return math.inf


def scarcity_sweep(lab: Lab, presets: Sequence[str], sizes: Sequence[int], seeds: Sequence[int],
                   baseline: Trained, steps: int | None = None) -> ExperimentReport:
    """Train fusion blocks on nested subsamples over a frozen stage-1 baseline."""
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise InputError("sizes must be ascending")
    if sizes and sizes[-1] > len(lab.train):
        raise InputError(f"size {sizes[-1]} exceeds the training corpus ({len(lab.train)} pairs)")
    base_bleu = lab.evaluate(baseline)["bleu"]
    report = ExperimentReport("scarcity", {"presets": [canonical(p) for p in presets],
                                           "sizes": sizes, "seeds": list(seeds),
                                           "baseline": baseline.checkpoint_id,
                                           "lab": lab.config.to_dict()})
    table: dict = {}
    for preset in presets:
        for seed in seeds:
            for size in sizes:
                sub = subsample(lab.train, size, seed)
                model = lab.train_fused(preset, baseline, seed, corpus=sub, steps=steps)
                ev = lab.evaluate(model)
                table[(preset, seed, size)] = ev["bleu"]
                report.add(preset=preset, seed=seed, size=size, pairs=len(sub), bleu=ev["bleu"],
                           baseline_bleu=base_bleu, ctx_acc=ev["ctx_acc"],
                           checkpoint=model.checkpoint_id)
    for preset in presets:
        means = [float(np.mean([table[(preset, s, n)] for s in seeds])) for n in sizes]
        report.summary[f"{preset} crossing"] = crossing_size(sizes, means, base_bleu)
        for seed in seeds:
            report.summary[f"{preset} crossing seed {seed}"] = crossing_size(
                sizes, [table[(preset, seed, n)] for n in sizes], base_bleu)
    report.summary["baseline bleu"] = base_bleu
    report.provenance = _provenance(lab)
    return report
