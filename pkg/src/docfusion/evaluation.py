"""Translation, scoring and experiment reports.

Everything here is inference-only: the fused model runs with the averaging
merge and no dropout, so results depend only on parameters and inputs.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autograd import Tensor
from .bleu import BleuScore, corpus_bleu
from .data import Corpus
from .errors import InputError
from .features import Featurizer
from .fusion import AVERAGE, External, FusedModel
from .transformer import beam_decode, greedy_decode


def _tile(externals, k: int) -> list:
    out = []
    for ext in externals:
        states = np.repeat(ext.states.data, k, axis=0)
        mask = None if ext.mask is None else np.repeat(ext.mask, k, axis=0)
        out.append(External(Tensor(states), mask))
    return out


def translate(model: FusedModel, featurizer: Featurizer, records, batch_size: int = 128,
              beam: int = 0, extra_len: int = 10, mode: str = AVERAGE) -> list:
    """Token lists for ``records``; greedy unless ``beam`` > 1.

    Output for a record does not depend on how records are batched beyond
    floating-point padding effects, which the padding masks remove.
    """
    records = list(records)
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        batch = featurizer.batch(chunk, model)
        memory = model.encode(batch.src, batch.externals, mode)
        max_len = max(len(r.source) for r in chunk) + extra_len
        if beam > 1:
            for i in range(len(chunk)):
                src_i = batch.src[i:i + 1]
                mem_i = Tensor(memory.data[i:i + 1])
                ext_i = [External(Tensor(e.states.data[i:i + 1]),
                                  None if e.mask is None else e.mask[i:i + 1])
                         for e in batch.externals]

                def step(prefix, src_i=src_i, mem_i=mem_i, ext_i=ext_i):
                    k = prefix.shape[0]
                    return model.decode(Tensor(np.repeat(mem_i.data, k, axis=0)),
                                        np.repeat(src_i, k, axis=0), prefix,
                                        _tile(ext_i, k), mode)
                ids = beam_decode(step, max_len, beam)
                out.append(tuple(featurizer.vocab.decode(ids)))
        else:
            def step(prefix):
                return model.decode(memory, batch.src, prefix, batch.externals, mode)
            for ids in greedy_decode(step, len(chunk), max_len):
                out.append(tuple(featurizer.vocab.decode(ids)))
    return out


def translations_by_key(records, hypotheses) -> dict:
    return {r.key: tuple(h) for r, h in zip(records, hypotheses)}


def heldout_references(corpus: Corpus) -> dict:
    """The last reference of every record, to be used only as target context."""
    out = {}
    for r in corpus.records:
        extra = corpus.references.get(r.key, [])
        if not extra:
            raise InputError(f"record {r.key} has a single reference; nothing to hold out")
        out[r.key] = tuple(extra[-1])
    return out


def score(hypotheses, records, corpus: Corpus, drop_last_reference: bool = False) -> BleuScore:
    """Corpus BLEU against every reference (target first, then the extra ones)."""
    refs = []
    for r in records:
        rs = [r.target] + list(corpus.references.get(r.key, []))
        if drop_last_reference:
            if len(rs) < 2:
                raise InputError(f"record {r.key} has a single reference; nothing to hold out")
            rs = rs[:-1]
        refs.append(rs)
    return corpus_bleu(hypotheses, refs)


def context_accuracy(model: FusedModel, featurizer: Featurizer, records, positions: Mapping,
                     batch_size: int = 256, mode: str = AVERAGE) -> tuple:
    """Teacher-forced argmax accuracy on the listed target positions.

    ``positions`` maps record keys to target indices (the generator manifest
    for context-dependent tokens). Returns ``(correct, total)``.
    """
    records = [r for r in records if positions.get(r.key)]
    correct = total = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        batch = featurizer.batch(chunk, model)
        logits = model.forward(batch.src, batch.tgt_in, batch.externals, mode).data
        pred = logits.argmax(axis=-1)
        for i, r in enumerate(chunk):
            for pos in positions[r.key]:
                total += 1
                correct += int(pred[i, pos] == batch.tgt_out[i, pos])
    return correct, total


# ---------------------------------------------------------------------------
# reports


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


@dataclass
class ExperimentReport:
    """Metric rows plus the config and provenance needed to re-run them."""

    experiment: str
    config: dict
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def add(self, **row) -> dict:
        self.rows.append(row)
        return row

    def columns(self) -> list:
        cols: list = []
        for row in self.rows:
            for k in row:
                if k not in cols:
                    cols.append(k)
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = self.columns()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["experiment", "config_hash"] + cols)
        for row in self.rows:
            writer.writerow([self.experiment, self.config_hash] + [_fmt(row.get(c, "")) for c in cols])
        return buf.getvalue()

    def to_markdown(self) -> str:
        cols = self.columns()
        lines = [f"## {self.experiment}", "", f"config hash `{self.config_hash}`", ""]
        lines.append("| " + " | ".join(cols) + " |")
        lines.append("|" + "---|" * len(cols))
        for row in self.rows:
            lines.append("| " + " | ".join(_fmt(row.get(c, "")) for c in cols) + " |")
        if self.summary:
            lines += ["", "| summary | value |", "|---|---|"]
            lines += [f"| {k} | {_fmt(v)} |" for k, v in sorted(self.summary.items())]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"experiment": self.experiment, "config": self.config,
                           "config_hash": self.config_hash, "rows": self.rows,
                           "summary": self.summary, "provenance": self.provenance},
                          sort_keys=True, indent=1, default=str)

    def write(self, directory) -> dict:
        """Writes ``<experiment>.csv``, ``.md`` and ``.json``; returns the paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {}
        for ext, text in (("csv", self.to_csv()), ("md", self.to_markdown()),
                          ("json", self.to_json())):
            p = directory / f"{self.experiment}.{ext}"
            p.write_text(text, encoding="utf-8")
            paths[ext] = p
        return paths

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        d = json.loads(text)
        return cls(d["experiment"], d["config"], d["rows"], d.get("provenance", {}),
                   d.get("summary", {}))
