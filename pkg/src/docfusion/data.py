"""Document-aware corpora, batch streams and the synthetic context task.

Corpus files are UTF-8 JSON lines with exactly the fields
``doc_id, sent_index, source, target, domain``; tokens are space-separated.
Two optional sidecars sit next to a corpus file:

``<name>.refs.jsonl``
    ``{"doc_id", "sent_index", "references": [str, ...]}`` with additional
    references beyond ``target`` (used for multi-reference BLEU).
``<name>.manifest.jsonl``
    ``{"doc_id", "sent_index", "context_dependent": [int, ...]}`` listing the
    target positions whose value cannot be recovered from the source sentence.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, InputError

FIELDS = ("doc_id", "sent_index", "source", "target", "domain")


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: str
    sent_index: int
    source: tuple
    target: tuple
    domain: str = "in"

    @property
    def key(self) -> tuple:
        return (self.doc_id, self.sent_index)


@dataclass
class Corpus:
    """Records grouped by document, in sentence order.

    ``references`` maps a record key to extra reference token lists and
    ``context_dependent`` maps a key to target positions flagged by the
    synthetic generator. Both are optional.
    """

    documents: dict = field(default_factory=dict)
    references: dict = field(default_factory=dict)
    context_dependent: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Sequence[DocumentRecord], references=None,
                     context_dependent=None) -> "Corpus":
        docs: dict = {}
        seen = set()
        for r in records:
            if r.key in seen:
                raise InputError(f"duplicate record {r.key}")
            seen.add(r.key)
            if not r.source or not r.target:
                raise InputError(f"record {r.key} has an empty side")
            if r.domain not in ("in", "out"):
                raise InputError(f"record {r.key}: domain must be 'in' or 'out'")
            docs.setdefault(r.doc_id, []).append(r)
        for doc_id, recs in docs.items():
            recs.sort(key=lambda r: r.sent_index)
            if [r.sent_index for r in recs] != list(range(len(recs))):
                raise InputError(f"document {doc_id!r}: sent_index values are not contiguous from 0")
        keys = set(seen)
        refs = {k: v for k, v in (references or {}).items() if k in keys}
        ctx = {k: v for k, v in (context_dependent or {}).items() if k in keys}
        return cls(docs, refs, ctx)

    # views
    @property
    def records(self) -> list:
        return [r for recs in self.documents.values() for r in recs]

    def __len__(self) -> int:
        return sum(len(v) for v in self.documents.values())

    def has_document_context(self, doc_id: str) -> bool:
        return len(self.documents[doc_id]) > 1

    def document_of(self, record: DocumentRecord) -> list:
        return self.documents[record.doc_id]

    def reference_sets(self) -> list:
        """All references per record: the target first, then the sidecar ones."""
        return [[list(r.target)] + [list(x) for x in self.references.get(r.key, [])]
                for r in self.records]

    def select_documents(self, doc_ids: Sequence[str]) -> "Corpus":
        recs = [r for d in doc_ids for r in self.documents[d]]
        return Corpus.from_records(recs, self.references, self.context_dependent)

    def document_stream(self) -> "Corpus":
        """Only records from multi-sentence documents."""
        return self.select_documents([d for d in self.documents if self.has_document_context(d)])

    def domain(self, name: str) -> "Corpus":
        return self.select_documents(
            [d for d, recs in self.documents.items() if recs[0].domain == name])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(json.dumps(_record_dict(r), sort_keys=True).encode("utf-8"))
            h.update(b"\n")
        for k in sorted(self.references):
            h.update(json.dumps([k, self.references[k]]).encode("utf-8"))
        return h.hexdigest()[:16]


def merge(*corpora: Corpus) -> Corpus:
    recs, refs, ctx = [], {}, {}
    for c in corpora:
        recs.extend(c.records)
        refs.update(c.references)
        ctx.update(c.context_dependent)
    return Corpus.from_records(recs, refs, ctx)


# ---------------------------------------------------------------------------
# file IO


def _record_dict(r: DocumentRecord) -> dict:
    return {"doc_id": r.doc_id, "sent_index": r.sent_index, "source": " ".join(r.source),
            "target": " ".join(r.target), "domain": r.domain}


def _sidecar(path: Path, kind: str) -> Path:
    name = path.name[:-len(".jsonl")] if path.name.endswith(".jsonl") else path.name
    return path.with_name(f"{name}.{kind}.jsonl")


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise InputError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_corpus(path) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise InputError(f"corpus file {path} does not exist")
    records = []
    for lineno, obj in _read_jsonl(path):
        if set(obj) != set(FIELDS):
            raise InputError(f"{path}:{lineno}: fields must be exactly {list(FIELDS)}")
        if not isinstance(obj["sent_index"], int) or obj["sent_index"] < 0:
            raise InputError(f"{path}:{lineno}: sent_index must be a nonnegative integer")
        if not all(isinstance(obj[k], str) for k in ("doc_id", "source", "target", "domain")):
            raise InputError(f"{path}:{lineno}: doc_id/source/target/domain must be strings")
        records.append(DocumentRecord(obj["doc_id"], obj["sent_index"],
                                      tuple(obj["source"].split()), tuple(obj["target"].split()),
                                      obj["domain"]))
    refs, ctx = {}, {}
    ref_path, man_path = _sidecar(path, "refs"), _sidecar(path, "manifest")
    if ref_path.exists():
        for _, obj in _read_jsonl(ref_path):
            refs[(obj["doc_id"], obj["sent_index"])] = [tuple(x.split()) for x in obj["references"]]
    if man_path.exists():
        for _, obj in _read_jsonl(man_path):
            ctx[(obj["doc_id"], obj["sent_index"])] = tuple(obj["context_dependent"])
    try:
        return Corpus.from_records(records, refs, ctx)
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from exc


def save_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in corpus.records:
            fh.write(json.dumps(_record_dict(r), ensure_ascii=False) + "\n")
    if corpus.references:
        with open(_sidecar(path, "refs"), "w", encoding="utf-8") as fh:
            for r in corpus.records:
                if r.key in corpus.references:
                    fh.write(json.dumps({"doc_id": r.doc_id, "sent_index": r.sent_index,
                                         "references": [" ".join(x) for x in
                                                        corpus.references[r.key]]}) + "\n")
    if corpus.context_dependent:
        with open(_sidecar(path, "manifest"), "w", encoding="utf-8") as fh:
            for r in corpus.records:
                if r.key in corpus.context_dependent:
                    fh.write(json.dumps({"doc_id": r.doc_id, "sent_index": r.sent_index,
                                         "context_dependent":
                                             list(corpus.context_dependent[r.key])}) + "\n")


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# sampling


def sample_batches(corpus: Corpus, batch_size: int, in_domain_fraction: float = 1.0,
                   seed: int = 0) -> Iterator[list]:
    """Endless deterministic stream of record batches mixing two domain pools.

    Each batch holds ``floor(f*b)`` in-domain records plus one more with
    probability ``frac(f*b)``, so the expected share is exactly ``f``. Each pool
    is walked in a fresh random permutation per epoch (no replacement within an
    epoch).
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    if not 0.0 <= in_domain_fraction <= 1.0:
        raise ConfigError("in_domain_fraction must lie in [0, 1]")
    records = corpus.records
    pools = {"in": [r for r in records if r.domain == "in"],
             "out": [r for r in records if r.domain == "out"]}
    if in_domain_fraction > 0 and not pools["in"]:
        raise ConfigError("in-domain fraction > 0 but the corpus has no in-domain records")
    if in_domain_fraction < 1 and not pools["out"]:
        raise ConfigError("in-domain fraction < 1 but the corpus has no out-of-domain records")
    rng = np.random.default_rng(seed)
    state = {k: [np.empty(0, dtype=np.int64), 0] for k in pools}

    def draw(name: str, n: int) -> list:
        pool, out = pools[name], []
        while len(out) < n:
            perm, pos = state[name]
            if pos >= len(perm):
                perm, pos = rng.permutation(len(pool)), 0
            take = min(n - len(out), len(perm) - pos)
            out.extend(pool[i] for i in perm[pos:pos + take])
            state[name] = [perm, pos + take]
        return out

    target = in_domain_fraction * batch_size
    base, frac = int(np.floor(target)), target - np.floor(target)
    while True:
        n_in = base + int(rng.random() < frac) if frac > 0 else base
        yield draw("in", n_in) + draw("out", batch_size - n_in)


def subsample(corpus: Corpus, n_examples: int, seed: int = 0) -> Corpus:
    """Whole documents, in a seeded order, until at least ``n_examples`` pairs.

    The document order depends only on ``seed``, so smaller budgets give
    nested subsets of larger ones.
    """
    if n_examples < 0 or n_examples > len(corpus):
        raise InputError(f"cannot sample {n_examples} pairs from a corpus of {len(corpus)}")
    doc_ids = list(corpus.documents)
    order = np.random.default_rng(seed).permutation(len(doc_ids))
    chosen, total = set(), 0
    for i in order:
        if total >= n_examples:
            break
        chosen.add(doc_ids[i])
        total += len(corpus.documents[doc_ids[i]])
    return corpus.select_documents([d for d in doc_ids if d in chosen])


def split_documents(corpus: Corpus, n_docs: Sequence[int], seed: int = 0) -> list:
    """Disjoint document-level splits of the requested sizes (the rest is dropped)."""
    if sum(n_docs) > len(corpus.documents):
        raise InputError("split sizes exceed the number of documents")
    doc_ids = list(corpus.documents)
    order = np.random.default_rng(seed).permutation(len(doc_ids))
    out, start = [], 0
    for n in n_docs:
        picked = sorted(order[start:start + n])
        out.append(corpus.select_documents([doc_ids[i] for i in picked]))
        start += n
    return out


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic underspecification task.

    Every sentence has a verb whose tense marker and, half the time, a pronoun
    subject whose gender are obligatory in the target. The source drops each
    marker with probability ``ambiguity_rate``; the true values are constant
    per document (latent), so they can be read off neighbouring sentences.
    """

    num_docs: int = 2000
    sents_per_doc: int = 8
    vocab_size: int = 48
    ambiguity_rate: float = 0.3
    seed: int = 0
    min_words: int = 2
    max_words: int = 4
    pronoun_rate: float = 0.5
    num_references: int = 1
    synonym_rate: float = 0.25
    domain: str = "in"
    doc_prefix: str = "d"


# Marker vocabulary. Source markers may be dropped; target markers never are.
SRC_TENSE = {"past": "le", "present": "zai"}
TGT_TENSE = {"past": "-ed", "present": "-s"}
SRC_PRONOUN = {"female": "ta_f", "male": "ta_m"}
SRC_PRONOUN_BARE = "ta"
TGT_PRONOUN = {"female": "she", "male": "he"}
MARKER_TOKENS = 5  # le, zai, ta_f, ta_m, ta
MIN_CONTENT_WORDS = 8


def generate_synthetic(config: SyntheticConfig) -> Corpus:
    """Deterministic corpus of ``num_docs`` documents plus its manifest.

    Source words ``x<k>`` translate one-to-one into target words ``y<k>`` in the
    same order. The manifest lists target positions whose marker was dropped
    from the source sentence (the context-dependent tokens).
    """
    c = config
    if not 0.0 < c.ambiguity_rate < 1.0:
        raise ConfigError("ambiguity_rate must lie in (0, 1)")
    n_content = c.vocab_size - MARKER_TOKENS
    if n_content < MIN_CONTENT_WORDS:
        raise ConfigError(
            f"vocab_size {c.vocab_size} too small: the marker scheme needs {MARKER_TOKENS} "
            f"tokens plus at least {MIN_CONTENT_WORDS} content words")
    if c.num_docs < 0 or c.sents_per_doc < 1 or not 1 <= c.min_words <= c.max_words:
        raise ConfigError("invalid document or sentence sizes")
    if c.domain not in ("in", "out"):
        raise ConfigError("domain must be 'in' or 'out'")
    rng = np.random.default_rng(c.seed)
    # out-of-domain text favours the other end of the lexicon
    weights = 1.0 / np.arange(1, n_content + 1)
    if c.domain == "out":
        weights = weights[::-1]
    weights = weights / weights.sum()

    records, refs, manifest = [], {}, {}
    for d in range(c.num_docs):
        doc_id = f"{c.doc_prefix}{d:05d}"
        tense = "past" if rng.random() < 0.5 else "present"
        gender = "female" if rng.random() < 0.5 else "male"
        for s in range(c.sents_per_doc):
            src, tgt, dependent = [], [], []
            if rng.random() < c.pronoun_rate:
                hidden = rng.random() < c.ambiguity_rate
                src.append(SRC_PRONOUN_BARE if hidden else SRC_PRONOUN[gender])
                if hidden:
                    dependent.append(len(tgt))
                tgt.append(TGT_PRONOUN[gender])
            else:
                k = int(rng.choice(n_content, p=weights))
                src.append(f"x{k}")
                tgt.append(f"y{k}")
            verb = int(rng.choice(n_content, p=weights))
            src.append(f"x{verb}")
            tgt.append(f"y{verb}")
            hidden = rng.random() < c.ambiguity_rate
            if not hidden:
                src.append(SRC_TENSE[tense])
            else:
                dependent.append(len(tgt))
            tgt.append(TGT_TENSE[tense])
            for _ in range(int(rng.integers(c.min_words, c.max_words + 1))):
                k = int(rng.choice(n_content, p=weights))
                src.append(f"x{k}")
                tgt.append(f"y{k}")
            rec = DocumentRecord(doc_id, s, tuple(src), tuple(tgt), c.domain)
            records.append(rec)
            manifest[rec.key] = tuple(dependent)
            extra = []
            for _ in range(c.num_references - 1):
                extra.append(tuple(
                    tok + "'" if tok.startswith("y") and rng.random() < c.synonym_rate else tok
                    for tok in tgt))
            if extra:
                refs[rec.key] = extra
    return Corpus.from_records(records, refs, manifest)


def marked_positions(record: DocumentRecord) -> list:
    """Target positions carrying an obligatory marker (tense or pronoun)."""
    markers = set(TGT_TENSE.values()) | set(TGT_PRONOUN.values())
    return [i for i, t in enumerate(record.target) if t in markers]
