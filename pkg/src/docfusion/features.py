"""Turn corpus records into padded id batches plus external embeddings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autograd import Tensor
from .data import Corpus, DocumentRecord
from .errors import InputError
from .fusion import External, FusedModel
from .notation import extract_context
from .providers import EmbeddingCache, embed_contexts
from .transformer import teacher_forcing_io
from .vocab import Vocab, pad_batch


@dataclass
class Batch:
    records: list
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    externals: list


class Featurizer:
    """Builds model inputs for records of one corpus.

    ``target_context`` optionally maps record keys to token lists used as the
    target-side context text instead of the reference targets (model outputs
    of an earlier run, or a held-out reference).
    """

    def __init__(self, vocab: Vocab, corpus: Corpus, cache: EmbeddingCache | None = None,
                 target_context: Mapping | None = None):
        self.vocab = vocab
        self.corpus = corpus
        self.cache = cache if cache is not None else EmbeddingCache()
        self.target_context = dict(target_context) if target_context is not None else None

    def with_target_context(self, target_context: Mapping | None) -> "Featurizer":
        return Featurizer(self.vocab, self.corpus, self.cache, target_context)

    def _override(self, record: DocumentRecord):
        if self.target_context is None:
            return None
        doc = self.corpus.documents[record.doc_id]
        try:
            return [self.target_context[r.key] for r in doc]
        except KeyError as exc:
            raise InputError(f"no target context for record {exc.args[0]}") from None

    def windows(self, records: Sequence[DocumentRecord], spec) -> list:
        out = []
        for r in records:
            doc = self.corpus.documents[r.doc_id]
            override = self._override(r) if spec.side == "t" else None
            out.append(extract_context(doc, r.sent_index, spec, override))
        return out

    def externals(self, records: Sequence[DocumentRecord], model: FusedModel) -> list:
        out = []
        for spec in model.chain:
            provider = model.provider_for(spec)
            windows = self.windows(records, spec)
            if provider.kind == "D":
                states, mask = provider.encode_batch(windows, self.vocab)
                out.append(External(states, mask))
                continue
            arrays = embed_contexts(provider, windows, self.vocab, self.cache)
            width = max(a.shape[0] for a in arrays)
            states = np.zeros((len(arrays), width, provider.hidden_dim), dtype=arrays[0].dtype)
            mask = np.zeros((len(arrays), 1, width), dtype=bool)
            for i, a in enumerate(arrays):
                states[i, :a.shape[0]] = a
                mask[i, 0, :a.shape[0]] = True
            out.append(External(Tensor(states.astype(model.base.dtype, copy=False)), mask))
        return out

    def batch(self, records: Sequence[DocumentRecord], model: FusedModel) -> Batch:
        records = list(records)
        src = pad_batch([self.vocab.encode(r.source) for r in records])
        tgt_in, tgt_out = teacher_forcing_io([self.vocab.encode(r.target) for r in records])
        return Batch(records, src, tgt_in, tgt_out, self.externals(records, model))

    def warm(self, model: FusedModel, records=None, batch_size: int = 512) -> None:
        """Pre-fill the embedding cache for every cached provider of the chain."""
        records = self.corpus.records if records is None else list(records)
        for spec in model.chain:
            provider = model.provider_for(spec)
            if provider.kind == "D":
                continue
            for start in range(0, len(records), batch_size):
                embed_contexts(provider, self.windows(records[start:start + batch_size], spec),
                               self.vocab, self.cache)
