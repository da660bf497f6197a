"""Unsmoothed multi-reference corpus BLEU over pre-tokenised text.

Matches the default sacreBLEU computation when tokenisation is the identity:
n-gram counts are clipped by the maximum count in any one reference, and the
brevity penalty uses, per segment, the reference length closest to the
hypothesis length (the shorter one on ties).
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import InputError

MAX_ORDER = 4


@dataclass(frozen=True)
class BleuScore:
    score: float
    precisions: tuple      # p1..p4 as fractions in [0, 1]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: tuple
    totals: tuple

    def __str__(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.score:.2f} {ps} (BP = {self.brevity_penalty:.3f} "
                f"hyp_len = {self.hyp_len} ref_len = {self.ref_len})")


def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def ngram_counts(tokens: Sequence[str], order: int) -> Counter:
    return Counter(tuple(tokens[i:i + order]) for i in range(len(tokens) - order + 1))


def closest_ref_length(hyp_len: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - hyp_len), r))


def corpus_bleu(hypotheses: Sequence, references: Sequence[Sequence]) -> BleuScore:
    """``references[i]`` is the non-empty list of references for ``hypotheses[i]``."""
    if not hypotheses:
        raise InputError("corpus_bleu needs at least one hypothesis")
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses but {len(references)} reference sets")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        if isinstance(refs, str) or not refs:
            raise InputError("each hypothesis needs a non-empty list of references")
        hyp = _tokens(hyp)
        refs = [_tokens(r) for r in refs]
        hyp_len += len(hyp)
        ref_len += closest_ref_length(len(hyp), [len(r) for r in refs])
        for n in range(1, MAX_ORDER + 1):
            h = ngram_counts(hyp, n)
            best: Counter = Counter()
            for r in refs:
                best |= ngram_counts(r, n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuScore(score, precisions, bp, hyp_len, ref_len, tuple(matches), tuple(totals))
