"""Whitespace-token vocabulary shared by source, target and context providers."""
from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

PAD, BOS, EOS, UNK, MASK, SEP, CLS, EDGE, MSENT = (
    "<pad>", "<s>", "</s>", "<unk>", "<mask>", "<sep>", "<cls>", "<edge>", "<msent>")
SPECIALS = (PAD, BOS, EOS, UNK, MASK, SEP, CLS, EDGE, MSENT)
PAD_ID, BOS_ID, EOS_ID, UNK_ID, MASK_ID, SEP_ID, CLS_ID, EDGE_ID, MSENT_ID = range(len(SPECIALS))


class Vocab:
    """Bidirectional token/id map with the special tokens at fixed ids 0-8."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str], strict: bool = False) -> list[int]:
        if strict:
            missing = [t for t in tokens if t not in self.stoi]
            if missing:
                raise InputError(f"tokens not in vocabulary: {missing[:5]}")
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS_ID:
                break
            if strip and i in (PAD_ID, BOS_ID):
                continue
            out.append(self.itos[i])
        return out

    @property
    def content_ids(self) -> np.ndarray:
        return np.arange(len(SPECIALS), len(self.itos))

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]

    def to_lines(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "Vocab":
        lines = [ln for ln in lines if ln]
        if tuple(lines[:len(SPECIALS)]) != SPECIALS:
            raise InputError("vocabulary file does not start with the special tokens")
        return cls(lines[len(SPECIALS):])

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]]) -> "Vocab":
        """Vocabulary over all tokens, in sorted order so it is seed-independent."""
        seen = set()
        for s in sentences:
            seen.update(s)
        return cls(sorted(seen - set(SPECIALS)))


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID, min_len: int = 1) -> np.ndarray:
    width = max([len(s) for s in seqs] + [min_len])
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out
