"""Context-embedding notation: ``Model_Side(Inputs)`` specs chained with ``=>``.

>>> chain = parse_spec("B_s(p,c) => B_s(c,n) => P_s(3p,c,3n)")
>>> format_chain(chain)
'B_s(p,c) => B_s(c,n) => P_s(3p,c,3n)'
>>> format_chain(parse_spec("multi-source"))
'B_s(c) => P_s(c)'

Grammar (whitespace allowed between tokens)::

    chain  := term ("=>" term)*
    term   := spec | preset-name
    spec   := MODEL "_" SIDE "(" item ("," item)* ")"
    item   := [COUNT] ("p" | "c" | "n")

``MODEL`` is one of B (masked-word provider), P (masked-sentence provider) or
D (context encoder trained from scratch); ``SIDE`` is ``s`` or ``t``. The
unicode arrow is accepted as a synonym for ``=>``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from .errors import ContractError, InputError, ParseError
from .vocab import EDGE, SEP

MODELS = ("B", "P", "D")
SIDES = ("s", "t")
OFFSETS = {"p": "previous", "c": "current", "n": "next"}
_ORDER = {"previous": 0, "current": 1, "next": 2}
_LETTER = {v: k for k, v in OFFSETS.items()}

PRESETS = {
    "multi-source": "B_s(c) => P_s(c)",
    "multi-context": "B_s(p,c) => B_s(c,n) => P_s(3p,c,3n)",
    "multi-context+target": "B_s(p,c) => B_s(c,n) => P_s(3p,c,3n) => P_t(3p,3n)",
    "bert-fused": "B_s(p,c)",
    "doc-transformer": "D_s(p,c)",
}


@dataclass(frozen=True)
class WindowItem:
    offset: str  # previous | current | next
    count: int = 1


@dataclass(frozen=True)
class EmbeddingSpec:
    model: str
    side: str
    inputs: tuple

    def __post_init__(self):
        if self.model not in MODELS:
            raise ContractError(f"unknown model {self.model!r}")
        if self.side not in SIDES:
            raise ContractError(f"unknown side {self.side!r}")
        if not self.inputs:
            raise ContractError("embedding spec needs at least one input")
        offsets = [i.offset for i in self.inputs]
        if len(set(offsets)) != len(offsets):
            raise ContractError("each of p, c, n may appear at most once")
        if any(i.count < 1 for i in self.inputs):
            raise ContractError("window counts must be >= 1")
        if any(i.offset == "current" and i.count != 1 for i in self.inputs):
            raise ContractError("the current sentence has no count")

    @property
    def uses_context(self) -> bool:
        """True when the spec reads any sentence other than the current one."""
        return any(i.offset != "current" for i in self.inputs)

    @property
    def provider_key(self) -> str:
        """Which provider serves this spec, e.g. ``"B.s"``."""
        return f"{self.model}.{self.side}"

    def window(self, offset: str) -> int:
        for item in self.inputs:
            if item.offset == offset:
                return item.count
        return 0

    def __str__(self) -> str:
        return format_spec(self)


FusionChain = tuple  # ordered tuple of EmbeddingSpec; order is the attention order


def format_spec(spec: EmbeddingSpec) -> str:
    items = sorted(spec.inputs, key=lambda i: _ORDER[i.offset])
    body = ",".join(("" if i.count == 1 else str(i.count)) + _LETTER[i.offset] for i in items)
    return f"{spec.model}_{spec.side}({body})"


def format_chain(chain: Sequence[EmbeddingSpec]) -> str:
    return " => ".join(format_spec(s) for s in chain)


_TOKEN = re.compile(r"\s*(=>|⇒|[A-Za-z][A-Za-z0-9+\-]*|\d+|[_(),]|\S)")


def _tokenize(text: str) -> list[tuple[str, int]]:
    out, pos = [], 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:  # only trailing whitespace left
            break
        out.append((m.group(1), m.start(1)))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, len(self.text))

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, want: str, what: str):
        tok, pos = self.take()
        if tok != want:
            raise ParseError(f"expected {what}, found {tok!r}" if tok else f"expected {what}",
                             self.text, pos)

    def chain(self) -> list:
        specs = self.term()
        while self.peek()[0] in ("=>", "⇒"):
            self.take()
            specs.extend(self.term())
        tok, pos = self.peek()
        if tok is not None:
            raise ParseError(f"unexpected {tok!r}", self.text, pos)
        return specs

    def term(self) -> list:
        tok, pos = self.peek()
        if tok is None:
            raise ParseError("expected an embedding spec", self.text, pos)
        if tok.lower() in PRESETS:
            self.take()
            return list(parse_spec(PRESETS[tok.lower()]))
        return [self.spec()]

    def spec(self) -> EmbeddingSpec:
        tok, pos = self.take()
        model = tok
        if tok is None or len(tok) != 1 or tok not in MODELS:
            raise ParseError(f"unknown model {tok!r} (expected one of B, P, D)", self.text, pos)
        self.expect("_", "'_' after model letter")
        side, spos = self.take()
        if side not in SIDES:
            raise ParseError(f"unknown side {side!r} (expected s or t)", self.text, spos)
        self.expect("(", "'('")
        items = []
        tok, pos = self.peek()
        if tok == ")":
            raise ParseError("empty input list", self.text, pos)
        while True:
            ipos = self.peek()[1]
            item = self.item()
            if any(i.offset == item.offset for i in items):
                raise ParseError("repeated window item", self.text, ipos)
            items.append(item)
            tok, pos = self.take()
            if tok == ")":
                break
            if tok != ",":
                raise ParseError(f"expected ',' or ')', found {tok!r}", self.text, pos)
        return EmbeddingSpec(model, side, tuple(sorted(items, key=lambda i: _ORDER[i.offset])))

    def item(self) -> WindowItem:
        tok, pos = self.take()
        if tok is None:
            raise ParseError("expected a window item", self.text, pos)
        m = re.fullmatch(r"(\d*)([A-Za-z]+)", tok) if not tok.isdigit() else None
        if tok.isdigit():
            # the tokenizer splits "3p" into "3" and "p"
            nxt, _ = self.take()
            if nxt not in OFFSETS:
                raise ParseError(f"malformed count {tok!r}", self.text, pos)
            count, letter = tok, nxt
        elif m is None or m.group(2) not in OFFSETS:
            raise ParseError(f"malformed window item {tok!r} (expected [count]p, c or [count]n)",
                             self.text, pos)
        else:
            count, letter = m.group(1), m.group(2)
        n = int(count) if count else 1
        if n < 1 or (count and count.startswith("0")):
            raise ParseError(f"malformed count {count!r}", self.text, pos)
        if letter == "c" and count:
            raise ParseError("the current sentence takes no count", self.text, pos)
        return WindowItem(OFFSETS[letter], n)


def parse_spec(text: str) -> tuple:
    """Parse a chain string (or preset name) into a tuple of :class:`EmbeddingSpec`."""
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty spec", text or "", 0)
    key = text.strip().lower()
    if key in PRESETS:
        return parse_spec(PRESETS[key])
    return tuple(_Parser(text).chain())


def canonical(text: str) -> str:
    return format_chain(parse_spec(text))


# ---------------------------------------------------------------------------
# context extraction


def _side_sentences(document, side: str, target_override=None) -> list:
    if side == "t" and target_override is not None:
        return [list(s) for s in target_override]
    if side == "s":
        return [list(r.source) for r in document]
    return [list(r.target) for r in document]


def context_groups(n_sentences: int, index: int, spec: EmbeddingSpec) -> list:
    """Sentence indices per input group, clipped to the document, in document order."""
    if not 0 <= index < n_sentences:
        raise InputError(f"sentence index {index} outside document of {n_sentences} sentences")
    groups = []
    for item in spec.inputs:
        if item.offset == "previous":
            groups.append(list(range(max(0, index - item.count), index)))
        elif item.offset == "current":
            groups.append([index])
        else:
            groups.append(list(range(index + 1, min(n_sentences, index + 1 + item.count))))
    return groups


def extract_context(document, index: int, spec: EmbeddingSpec, target_override=None) -> list:
    """Token sequence fed to the provider of ``spec`` for sentence ``index``.

    ``document`` is a sequence of records with ``source`` / ``target`` token
    lists. Target-side specs read ``target_override`` instead of the reference
    targets when it is given (one token list per sentence of the document).

    B specs produce ``segA <sep> segB`` split at the current sentence (a single
    group gives one segment); P and D specs give a flat concatenation with
    ``<sep>`` between sentences. A group that falls entirely outside the
    document is replaced by one ``<edge>`` token.
    """
    sents = _side_sentences(document, spec.side, target_override)
    groups = context_groups(len(sents), index, spec)
    if spec.model == "B":
        if len(groups) > 2:
            raise ContractError(f"{format_spec(spec)}: masked-word inputs take at most two groups")
        out = []
        for g, members in enumerate(groups):
            if g:
                out.append(SEP)
            if members:
                for m in members:
                    out.extend(sents[m])
            else:
                out.append(EDGE)
        return out
    out = []
    for members in groups:
        pieces = [sents[m] for m in members] if members else [[EDGE]]
        for piece in pieces:
            if out:
                out.append(SEP)
            out.extend(piece)
    return out


def segment_ids(tokens: Sequence[str]) -> list:
    """0 up to and including the first ``<sep>``, 1 afterwards (B inputs)."""
    ids, seg = [], 0
    for tok in tokens:
        ids.append(seg)
        if tok == SEP:
            seg = 1
    return ids
