import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docfusion.data import (Corpus, DocumentRecord, SyntheticConfig, file_hash, generate_synthetic,
                            load_corpus, marked_positions, merge, sample_batches, save_corpus,
                            split_documents, subsample)
from docfusion.errors import ConfigError, InputError
from docfusion.notation import extract_context, parse_spec


def write_lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


def row(doc, i, src="a b", tgt="x y", domain="in"):
    return {"doc_id": doc, "sent_index": i, "source": src, "target": tgt, "domain": domain}


def two_domain_corpus(n_in=30, n_out=30):
    a = generate_synthetic(SyntheticConfig(num_docs=n_in, sents_per_doc=4, seed=1))
    b = generate_synthetic(SyntheticConfig(num_docs=n_out, sents_per_doc=4, seed=2,
                                           domain="out", doc_prefix="o"))
    return merge(a, b)


# loading -------------------------------------------------------------------------

def test_empty_file_is_empty_corpus(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text("")
    assert len(load_corpus(p)) == 0


def test_two_documents_of_three(tmp_path):
    p = tmp_path / "c.jsonl"
    write_lines(p, [row(d, i) for d in ("A", "B") for i in range(3)])
    c = load_corpus(p)
    assert len(c) == 6 and len(c.documents) == 2
    assert c.records[0] == DocumentRecord("A", 0, ("a", "b"), ("x", "y"), "in")


def test_duplicate_key_rejected(tmp_path):
    p = tmp_path / "c.jsonl"
    write_lines(p, [row("A", 0), row("A", 0)])
    with pytest.raises(InputError, match="duplicate"):
        load_corpus(p)


def test_non_contiguous_index_rejected(tmp_path):
    p = tmp_path / "c.jsonl"
    write_lines(p, [row("A", 0), row("A", 2)])
    with pytest.raises(InputError, match="contiguous"):
        load_corpus(p)


@pytest.mark.parametrize("bad", ["{not json", json.dumps({"doc_id": "A"}),
                                 json.dumps(row("A", -1)), json.dumps(row("A", 1, src=""))])
def test_malformed_line_reports_line_number(tmp_path, bad):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps(row("A", 0)) + "\n" + bad + "\n")
    with pytest.raises(InputError) as exc:
        load_corpus(p)
    if "empty side" not in str(exc.value):
        assert ":2:" in str(exc.value)


def test_missing_file(tmp_path):
    with pytest.raises(InputError):
        load_corpus(tmp_path / "nope.jsonl")


def test_round_trip_with_sidecars(tmp_path):
    c = generate_synthetic(SyntheticConfig(num_docs=5, seed=4, num_references=3))
    p = tmp_path / "c.jsonl"
    save_corpus(c, p)
    back = load_corpus(p)
    assert back.records == c.records
    assert back.references == c.references
    assert back.context_dependent == c.context_dependent
    assert back.fingerprint() == c.fingerprint()


# sampling --------------------------------------------------------------------------

def test_full_in_domain_fraction():
    c = two_domain_corpus()
    stream = sample_batches(c, 16, 1.0, seed=0)
    for _ in range(50):
        assert all(r.domain == "in" for r in next(stream))


def test_half_fraction_over_10k_batches():
    stream = sample_batches(two_domain_corpus(), 7, 0.5, seed=3)
    n_in = total = 0
    for _ in range(10_000):
        batch = next(stream)
        n_in += sum(r.domain == "in" for r in batch)
        total += len(batch)
    assert abs(n_in / total - 0.5) <= 0.01


def test_same_seed_same_stream():
    c = two_domain_corpus()
    a, b = sample_batches(c, 8, 0.7, seed=5), sample_batches(c, 8, 0.7, seed=5)
    for _ in range(100):
        assert [r.key for r in next(a)] == [r.key for r in next(b)]


def test_missing_pool_is_config_error():
    only_out = two_domain_corpus().domain("out")
    with pytest.raises(ConfigError):
        next(sample_batches(only_out, 4, 0.3))
    with pytest.raises(ConfigError):
        next(sample_batches(two_domain_corpus().domain("in"), 4, 0.5))


@settings(max_examples=20, deadline=None)
@given(batch=st.integers(1, 17), seed=st.integers(0, 100))
def test_epoch_is_a_partition(batch, seed):
    c = generate_synthetic(SyntheticConfig(num_docs=6, sents_per_doc=5, seed=seed))
    stream = sample_batches(c, batch, 1.0, seed)
    seen = []
    while len(seen) < len(c):
        seen.extend(r.key for r in next(stream))
    epoch = seen[:len(c)]
    assert sorted(epoch) == sorted(r.key for r in c.records)


# subsampling -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def synthetic():
    return generate_synthetic(SyntheticConfig(num_docs=60, sents_per_doc=5, seed=7,
                                              num_references=2))


def test_subsample_extremes(synthetic):
    assert subsample(synthetic, len(synthetic), 1).records == synthetic.records
    assert len(subsample(synthetic, 0, 1)) == 0
    with pytest.raises(InputError):
        subsample(synthetic, len(synthetic) + 1)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 300), seed=st.integers(0, 50))
def test_subsample_keeps_whole_documents_and_windows(synthetic, n, seed):
    sub = subsample(synthetic, n, seed)
    assert len(sub) >= n
    assert len(sub) < n + 5  # at most one document of overshoot
    spec = parse_spec("P_s(3p,c,3n)")[0]
    for doc_id, recs in sub.documents.items():
        assert recs == synthetic.documents[doc_id]
        for r in recs:
            assert extract_context(recs, r.sent_index, spec) == \
                extract_context(synthetic.documents[doc_id], r.sent_index, spec)
    # nested under a fixed seed
    assert set(sub.documents) <= set(subsample(synthetic, min(n + 40, 300), seed).documents)


def test_split_documents_are_disjoint(synthetic):
    a, b = split_documents(synthetic, [40, 20], seed=0)
    assert not set(a.documents) & set(b.documents)
    assert len(a.documents) == 40 and len(b.documents) == 20
    assert a.references and set(a.references) <= {r.key for r in a.records}


def test_document_stream_drops_single_sentences():
    recs = [DocumentRecord("solo", 0, ("a",), ("x",)),
            DocumentRecord("pair", 0, ("a",), ("x",)), DocumentRecord("pair", 1, ("b",), ("y",))]
    c = Corpus.from_records(recs)
    assert not c.has_document_context("solo")
    assert list(c.document_stream().documents) == ["pair"]


# synthetic generator ---------------------------------------------------------------------

def test_same_seed_byte_identical(tmp_path):
    cfg = SyntheticConfig(num_docs=30, seed=9, num_references=2)
    save_corpus(generate_synthetic(cfg), tmp_path / "a.jsonl")
    save_corpus(generate_synthetic(cfg), tmp_path / "b.jsonl")
    for kind in ("", ".refs", ".manifest"):
        assert file_hash(tmp_path / f"a{kind}.jsonl") == file_hash(tmp_path / f"b{kind}.jsonl")


@pytest.mark.parametrize("rate", [0.1, 0.3, 0.6])
def test_ambiguous_fraction_matches_rate(rate):
    c = generate_synthetic(SyntheticConfig(num_docs=500, seed=1, ambiguity_rate=rate))
    dependent = sum(len(v) for v in c.context_dependent.values())
    marked = sum(len(marked_positions(r)) for r in c.records)
    assert abs(dependent / marked - rate) <= 0.02


def test_dependent_tokens_are_markers_missing_from_source():
    c = generate_synthetic(SyntheticConfig(num_docs=50, seed=2))
    for r in c.records:
        for pos in c.context_dependent[r.key]:
            assert pos in marked_positions(r)
    # document latents are constant
    for recs in c.documents.values():
        tense = {t for r in recs for t in r.target if t in ("-ed", "-s")}
        assert len(tense) == 1


def test_vanishing_ambiguity_is_sentence_determined():
    c = generate_synthetic(SyntheticConfig(num_docs=100, seed=3, ambiguity_rate=1e-12))
    assert not any(c.context_dependent.values())
    # the same source sentence always has the same translation
    seen = {}
    for r in c.records:
        assert seen.setdefault(r.source, r.target) == r.target


def test_generator_config_errors():
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(vocab_size=10))
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(ambiguity_rate=0.0))
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(ambiguity_rate=1.0))


def test_references_are_synonym_variants():
    c = generate_synthetic(SyntheticConfig(num_docs=40, seed=5, num_references=3))
    lengths = Counter()
    for r in c.records:
        refs = c.references[r.key]
        assert len(refs) == 2
        for ref in refs:
            assert len(ref) == len(r.target)
            lengths[ref == r.target] += 1
            assert all(a == b or a + "'" == b for a, b in zip(r.target, ref))
    assert lengths[False] > lengths[True]
