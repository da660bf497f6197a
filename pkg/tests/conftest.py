import numpy as np
import pytest

from docfusion.autograd import Tensor
from docfusion.data import SyntheticConfig, generate_synthetic
from docfusion.vocab import Vocab


def identity_attention(d: int, d_in: int | None = None) -> dict:
    """Attention weights with identity projections and zero biases."""
    d_in = d if d_in is None else d_in
    eye_in = np.eye(d_in, d)
    return {"wq": Tensor(np.eye(d)), "bq": Tensor(np.zeros(d)),
            "wk": Tensor(eye_in), "bk": Tensor(np.zeros(d)),
            "wv": Tensor(eye_in), "bv": Tensor(np.zeros(d)),
            "wo": Tensor(np.eye(d)), "bo": Tensor(np.zeros(d)),
            "ln_g": Tensor(np.ones(d)), "ln_b": Tensor(np.zeros(d))}


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(SyntheticConfig(num_docs=40, sents_per_doc=5, seed=3,
                                              num_references=2))


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    sents = [r.source for r in small_corpus.records] + [r.target for r in small_corpus.records]
    sents += [ref for refs in small_corpus.references.values() for ref in refs]
    return Vocab.build(sents)
