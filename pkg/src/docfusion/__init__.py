"""Document-context fusion for sentence-level NMT, on numpy.

Frozen pretrained context encoders feed a parallel attention stack inside
every encoder and decoder layer of a baseline transformer.
"""
from .bleu import BleuScore, corpus_bleu
from .data import Corpus, DocumentRecord, SyntheticConfig, generate_synthetic, load_corpus
from .errors import ConfigError, ContractError, DocfusionError, InputError, ParseError, ShapeError
from .fusion import FusedModel
from .notation import EmbeddingSpec, canonical, extract_context, parse_spec
from .transformer import Transformer, TransformerConfig

__all__ = ["BleuScore", "ConfigError", "ContractError", "Corpus", "DocfusionError",
           "DocumentRecord", "EmbeddingSpec", "FusedModel", "InputError", "ParseError",
           "ShapeError", "SyntheticConfig", "Transformer", "TransformerConfig", "canonical",
           "corpus_bleu", "extract_context", "generate_synthetic", "load_corpus", "parse_spec"]
__version__ = "0.1.0"
