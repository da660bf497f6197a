"""
Chain notation and the fusion layer
===================================

A walk through how a chain string turns into context windows and how the
external attention stack is merged with the ordinary transformer sublayer.
Runs in a few seconds on one core.
"""

# %%
import numpy as np

from docfusion.autograd import Tensor
from docfusion.data import SyntheticConfig, generate_synthetic
from docfusion.fusion import AVERAGE, DROP_BRANCH, TRUNK, FusedModel, drop_branch, merge
from docfusion.notation import PRESETS, canonical, extract_context, parse_spec
from docfusion.errors import ParseError

# %% [markdown]
# Chains are written left to right, one embedding per element. Presets are
# shorthands that expand to the same canonical string.

# %%
for name in sorted(PRESETS):
    print(f"{name:22s} {canonical(name)}")

chain = parse_spec("B_s(p, c) => B_s(c,n) ⇒ P_s(3n,c,3p)")
print(chain[2], "->", canonical("P_s(3n,c,3p)"))

# %%
# Mistakes are reported with a position.
try:
    parse_spec("B_s(p c)")
except ParseError as exc:
    print(exc)

# %% [markdown]
# Context windows come from the document the sentence sits in. The first
# sentence has no previous sentence, so that side becomes an edge marker.
# Wider windows just take whatever neighbours exist.

# %%
corpus = generate_synthetic(SyntheticConfig(num_docs=2, sents_per_doc=5, seed=0))
doc = next(iter(corpus.documents.values()))
for text in ("B_s(p,c)", "B_s(c,n)", "P_s(3p,c,3n)", "P_t(3p,3n)"):
    (spec,) = parse_spec(text)
    print(f"{text:14s}", " ".join(extract_context(doc, 0, spec)))

# %% [markdown]
# Merging. At inference time the trunk R (the usual self or cross attention)
# and the external stack S are averaged. During training one uniform draw u
# per layer picks one of them.

# %%
rng = np.random.default_rng(0)
R, S = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
print("average == (R+S)/2:", np.array_equal(merge(R, S, AVERAGE).data, (R.data + S.data) / 2))
print("u=0.7 picks R:", drop_branch(R, S, 0.7) is R, "| u=0.3 picks S:", drop_branch(R, S, 0.3) is S)
print("trunk mode is R:", merge(R, S, TRUNK) is R)

# %%
# One u per (part, layer), shared across the batch.
from docfusion.transformer import Transformer, TransformerConfig

base = Transformer(TransformerConfig(vocab_size=40, model_dim=8, num_heads=2, num_layers=2,
                                     ffn_dim=16, max_positions=16), seed=0)
model = FusedModel(base)
draws = [model.sample_us(rng) for _ in range(2000)]
for key in draws[0]:
    print(key, "trunk share", np.mean([d[key] >= 0.5 for d in draws]).round(3))
print(DROP_BRANCH, "is the training mode")
