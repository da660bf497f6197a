"""
The same pipeline from the command line
=======================================

Each step is one ``docfusion`` command; here they are driven through
``dispatch`` so the script is self-contained. Every run directory gets a
frozen ``config.ini`` and a ``manifest.json``.
"""

# %%
import json
import tempfile
from pathlib import Path

from docfusion.cli import dispatch

root = Path(tempfile.mkdtemp(prefix="docfusion-"))
small = ["--set", "stage1_steps=200", "--set", "stage2_steps=100", "--set", "eval_every=50",
         "--set", "pretrain_steps=50", "--set", "valid_limit=64"]
data = ["--train-corpus", str(root / "data/train.jsonl"),
        "--valid-corpus", str(root / "data/valid.jsonl")]


def sh(*argv):
    code = dispatch([*argv, "--output-root", str(root)])
    print("$ docfusion", " ".join(argv[:3]), "... ->", code)
    assert code == 0


# %%
sh("gen-synthetic", "--run", "data", "--num-docs", "120", "--valid-docs", "20")
sh("pretrain-mlm", "--run", "bert", *data, *small)
sh("pretrain-gsg", "--run", "pegasus", *data, *small)
sh("train", "--run", "baseline", "--stage", "1", *data, *small)
sh("train", "--run", "fused", "--stage", "2", "--preset", "multi-context",
   "--baseline", str(root / "baseline/model.ckpt"),
   "--provider", str(root / "bert/provider_B_s.ckpt"),
   "--provider", str(root / "pegasus/provider_P_s.ckpt"), *data, *small)
sh("evaluate", "--run", "eval-base", "--checkpoint", str(root / "baseline/model.ckpt"), *data)
sh("evaluate", "--run", "eval-fused", "--checkpoint", str(root / "fused/model.ckpt"), *data)
sh("report", "--run", "summary", "--inputs", str(root / "eval-base"), str(root / "eval-fused"))

# %%
print((root / "summary/report.md").read_text())
print(json.dumps(json.loads((root / "fused/manifest.json").read_text())["checkpoints"], indent=1))
print((root / "fused/config.ini").read_text()[:400])
