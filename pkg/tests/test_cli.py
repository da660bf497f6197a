import configparser
import json
import subprocess
import sys

import pytest

from docfusion.checkpoint import load_checkpoint
from docfusion.cli import COMMANDS, dispatch

LAB_INI = """\
[lab]
model_dim = 16
ffn_dim = 32
provider_dim = 16
provider_ffn = 32
stage1_steps = 20
stage2_steps = 10
stage3_steps = 10
pretrain_steps = 5
eval_every = 10
valid_limit = 8
batch_size = 8
window = 2
warmup_steps = 10
"""


class Runner:
    """Runs commands under one output root with the tiny lab config."""

    def __init__(self, root):
        self.root = root
        self.ini = root / "tiny.ini"
        root.mkdir(parents=True, exist_ok=True)
        self.ini.write_text(LAB_INI)

    def __call__(self, *argv, corpora=True):
        extra = ["--output-root", str(self.root), "--config", str(self.ini)]
        if corpora:
            extra += ["--train-corpus", str(self.root / "data" / "train.jsonl"),
                      "--valid-corpus", str(self.root / "data" / "valid.jsonl")]
        return dispatch([*argv, *extra])

    def path(self, *parts):
        return str(self.root.joinpath(*parts))


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    r = Runner(tmp_path_factory.mktemp("cli"))
    assert r("gen-synthetic", "--run", "data", "--num-docs", "30", "--valid-docs", "6",
             "--sents-per-doc", "4", corpora=False) == 0
    assert r("pretrain-mlm", "--run", "mlm") == 0
    assert r("pretrain-gsg", "--run", "gsg") == 0
    assert r("train", "--run", "base") == 0
    assert r("train", "--run", "fused", "--stage", "2", "--chain", "B_s(p,c) => P_s(c)",
             "--baseline", r.path("base", "model.ckpt"),
             "--provider", r.path("mlm", "provider_B_s.ckpt"),
             "--provider", r.path("gsg", "provider_P_s.ckpt")) == 0
    assert r("train", "--run", "target", "--stage", "3", "--chain", "P_t(p,n)",
             "--baseline", r.path("base", "model.ckpt"), "--parent", r.path("fused", "model.ckpt"),
             "--provider", r.path("gsg", "provider_P_s.ckpt")) == 0
    return r


# the pipeline ------------------------------------------------------------------

def test_generated_data_and_sidecars(run):
    files = {p.name for p in (run.root / "data").iterdir()}
    assert {"train.jsonl", "valid.jsonl", "train.refs.jsonl", "train.manifest.jsonl",
            "config.ini", "manifest.json"} <= files
    assert "test.jsonl" not in files


def test_pretrain_outputs(run):
    for name, ckpt in (("mlm", "provider_B_s.ckpt"), ("gsg", "provider_P_s.ckpt")):
        lines = (run.root / name / "losses.csv").read_text().splitlines()
        assert lines[0] == "step,loss" and len(lines) == 6
        assert load_checkpoint(run.root / name / ckpt).metadata["kind"] == ckpt[9]


def test_training_outputs_and_manifest(run):
    out = run.root / "fused"
    steps = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert steps == ["step_000010.ckpt"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["checkpoints"]["model.ckpt"] == load_checkpoint(out / "model.ckpt").digest()
    assert "checkpoints/step_000010.ckpt" in manifest["artifacts"]
    assert "provider:provider_B_s.ckpt" in manifest["inputs"]
    assert (out / "validation.csv").read_text().startswith("step,bleu\n10,")


def test_stage_three_model_has_all_blocks(run):
    meta = load_checkpoint(run.root / "target" / "model.ckpt").metadata
    assert [e[1] for e in meta["elements"]] == [2, 2, 3]


def test_evaluate_twice_is_byte_identical(run):
    snapshots = []
    for _ in range(2):
        assert run("evaluate", "--run", "ev", "--checkpoint", run.path("fused", "model.ckpt")) == 0
        snapshots.append({p.name: p.read_bytes() for p in (run.root / "ev").iterdir()})
    assert set(snapshots[0]) >= {"evaluate.csv", "evaluate.md", "evaluate.json",
                                 "translations.jsonl", "manifest.json", "config.ini"}
    assert snapshots[0] == snapshots[1]


def test_translate_then_context_quality(run):
    assert run("translate", "--run", "tr", "--checkpoint", run.path("base", "model.ckpt")) == 0
    tr = run.path("tr", "translations.jsonl")
    assert run("context-quality", "--run", "cq", "--checkpoint", run.path("target", "model.ckpt"),
               "--context", f"base={tr}", "--context", "oracle") == 0
    rows = json.loads((run.root / "cq" / "context_quality.json").read_text())["rows"]
    assert [r["context"] for r in rows] == ["base", "oracle"]


def test_heldout_and_report(run):
    assert run("heldout-ref", "--run", "held",
               "--checkpoint", f"src={run.path('fused', 'model.ckpt')}",
               "--checkpoint", f"tgt={run.path('target', 'model.ckpt')}") == 0
    assert run("report", "--run", "rep", "--inputs", run.path("held"), corpora=False) == 0
    text = (run.root / "rep" / "report.md").read_text()
    assert "## heldout_reference" in text and "| src |" in text


def test_average_checkpoints_command(run):
    ckpts = sorted((run.root / "base" / "checkpoints").iterdir())
    assert run("average-checkpoints", "--run", "avg", "--window", "2",
               "--checkpoints", *map(str, ckpts), corpora=False) == 0
    avg = load_checkpoint(run.root / "avg" / "averaged.ckpt")
    assert avg.metadata["averaged_steps"] == [10, 20]


def test_ablate_and_sweep(run):
    assert run("ablate", "--run", "abl", "--seeds", "0", "--ladder", ";B_s(c)",
               "--provider", run.path("mlm", "provider_B_s.ckpt")) == 0
    assert len(json.loads((run.root / "abl" / "ablation.json").read_text())["rows"]) == 2
    assert run("sweep-scarcity", "--run", "sw", "--presets", "B_s(c)", "--sizes", "20,40",
               "--seeds", "0", "--steps", "5", "--baseline", run.path("base", "model.ckpt"),
               "--provider", run.path("mlm", "provider_B_s.ckpt")) == 0
    rows = json.loads((run.root / "sw" / "scarcity.json").read_text())["rows"]
    assert [r["size"] for r in rows] == [20, 40]


# settings resolution -----------------------------------------------------------

def frozen(path):
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(path / "config.ini")
    return cp


def test_flag_beats_file_beats_default(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[gen-synthetic]\nnum_docs = 12\nvalid_docs = 3\n[run]\nseed = 5\n")
    base = ["--output-root", str(tmp_path), "--config", str(ini)]
    assert dispatch(["gen-synthetic", "--run", "a", *base]) == 0
    assert dispatch(["gen-synthetic", "--run", "b", "--num-docs", "9", *base]) == 0
    a, b = frozen(tmp_path / "a"), frozen(tmp_path / "b")
    assert a["gen-synthetic"]["num_docs"] == "12" and b["gen-synthetic"]["num_docs"] == "9"
    assert a["gen-synthetic"]["seed"] == "5"
    assert a["gen-synthetic"]["sents_per_doc"] == "8"          # built-in default
    assert a["lab"]["model_dim"] == "32"


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DOCFUSION_OUTPUT_ROOT", str(tmp_path / "env"))
    assert dispatch(["gen-synthetic", "--num-docs", "6", "--valid-docs", "2"]) == 0
    assert (tmp_path / "env" / "gen-synthetic" / "train.jsonl").is_file()


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train", "--stage", "4"],
                                  ["train", "--no-such-flag"], ["evaluate", "--beam", "x"]])
def test_usage_errors_exit_2(argv, tmp_path):
    assert dispatch([*argv, "--output-root", str(tmp_path)] if argv else argv) == 2


def test_validation_errors_exit_3(run, tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[train]\nlearning_rat = 3\n")
    assert dispatch(["train", "--config", str(ini), "--output-root", str(tmp_path)]) == 3
    assert dispatch(["train", "--output-root", str(tmp_path)]) == 3            # no corpora
    assert run("train", "--run", "x", "--stage", "2", "--chain", "B_s(c)",
               "--preset", "multi-source") == 3
    assert run("train", "--run", "x", "--stage", "2", "--chain", "B_s(") == 3
    assert run("train", "--run", "x", "--set", "model_dim=abc") == 3
    assert run("train", "--run", "x", "--set", "no_such=1") == 3
    assert run("evaluate", "--run", "x", "--checkpoint", str(tmp_path / "missing.ckpt")) == 3


def test_every_command_has_help():
    for command in COMMANDS:
        out = subprocess.run([sys.executable, "-m", "docfusion.cli", command, "--help"],
                             capture_output=True, text=True)
        assert out.returncode == 0 and "--output-root" in out.stdout
