"""``docfusion`` command line.

Every command writes into ``<output root>/<run name>/``: its artifacts, a
frozen ``config.ini`` holding every resolved setting, and ``manifest.json``
with the input corpus hashes, checkpoint ids and artifact hashes. Settings
resolve as command-line flag, then config file, then built-in default.

Exit codes: 0 success, 2 usage, 3 validation, 4 runtime.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Corpus, SyntheticConfig, file_hash, generate_synthetic, load_corpus, merge,
                   save_corpus, split_documents)
from .errors import ConfigError, DocfusionError, InputError
from .evaluation import ExperimentReport
from .experiments import (ABLATION_LADDER, ablation, context_quality_eval, heldout_reference_eval,
                          scarcity_sweep)
from .lab import (Lab, LabConfig, Trained, load_provider, model_from_record, save_provider,
                  save_trained)
from .notation import PRESETS, canonical, parse_spec
from .training import average_checkpoints

log = logging.getLogger("docfusion")

OUTPUT_ROOT_ENV = "DOCFUSION_OUTPUT_ROOT"
COMMANDS = ("gen-synthetic", "pretrain-mlm", "pretrain-gsg", "train", "translate", "evaluate",
            "ablate", "sweep-scarcity", "context-quality", "heldout-ref", "average-checkpoints",
            "report")

# Command option defaults; None means "required or derived".
DEFAULTS = {
    "gen-synthetic": {"num_docs": 2000, "sents_per_doc": 8, "vocab_size": 48,
                      "ambiguity_rate": 0.3, "num_references": 2, "domain": "in",
                      "valid_docs": 200, "test_docs": 0, "doc_prefix": "d"},
    "pretrain-mlm": {"side": "s", "steps": None},
    "pretrain-gsg": {"side": "s", "steps": None},
    "train": {"stage": 1, "chain": None, "preset": None, "baseline": None, "parent": None,
              "steps": None, "in_domain_fraction": 1.0, "out_domain": None, "window": None},
    "translate": {"checkpoint": None, "corpus": None, "beam": 0, "target_context": None},
    "evaluate": {"checkpoint": None, "corpus": None, "beam": 0, "target_context": None},
    "ablate": {"seeds": "0,1,2", "ladder": ";".join(ABLATION_LADDER)},
    "sweep-scarcity": {"presets": "multi-context,doc-transformer", "sizes": None,
                       "seeds": "0,1,2", "baseline": None, "steps": None},
    "context-quality": {"checkpoint": None, "corpus": None, "context": None},
    "heldout-ref": {"checkpoint": None, "corpus": None},
    "average-checkpoints": {"checkpoints": None, "window": 10},
    "report": {"inputs": None},
}
COMMON = {"seed": 0, "run": None, "train_corpus": None, "valid_corpus": None}


# ---------------------------------------------------------------------------
# argument parsing


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, corpora: bool = True) -> None:
    p.add_argument("--config", help="INI file; [lab] and [<command>] sections are read")
    p.add_argument("--output-root", help=f"defaults to ${OUTPUT_ROOT_ENV} or ./runs")
    p.add_argument("--run", help="run directory name under the output root")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a [lab] setting, e.g. --set stage2_steps=300")
    p.add_argument("-v", "--verbose", action="store_true")
    if corpora:
        p.add_argument("--train-corpus", help="training corpus (.jsonl)")
        p.add_argument("--valid-corpus", help="validation corpus (.jsonl)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="docfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write a synthetic document corpus")
    _common(p, corpora=False)
    p.add_argument("--num-docs", type=int)
    p.add_argument("--sents-per-doc", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--ambiguity-rate", type=float)
    p.add_argument("--num-references", type=int)
    p.add_argument("--domain", choices=("in", "out"))
    p.add_argument("--valid-docs", type=int)
    p.add_argument("--test-docs", type=int)
    p.add_argument("--doc-prefix")

    for name, what in (("pretrain-mlm", "masked-word (B)"), ("pretrain-gsg", "masked-sentence (P)")):
        p = sub.add_parser(name, help=f"pretrain a {what} context provider")
        _common(p)
        p.add_argument("--side", choices=("s", "t"))
        p.add_argument("--steps", type=int)

    p = sub.add_parser("train", help="run one training stage")
    _common(p)
    p.add_argument("--stage", type=int, choices=(1, 2, 3))
    p.add_argument("--chain", help='fusion chain, e.g. "B_s(p,c) => P_s(3p,c,3n)"')
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--baseline", help="stage-1 checkpoint (stages 2 and 3)")
    p.add_argument("--parent", help="stage-2 checkpoint (stage 3)")
    p.add_argument("--provider", action="append", default=[], help="provider checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--window", type=int, help="checkpoint averaging window")
    p.add_argument("--in-domain-fraction", type=float)
    p.add_argument("--out-domain", help="out-of-domain corpus mixed into training")

    for name in ("translate", "evaluate"):
        p = sub.add_parser(name, help=f"{name} a corpus with a checkpoint")
        _common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--corpus", help="corpus to process (default: validation corpus)")
        p.add_argument("--beam", type=int)
        p.add_argument("--target-context", help="translations.jsonl used as target context")

    p = sub.add_parser("ablate", help="add chain components one at a time")
    _common(p)
    p.add_argument("--seeds")
    p.add_argument("--ladder", help="';'-separated chains, empty entry = baseline")
    p.add_argument("--provider", action="append", default=[])

    p = sub.add_parser("sweep-scarcity", help="train fusion blocks on growing subsets")
    _common(p)
    p.add_argument("--presets")
    p.add_argument("--sizes", help="comma-separated ascending sentence-pair counts")
    p.add_argument("--seeds")
    p.add_argument("--baseline")
    p.add_argument("--steps", type=int)
    p.add_argument("--provider", action="append", default=[])

    p = sub.add_parser("context-quality", help="one target-context model, several context sources")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--context", action="append",
                   help="NAME=translations.jsonl, or 'oracle' (repeatable)")

    p = sub.add_parser("heldout-ref", help="hold one reference out as target context")
    _common(p)
    p.add_argument("--checkpoint", action="append", help="NAME=checkpoint (repeatable)")
    p.add_argument("--corpus")

    p = sub.add_parser("average-checkpoints", help="average the best contiguous window")
    _common(p, corpora=False)
    p.add_argument("--checkpoints", nargs="+", help="checkpoint files in step order")
    p.add_argument("--window", type=int)

    p = sub.add_parser("report", help="aggregate report JSON files into markdown tables")
    _common(p, corpora=False)
    p.add_argument("--inputs", nargs="+", help="run directories or report .json files")
    return parser


# ---------------------------------------------------------------------------
# settings resolution


def _read_ini(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    if path:
        if not Path(path).is_file():
            raise InputError(f"config file {path} not found")
        cp.read(path, encoding="utf-8")
    return cp


def _section(cp, name) -> dict:
    return {k.replace("-", "_"): v for k, v in cp[name].items()} if cp.has_section(name) else {}


def _coerce(value, default):
    if value is None or default is None or not isinstance(value, str):
        return value
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    return type(default)(value)


def resolve(args: argparse.Namespace) -> tuple:
    """(command settings, LabConfig): flag > config file > default."""
    cp = _read_ini(args.config)
    defaults = {**COMMON, **DEFAULTS[args.command]}
    file_cmd = {**_section(cp, "run"), **_section(cp, args.command)}
    settings = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
        elif key in file_cmd:
            settings[key] = _coerce(file_cmd[key], default)
        else:
            settings[key] = default
    unknown = set(file_cmd) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown settings for {args.command}: {sorted(unknown)}")
    lab = dict(_section(cp, "lab"))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        lab[k.strip()] = v.strip()
    return settings, LabConfig.from_dict(lab)


def output_dir(args, settings) -> Path:
    root = args.output_root or os.environ.get(OUTPUT_ROOT_ENV) or "runs"
    name = settings.get("run") or args.command
    return Path(root) / name


def write_frozen_config(out: Path, command: str, settings: dict, lab: LabConfig) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {"command": command}
    cp[command] = {k: "" if v is None else str(v) for k, v in sorted(settings.items())}
    cp["lab"] = {k: str(v) for k, v in lab.to_dict().items()}
    with open(out / "config.ini", "w", encoding="utf-8") as fh:
        cp.write(fh)


def write_manifest(out: Path, command: str, inputs: dict, checkpoints: dict) -> None:
    artifacts = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            artifacts[str(p.relative_to(out))] = file_hash(p)
    manifest = {"command": command, "inputs": inputs, "checkpoints": checkpoints,
                "artifacts": artifacts}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                                       encoding="utf-8")


# ---------------------------------------------------------------------------
# helpers shared by commands


class Context:
    def __init__(self, args, settings, lab_config, out: Path):
        self.args = args
        self.settings = settings
        self.lab_config = lab_config
        self.out = out
        self.inputs: dict = {}
        self.checkpoints: dict = {}
        self._lab = None

    def corpus(self, key: str, path=None) -> Corpus:
        path = path or self.settings.get(key)
        if not path:
            raise ConfigError(f"--{key.replace('_', '-')} is required")
        self.inputs[key] = {"path": str(path), "sha256": file_hash(path)}
        return load_corpus(path)

    def lab(self) -> Lab:
        if self._lab is None:
            self._lab = Lab(self.corpus("train_corpus"), self.corpus("valid_corpus"),
                            self.lab_config)
            for path in getattr(self.args, "provider", []) or []:
                self._lab.set_provider(load_provider(self._lab, path))
                self.inputs[f"provider:{Path(path).name}"] = file_hash(path)
        return self._lab

    def load_model(self, path, name=None) -> Trained:
        if not path:
            raise ConfigError("a --checkpoint is required")
        record = load_checkpoint(path)
        self.inputs[f"checkpoint:{name or Path(path).name}"] = record.digest()
        return model_from_record(self.lab(), record, name)

    def record(self, name: str, trained: Trained) -> None:
        self.checkpoints[name] = trained.checkpoint_id


def _ints(text) -> list:
    if text is None or str(text).strip() == "":
        return []
    return [int(x) for x in str(text).split(",")]


def read_translations(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out[(d["doc_id"], int(d["sent_index"]))] = tuple(d["translation"].split())
            except (ValueError, KeyError) as exc:
                raise InputError(f"{path}:{i}: malformed translation line ({exc})") from None
    return out


def write_translations(path: Path, records, hyps) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r, h in zip(records, hyps):
            fh.write(json.dumps({"doc_id": r.doc_id, "sent_index": r.sent_index,
                                 "translation": " ".join(h)}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(ctx: Context) -> None:
    s = ctx.settings
    cfg = SyntheticConfig(num_docs=s["num_docs"], sents_per_doc=s["sents_per_doc"],
                          vocab_size=s["vocab_size"], ambiguity_rate=s["ambiguity_rate"],
                          seed=s["seed"], num_references=s["num_references"],
                          domain=s["domain"], doc_prefix=s["doc_prefix"])
    corpus = generate_synthetic(cfg)
    held = s["valid_docs"] + s["test_docs"]
    if held > s["num_docs"]:
        raise ConfigError("valid_docs + test_docs exceed num_docs")
    valid, test, train = split_documents(
        corpus, [s["valid_docs"], s["test_docs"], s["num_docs"] - held], seed=s["seed"])
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        if name == "test" and not s["test_docs"]:
            continue
        save_corpus(part, ctx.out / f"{name}.jsonl")


def cmd_pretrain(ctx: Context, kind: str) -> None:
    lab = ctx.lab()
    provider = lab.pretrain_provider(kind, ctx.settings["side"], steps=ctx.settings["steps"])
    path = ctx.out / f"provider_{kind}_{ctx.settings['side']}.ckpt"
    save_provider(lab, provider, path)
    with open(ctx.out / "losses.csv", "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(provider.pretrain_losses, 1):
            fh.write(f"{i},{loss:.6f}\n")
    ctx.checkpoints[path.name] = load_checkpoint(path).digest()


def resolve_chain(settings) -> str | None:
    chain, preset = settings.get("chain"), settings.get("preset")
    if chain and preset:
        raise ConfigError("give either --chain or --preset, not both")
    text = chain or preset
    return canonical(text) if text else None


def _save_series(ctx: Context, lab: Lab, trained: Trained) -> None:
    series_dir = ctx.out / "checkpoints"
    for rec in trained.series:
        save_checkpoint(rec, series_dir / f"step_{rec.step:06d}.ckpt")
    save_trained(lab, trained, ctx.out / "model.ckpt")
    with open(ctx.out / "losses.csv", "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(trained.losses, 1):
            fh.write(f"{i},{loss:.6f}\n")
    with open(ctx.out / "validation.csv", "w", encoding="utf-8") as fh:
        fh.write("step,bleu\n")
        for rec in trained.series:
            fh.write(f"{rec.step},{rec.score:.6f}\n")
    ctx.record("model.ckpt", trained)


def cmd_train(ctx: Context) -> None:
    s, lab = ctx.settings, ctx.lab()
    chain = resolve_chain(s)
    stage = s["stage"]
    corpus = lab.train
    if s["out_domain"]:
        corpus = merge(corpus, ctx.corpus("out_domain", s["out_domain"]))
    if stage == 1:
        if chain:
            raise ConfigError("stage 1 trains the baseline; it takes no chain")
        trained = lab.train_baseline(s["seed"], corpus, s["steps"], s["window"])
    else:
        if not chain:
            raise ConfigError(f"stage {stage} needs --chain or --preset")
        if not s["baseline"]:
            raise ConfigError(f"stage {stage} needs --baseline (a stage-1 checkpoint)")
        baseline = ctx.load_model(s["baseline"], "baseline")
        parent = ctx.load_model(s["parent"], "parent") if stage == 3 else None
        if stage == 3 and parent is None:
            raise ConfigError("stage 3 needs --parent (a stage-2 checkpoint)")
        for spec in (parent.chain if parent else ()):
            if spec.model != "D":
                lab.set_provider(parent.model.provider_for(spec))
        trained = lab.train_fused(chain, baseline, s["seed"], corpus, s["steps"], stage, parent,
                                  s["in_domain_fraction"], s["window"])
    _save_series(ctx, lab, trained)


def _target_context(ctx: Context):
    path = ctx.settings.get("target_context")
    if not path:
        return None
    ctx.inputs["target_context"] = {"path": str(path), "sha256": file_hash(path)}
    return read_translations(path)


def cmd_translate(ctx: Context) -> None:
    from .evaluation import translate
    lab = ctx.lab()
    trained = ctx.load_model(ctx.settings["checkpoint"])
    corpus = ctx.corpus("corpus") if ctx.settings["corpus"] else lab.valid
    feat = lab.featurizer(corpus, _target_context(ctx))
    hyps = translate(trained.model, feat, corpus.records, lab.config.decode_batch,
                     ctx.settings["beam"])
    write_translations(ctx.out / "translations.jsonl", corpus.records, hyps)


def cmd_evaluate(ctx: Context) -> None:
    lab = ctx.lab()
    trained = ctx.load_model(ctx.settings["checkpoint"])
    corpus = ctx.corpus("corpus") if ctx.settings["corpus"] else lab.valid
    ev = lab.evaluate(trained, corpus, _target_context(ctx), beam=ctx.settings["beam"])
    b = ev["bleu_detail"]
    report = ExperimentReport("evaluate", {"checkpoint": trained.checkpoint_id,
                                           "corpus": corpus.fingerprint(),
                                           "beam": ctx.settings["beam"]})
    report.add(model=trained.name, chain=trained.model.chain_string(), bleu=b.score,
               p1=b.precisions[0], p2=b.precisions[1], p3=b.precisions[2], p4=b.precisions[3],
               bp=b.brevity_penalty, hyp_len=b.hyp_len, ref_len=b.ref_len,
               ctx_acc=ev["ctx_acc"], ctx_total=ev["ctx_total"], checkpoint=trained.checkpoint_id)
    report.write(ctx.out)
    write_translations(ctx.out / "translations.jsonl", corpus.records, ev["hypotheses"])


def cmd_ablate(ctx: Context) -> None:
    lab = ctx.lab()
    ladder = [c.strip() for c in ctx.settings["ladder"].split(";")]
    report, trained = ablation(lab, _ints(ctx.settings["seeds"]), ladder)
    report.write(ctx.out)
    for (label, seed), t in trained.items():
        ctx.checkpoints[f"{label}#{seed}"] = t.checkpoint_id


def cmd_sweep(ctx: Context) -> None:
    s, lab = ctx.settings, ctx.lab()
    sizes = _ints(s["sizes"])
    if not sizes:
        raise ConfigError("--sizes is required")
    presets = [p.strip() for p in s["presets"].split(",") if p.strip()]
    for p in presets:
        parse_spec(p)
    baseline = (ctx.load_model(s["baseline"], "baseline") if s["baseline"]
                else lab.train_baseline(s["seed"]))
    ctx.record("baseline", baseline)
    report = scarcity_sweep(lab, presets, sizes, _ints(s["seeds"]), baseline, s["steps"])
    report.write(ctx.out)


def cmd_context_quality(ctx: Context) -> None:
    lab = ctx.lab()
    trained = ctx.load_model(ctx.settings["checkpoint"])
    corpus = ctx.corpus("corpus") if ctx.settings["corpus"] else lab.valid
    sources = {}
    for item in ctx.settings["context"] or []:
        if item == "oracle":
            sources["oracle"] = None
            continue
        if "=" not in item:
            raise ConfigError(f"--context expects NAME=PATH or 'oracle', got {item!r}")
        name, path = item.split("=", 1)
        if not Path(path).is_file():
            raise InputError(f"context run {name!r}: translations file {path} is missing")
        sources[name] = read_translations(path)
        ctx.inputs[f"context:{name}"] = file_hash(path)
    if not sources:
        raise ConfigError("give at least one --context")
    context_quality_eval(lab, trained, corpus, sources).write(ctx.out)


def cmd_heldout(ctx: Context) -> None:
    lab = ctx.lab()
    corpus = ctx.corpus("corpus") if ctx.settings["corpus"] else lab.valid
    models = {}
    for item in ctx.settings["checkpoint"] or []:
        name, _, path = item.rpartition("=")
        name = name or Path(path).stem
        models[name] = ctx.load_model(path, name)
    if not models:
        raise ConfigError("give at least one --checkpoint NAME=PATH")
    heldout_reference_eval(lab, models, corpus).write(ctx.out)


def cmd_average(ctx: Context) -> None:
    paths = ctx.settings["checkpoints"]
    if not paths:
        raise ConfigError("--checkpoints is required")
    series = [load_checkpoint(p) for p in paths]
    for p, rec in zip(paths, series):
        ctx.inputs[Path(p).name] = rec.digest()
    avg = average_checkpoints(series, ctx.settings["window"])
    save_checkpoint(avg, ctx.out / "averaged.ckpt")
    ctx.checkpoints["averaged.ckpt"] = avg.digest()


def cmd_report(ctx: Context) -> None:
    inputs = ctx.settings["inputs"]
    if not inputs:
        raise ConfigError("--inputs is required")
    files = []
    for item in inputs:
        p = Path(item)
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    reports = []
    for f in files:
        if f.name in ("manifest.json",):
            continue
        try:
            reports.append(ExperimentReport.from_json(f.read_text(encoding="utf-8")))
        except (ValueError, KeyError):
            raise InputError(f"{f} is not an experiment report") from None
    if not reports:
        raise InputError("no experiment reports found")
    parts = ["# Experiment summary", ""]
    for rep in reports:
        parts.append(rep.to_markdown())
        ctx.inputs[rep.experiment] = rep.config_hash
    (ctx.out / "report.md").write_text("\n".join(parts), encoding="utf-8")


HANDLERS = {
    "gen-synthetic": cmd_gen_synthetic,
    "pretrain-mlm": lambda ctx: cmd_pretrain(ctx, "B"),
    "pretrain-gsg": lambda ctx: cmd_pretrain(ctx, "P"),
    "train": cmd_train,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep-scarcity": cmd_sweep,
    "context-quality": cmd_context_quality,
    "heldout-ref": cmd_heldout,
    "average-checkpoints": cmd_average,
    "report": cmd_report,
}


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("docfusion: a command is required (see --help)")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings, lab_config = resolve(args)
        out = output_dir(args, settings)
        out.mkdir(parents=True, exist_ok=True)
        ctx = Context(args, settings, lab_config, out)
        HANDLERS[args.command](ctx)
        write_frozen_config(out, args.command, settings, lab_config)
        write_manifest(out, args.command, ctx.inputs, ctx.checkpoints)
        print(out)
        return 0
    except DocfusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        # bad values coming from config files or flags
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


def main(argv=None) -> None:
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
