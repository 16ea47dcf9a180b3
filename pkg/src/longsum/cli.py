"""Command-line entry point: gen, train, summarize, eval, bench, selftest.

Settings resolve as: command-line flag, then ``--config`` JSON file, then
built-in default. Failures print a single ``error: <category>: <message>``
line to stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

from . import kernels

log = logging.getLogger("longsum")

EXIT_CODES = {"runtime": 1, "usage": 2, "missing-file": 3, "corpus": 4, "config": 5, "selftest": 6}


class CliError(Exception):
    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message.replace("\n", " "))


# name -> (default, type, help). Flags are --name with '_' -> '-'.
SHARED = {
    "config": (None, str, "JSON file of settings; keys are flag names with underscores"),
    "seed": (7, int, "seed for every random choice"),
    "out": (None, str, "output path (file or directory, per subcommand)"),
    "quiet": (False, bool, "only log warnings and errors"),
}

COMMANDS = {
    "gen": {
        "help": "write a synthetic JSONL corpus",
        "opts": {
            "task": ("copy-first-k", str, "synthetic task: copy-first-k or keyword-extract"),
            "k": (8, int, "summary length (copy-first-k) or keyword count (keyword-extract)"),
            "n": (2000, int, "number of document/summary pairs"),
        },
    },
    "train": {
        "help": "train a model on a JSONL corpus",
        "opts": {
            "corpus": (None, str, "training corpus (JSONL with 'document' and 'summary')"),
            "resume": (None, str, "checkpoint to resume from (needs its .state.npz sidecar)"),
            "vocab_size": (1000, int, "maximum vocabulary size including 5 reserved ids"),
            "learning_rate": (3e-4, float, "Adam learning rate"),
            "batch_size": (16, int, "pairs per training step"),
            "max_steps": (2000, int, "number of optimizer steps"),
            "clip_cap": (1.0, float, "gradient clipping cap C"),
            "global_clip": (False, bool, "clip by the joint norm of all gradients instead of per tensor"),
            "checkpoint_every": (500, int, "write a checkpoint every this many steps (0: final only)"),
            "beta1": (0.9, float, "Adam first-moment decay"),
            "beta2": (0.999, float, "Adam second-moment decay"),
            "eps": (1e-8, float, "Adam epsilon"),
            "d_model": (64, int, "model width"),
            "heads": (4, int, "attention heads"),
            "encoder_layers": (2, int, "encoder layers"),
            "decoder_layers": (2, int, "decoder layers"),
            "d_ff": (256, int, "feed-forward inner width"),
            "max_input_len": (512, int, "longest document in tokens, sentinel included"),
            "max_summary_len": (64, int, "longest decoder input in tokens, BOS included"),
            "window": (16, int, "sliding-window half-width w"),
            "global_positions": ("0", str, "comma-separated global token positions"),
        },
    },
    "summarize": {
        "help": "summarize documents with a trained checkpoint",
        "opts": {
            "checkpoint": (None, str, "model checkpoint file"),
            "vocab": (None, str, "vocabulary file (default: vocab.txt beside the checkpoint)"),
            "input": (None, str, "documents: JSONL corpus or one plain-text document per line"),
            "beam_width": (4, int, "beam width (1: greedy)"),
            "length_penalty": (0.6, float, "beam length penalty alpha"),
            "max_len": (64, int, "maximum summary length in tokens"),
        },
    },
    "eval": {
        "help": "score a checkpoint on a JSONL corpus (ROUGE, FPS, Token, Params)",
        "opts": {
            "checkpoint": (None, str, "model checkpoint file"),
            "vocab": (None, str, "vocabulary file (default: vocab.txt beside the checkpoint)"),
            "corpus": (None, str, "evaluation corpus (JSONL)"),
            "name": ("longsum", str, "model name shown in the report"),
            "beam_width": (4, int, "beam width (1: greedy)"),
            "length_penalty": (0.6, float, "beam length penalty alpha"),
            "max_len": (64, int, "maximum summary length in tokens"),
        },
    },
    "bench": {
        "help": "time sparse (every kernel backend) vs dense attention across lengths",
        "opts": {
            "ns": ("128,256,512,1024,2048", str, "comma-separated sequence lengths"),
            "window": (16, int, "sliding-window half-width w"),
            "globals": (1, int, "number of global tokens"),
            "d": (64, int, "head dimension"),
            "repeats": (3, int, "timing repeats per point (best is kept)"),
        },
    },
    "selftest": {
        "help": "run oracle and gradient checks and print a check matrix",
        "opts": {
            "show_pattern": (False, bool, "print the attention pattern grid"),
            "pattern_n": (24, int, "sequence length of the printed pattern"),
            "window": (2, int, "window half-width of the printed pattern"),
            "global_positions": ("0", str, "comma-separated global positions of the printed pattern"),
        },
    },
}


def _flag(name):
    return "--" + name.replace("_", "-")


def _add(parser, name, spec):
    default, typ, text = spec
    shown = "" if default is None else f" (default: {default})"
    if typ is bool:
        parser.add_argument(_flag(name), dest=name, action="store_const", const=True, default=None, help=text + shown)
    else:
        parser.add_argument(_flag(name), dest=name, type=typ, default=None, help=text + shown)


def build_parser():
    parser = _Parser(prog="longsum", description="Sparse-attention long-document summarizer.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for cmd, info in COMMANDS.items():
        p = sub.add_parser(cmd, help=info["help"], description=info["help"])
        for name, spec in SHARED.items():
            _add(p, name, spec)
        for name, spec in info["opts"].items():
            _add(p, name, spec)
    return parser


def resolve(command, args):
    """Merge defaults < config file < flags into a plain dict (the run config)."""
    specs = {**SHARED, **COMMANDS[command]["opts"]}
    resolved = {k: spec[0] for k, spec in specs.items()}
    source = {k: "default" for k in specs}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        if not os.path.exists(cfg_path):
            raise CliError("missing-file", f"config file not found: {cfg_path}")
        try:
            with open(cfg_path) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError("config", f"{cfg_path}: invalid JSON ({exc.msg})") from None
        if not isinstance(file_cfg, dict):
            raise CliError("config", f"{cfg_path}: expected a JSON object")
        for key, value in file_cfg.items():
            if key not in specs or key == "config":
                raise CliError("config", f"unknown key {key!r} for '{command}'")
            typ = specs[key][1]
            if typ is bool or value is None:
                if not isinstance(value, bool) and value is not None:
                    raise CliError("config", f"key {key!r}: expected true/false")
                resolved[key] = value
            else:
                try:
                    resolved[key] = typ(value)
                except (TypeError, ValueError):
                    raise CliError("config", f"key {key!r}: cannot convert {value!r} to {typ.__name__}") from None
            source[key] = "config"
    for key in specs:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
            source[key] = "flag"
    return resolved, source


def _positions(text, key):
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise CliError("config", f"key {key!r}: expected comma-separated integers, got {text!r}") from None


def _require(cfg, *keys):
    for key in keys:
        if cfg.get(key) in (None, ""):
            raise CliError("config", f"missing required setting {key!r} (flag {_flag(key)})")


def _require_file(path, what):
    if not os.path.exists(path):
        raise CliError("missing-file", f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(cfg):
    from .text import TASKS, generate_synthetic_corpus

    _require(cfg, "out")
    if cfg["task"] not in TASKS:
        raise CliError("config", f"key 'task': unknown task {cfg['task']!r}; choose from {', '.join(TASKS)}")
    generate_synthetic_corpus(cfg["n"], cfg["seed"], cfg["task"], cfg["out"], k=cfg["k"])
    print(f"wrote {cfg['n']} pairs to {cfg['out']}")
    return 0


def cmd_train(cfg):
    from .model import ModelConfig
    from .text import CorpusError, load_corpus
    from .training import TrainConfig, train

    _require(cfg, "corpus", "out")
    _require_file(cfg["corpus"], "corpus")
    try:
        pairs, vocab, _ = load_corpus(cfg["corpus"], max_input_len=cfg["max_input_len"],
                                      max_summary_len=cfg["max_summary_len"], max_vocab=cfg["vocab_size"])
    except CorpusError as exc:
        raise CliError("corpus", str(exc)) from None
    try:
        mcfg = ModelConfig(
            vocab_size=len(vocab), d_model=cfg["d_model"], heads=cfg["heads"],
            encoder_layers=cfg["encoder_layers"], decoder_layers=cfg["decoder_layers"], d_ff=cfg["d_ff"],
            max_input_len=cfg["max_input_len"], max_summary_len=cfg["max_summary_len"], window=cfg["window"],
            global_positions=_positions(cfg["global_positions"], "global_positions"), seed=cfg["seed"],
        )
        tnames = {f.name for f in fields(TrainConfig)}
        tcfg = TrainConfig(**{k: cfg[k] for k in tnames if k in cfg and cfg[k] is not None})
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    if cfg["resume"]:
        _require_file(cfg["resume"], "checkpoint")
    os.makedirs(cfg["out"], exist_ok=True)
    vocab.save(os.path.join(cfg["out"], "vocab.txt"))
    result = train(pairs, mcfg, tcfg, cfg["out"], resume=cfg["resume"])
    last = result.history[-1][1] if result.history else float("nan")
    print(f"trained {len(result.history)} steps, final loss {last:.4f}; checkpoint {result.checkpoint}")
    return 0


def _load_model(cfg):
    from .model import CheckpointError, load_checkpoint
    from .text import Vocabulary

    _require(cfg, "checkpoint")
    _require_file(cfg["checkpoint"], "checkpoint")
    vocab_path = cfg.get("vocab") or os.path.join(os.path.dirname(os.path.abspath(cfg["checkpoint"])), "vocab.txt")
    _require_file(vocab_path, "vocabulary")
    try:
        model = load_checkpoint(cfg["checkpoint"])
    except CheckpointError as exc:
        raise CliError("runtime", str(exc)) from None
    vocab = Vocabulary.load(vocab_path)
    if len(vocab) != model.config.vocab_size:
        raise CliError("config", f"vocabulary {vocab_path} has {len(vocab)} ids, model expects {model.config.vocab_size}")
    return model, vocab


def _decode_config(cfg):
    from .decoding import DecodeConfig

    try:
        return DecodeConfig(cfg["beam_width"], cfg["length_penalty"], cfg["max_len"])
    except ValueError as exc:
        raise CliError("config", str(exc)) from None


def _read_documents(path, vocab, max_input_len):
    from .model import GLOBAL
    from .text import CorpusError, read_jsonl, tokenize

    docs = []
    if path.endswith(".jsonl"):
        try:
            texts = [d for _, d, _ in read_jsonl(path)]
        except CorpusError as exc:
            raise CliError("corpus", str(exc)) from None
    else:
        with open(path, encoding="utf-8") as fh:
            texts = [line.rstrip("\n") for line in fh]
    for text in texts:
        docs.append([GLOBAL] + tokenize(text, vocab)[: max_input_len - 1])
    return docs


def cmd_summarize(cfg):
    from .decoding import summarize_ids
    from .tensor import no_grad
    from .text import detokenize

    _require(cfg, "input")
    model, vocab = _load_model(cfg)
    _require_file(cfg["input"], "input")
    dcfg = _decode_config(cfg)
    docs = _read_documents(cfg["input"], vocab, model.config.max_input_len)
    lines = []
    with no_grad():
        for doc in docs:
            lines.append(detokenize(summarize_ids(model, doc, dcfg), vocab))
    text = "".join(line + "\n" for line in lines)
    if cfg["out"]:
        with open(cfg["out"], "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(cfg):
    from .evaluation import evaluate_corpus
    from .text import CorpusError, load_corpus

    _require(cfg, "corpus")
    model, vocab = _load_model(cfg)
    _require_file(cfg["corpus"], "corpus")
    try:
        pairs, _, _ = load_corpus(cfg["corpus"], vocab=vocab, max_input_len=model.config.max_input_len,
                                  max_summary_len=model.config.max_summary_len)
    except CorpusError as exc:
        raise CliError("corpus", str(exc)) from None
    report = evaluate_corpus(model, pairs, _decode_config(cfg), name=cfg["name"], corpus_id=os.path.basename(cfg["corpus"]))
    print(report.table())
    out = cfg["out"] or "report.json"
    report.to_json(out)
    print(f"report written to {out}")
    return 0


def cmd_bench(cfg):
    from .evaluation import format_scaling, scaling_table

    ns = _positions(cfg["ns"], "ns")
    rows = scaling_table(ns, w=cfg["window"], n_globals=cfg["globals"], d=cfg["d"], repeats=cfg["repeats"])
    print(format_scaling(rows))
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            json.dump({"window": cfg["window"], "globals": cfg["globals"], "d": cfg["d"], "rows": rows}, fh, indent=2)
    return 0


def cmd_selftest(cfg):
    from .pattern import build_pattern
    from .selftest import run_checks

    if cfg["show_pattern"]:
        try:
            p = build_pattern(cfg["pattern_n"], cfg["window"], _positions(cfg["global_positions"], "global_positions"))
        except ValueError as exc:
            raise CliError("config", str(exc)) from None
        print(f"pattern n={p.n} w={p.w} globals={list(p.globals)}")
        print(p.render())
        print()
    results = run_checks(seed=cfg["seed"])
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    failed = [name for name, ok, _ in results if not ok]
    print(f"kernel backend: {kernels.BACKEND}")
    if failed:
        raise CliError("selftest", f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return 0


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "summarize": cmd_summarize,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "selftest": cmd_selftest,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg, source = resolve(args.command, args)
        logging.basicConfig(level=logging.WARNING if cfg["quiet"] else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        for key in sorted(cfg):
            log.info("setting %s=%r (%s)", key, cfg[key], source[key])
        return HANDLERS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.category]
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: runtime: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return EXIT_CODES["runtime"]


if __name__ == "__main__":
    sys.exit(main())
