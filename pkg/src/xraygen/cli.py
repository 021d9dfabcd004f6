"""``xraygen`` command line: gen-data, pretrain-lm, train, generate, evaluate, count-params.

Exit status is 0 on success, 1 for usage or configuration errors and 2 when
a command fails at run time. Results go to stdout (or ``--out``); progress
and diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as C
from . import decode, metrics
from . import tensor as T
from .archive import ArchiveError
from .data import CorpusFormatError, generate_corpus, load_corpus, save_corpus, split
from .model import Geometry, ModelConfig, ReportModel, build_tokenizer
from .pretrain import pretrain_lm
from .trainer import (
    AlignmentMode, ModeConfigError, TrainingDiverged, checkpoint_meta, count_trainable, fit, load_checkpoint,
)

log = logging.getLogger("xraygen")

SPLITS = "splits.json"
MODES = [m.value for m in AlignmentMode]
# published trainable-parameter counts, for the --paper-geometry comparison
REPORTED_COUNTS = {"shallow": 4.2e6, "delta": 5.0e6, "deep": 90.9e6}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -----------------------------------------------------------------------

def _config(args, overrides: dict) -> dict:
    flat = dict(overrides)
    if args.seed is not None:
        flat.update({"seed": args.seed, "train.seed": args.seed, "pretrain.seed": args.seed})
    try:
        cfg = C.load(args.config, C.nested(flat))
    except C.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    T.set_default_dtype(np.float32 if cfg["dtype"] == "float32" else np.float64)
    return cfg


def _need_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command}: --out is required")
    return Path(args.out)


def _load_splits(data_dir: Path, corpus, cfg) -> dict[str, list]:
    """Split assignment from ``splits.json`` when present, else a seeded split of the corpus."""
    by_id = {s.sample_id: s for s in corpus}
    path = data_dir / SPLITS
    if path.exists():
        ids = json.loads(path.read_text())
        missing = sorted({i for part in ids.values() for i in part} - set(by_id))
        if missing:
            raise CorpusFormatError(f"{path}: ids not in corpus: {missing[:10]}")
        parts = {name: [by_id[i] for i in part] for name, part in ids.items()}
    else:
        tr, va, te = split(corpus, cfg["data"]["ratios"], cfg["seed"])
        parts = {"train": tr, "val": va, "test": te}
    parts["all"] = list(corpus)
    return parts


def _checkpoint_path(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "last"
    return p


def _model_from_checkpoint(path: Path) -> ReportModel:
    meta = checkpoint_meta(path)
    config = ModelConfig(**meta["model"])
    tokenizer = build_tokenizer(config)
    if tokenizer.vocab != meta.get("vocab"):
        raise ArchiveError(f"{path}: checkpoint vocabulary does not match this build")
    model = ReportModel(config, tokenizer)
    load_checkpoint(model, path)
    return model


def _emit(obj, out: Optional[str]) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _need_out(args)
    cfg = _config(args, {
        "data.n": args.n, "data.normal_fraction": args.normal_fraction, "data.negation_prob": args.negation_prob,
        "data.image_size": args.image_size, "data.noise": args.noise, "data.ratios": args.ratios,
    })
    d = cfg["data"]
    if d["n"] < 1:
        raise UsageError(f"--n must be >= 1, got {d['n']}")
    corpus = generate_corpus(d["n"], d["normal_fraction"], cfg["seed"], d["image_size"], d["negation_prob"], d["noise"])
    try:
        tr, va, te = split(corpus, d["ratios"], cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    save_corpus(corpus, out, {"seed": cfg["seed"], "data": d})
    ids = {"train": [s.sample_id for s in tr], "val": [s.sample_id for s in va], "test": [s.sample_id for s in te]}
    (out / SPLITS).write_text(json.dumps(ids, indent=2) + "\n")
    log.info("wrote %d samples (%d/%d/%d) to %s", len(corpus), len(tr), len(va), len(te), out)
    return 0


def _pretrained(cfg, train_samples) -> ReportModel:
    model = ReportModel(C.model_config(cfg), build_tokenizer(C.model_config(cfg)), seed=cfg["seed"])
    pre = C.pretrain_config(cfg)
    log.info("pretraining the language model for %d steps", pre.steps)
    losses = pretrain_lm(model, [s.report for s in train_samples], pre)
    if losses:
        log.info("pretraining done, final loss %.4f", losses[-1])
    return model


def cmd_pretrain_lm(args) -> int:
    out = _need_out(args)
    cfg = _config(args, {"pretrain.steps": args.steps, "pretrain.lr": args.lr})
    data_dir = Path(args.data)
    parts = _load_splits(data_dir, load_corpus(data_dir), cfg)
    out.mkdir(parents=True, exist_ok=True)
    C.dump(cfg, out / "config.json")
    model = _pretrained(cfg, parts["train"])
    model.save_lm(out / "lm")
    return 0


def cmd_train(args) -> int:
    run_dir = _need_out(args)
    cfg = _config(args, {
        "train.mode": args.mode, "train.lr": args.lr, "train.steps": args.steps, "train.batch_size": args.batch_size,
        "train.lora_r": args.lora_r, "train.lora_alpha": args.lora_alpha, "train.optimizer": args.optimizer,
        "train.eval_every": args.eval_every, "train.checkpoint_every": args.checkpoint_every,
        "pretrain.steps": args.pretrain_steps, "dtype": args.dtype,
    })
    data_dir = Path(args.data)
    parts = _load_splits(data_dir, load_corpus(data_dir), cfg)
    train_config = C.train_config(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    C.dump(cfg, run_dir / "config.json")

    lm_path = Path(args.lm) if args.lm else run_dir / "lm"
    if args.lm or (args.resume and (run_dir / "lm.json").exists()):
        model = ReportModel(C.model_config(cfg), build_tokenizer(C.model_config(cfg)), seed=cfg["seed"])
        model.load_lm(lm_path)
    else:
        model = _pretrained(cfg, parts["train"])
        model.save_lm(lm_path)

    report = fit(model, parts["train"], train_config, parts.get("val", ()), run_dir, resume=args.resume)
    n = count_trainable(model, train_config.mode)
    log.info("trainable parameters (%s): %d", train_config.mode, n)
    losses = report.train_losses()
    _emit({
        "mode": report.mode,
        "trainable": n,
        "steps": train_config.steps,
        "final_loss": losses[-1] if losses else None,
        "best_val": report.best_val,
        "epoch_seconds": report.epoch_seconds,
        "run_dir": str(run_dir),
    }, None)
    return 0


def cmd_generate(args) -> int:
    out = _need_out(args)
    cfg = _config(args, {
        "decode.beam_size": args.beam_size, "decode.max_len": args.max_len,
        "decode.length_penalty": args.length_penalty,
    })
    ckpt = _checkpoint_path(args.checkpoint)
    meta = checkpoint_meta(ckpt)
    if args.mode and AlignmentMode.parse(args.mode).value != meta.get("mode"):
        raise ModeConfigError(f"checkpoint {ckpt} was trained in {meta.get('mode')!r} mode, not {args.mode!r}")
    model = _model_from_checkpoint(ckpt)
    data_dir = Path(args.data)
    samples = _load_splits(data_dir, load_corpus(data_dir), cfg)[args.split]
    dec = cfg["decode"]
    results = decode.generate(model, [s.image for s in samples], dec["beam_size"], dec["max_len"], dec["length_penalty"])
    decode.write_generations(out, [s.sample_id for s in samples], results)
    log.info("wrote %d generations to %s", len(results), out)
    return 0


def cmd_evaluate(args) -> int:
    records = decode.read_generations(args.generations)
    if not records:
        raise ValueError(f"{args.generations}: no generations to evaluate")
    refs = {s.sample_id: s.report for s in load_corpus(args.data)}
    ids = [r["id"] for r in records]
    unknown = [i for i in ids if i not in refs]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if unknown or dupes:
        raise ValueError(f"generation ids do not match references: unknown={unknown[:20]} duplicated={dupes[:20]}")
    results = metrics.evaluate([r["text"] for r in records], [refs[i] for i in ids])
    if args.out:
        _emit(results, args.out)
    if args.json:
        _emit(results, None)
    else:
        sys.stdout.write(metrics.format_table(results) + "\n")
    return 0


def count_table(geometry: Geometry) -> dict[str, int]:
    return {m: geometry.count(m) for m in MODES}


def cmd_count_params(args) -> int:
    cfg = _config(args, {"train.lora_r": args.lora_r})
    r = cfg["train"]["lora_r"]
    if args.paper_geometry:
        geometry = Geometry.full_size()
        geometry.lora_r = r
    else:
        geometry = Geometry.from_config(C.model_config(cfg), lora_r=r)
    counts = count_table(geometry)
    if args.json:
        _emit(counts, args.out)
        return 0
    lines = [f"{'mode':<8} {'trainable':>12}" + ("  reported   rel.diff" if args.paper_geometry else "")]
    for mode, n in counts.items():
        row = f"{mode:<8} {n:>12,}"
        if args.paper_geometry:
            row += f"  {REPORTED_COUNTS[mode] / 1e6:>6.1f}M  {abs(n - REPORTED_COUNTS[mode]) / REPORTED_COUNTS[mode]:>8.2%}"
        lines.append(row)
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# -- parser ------------------------------------------------------------------------

def _ratios(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return vals


GLOBAL_DEFAULTS = {"seed": None, "out": None, "config": None, "verbose": False}


def _global_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (default 0)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output path (directory or file, per command)")
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file; flags override it")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="debug logging on stderr")


def build_parser() -> argparse.ArgumentParser:
    # global flags work before or after the subcommand; SUPPRESS keeps the
    # subparser from overwriting a value given up front
    common = _Parser(add_help=False)
    _global_flags(common)
    parser = _Parser(prog="xraygen", description=__doc__.splitlines()[0])
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n", type=int)
    p.add_argument("--normal-fraction", type=float)
    p.add_argument("--negation-prob", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--ratios", type=_ratios, help="train,val,test fractions (default 0.7,0.1,0.2)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-lm", parents=[common], help="pretrain and save the frozen language model")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_pretrain_lm)

    p = sub.add_parser("train", parents=[common], help="train in one alignment mode")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lora-r", type=int)
    p.add_argument("--lora-alpha", type=float)
    p.add_argument("--optimizer", choices=["adamw", "sgd"])
    p.add_argument("--eval-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--lm", help="pretrained LM archive from pretrain-lm (skips pretraining)")
    p.add_argument("--pretrain-steps", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--resume", action="store_true", help="continue from <out>/last")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="beam-search reports for a corpus split")
    p.add_argument("--checkpoint", required=True, help="checkpoint prefix or run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--beam-size", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--length-penalty", type=float)
    p.add_argument("--mode", choices=MODES, help="fail unless the checkpoint was trained in this mode")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="score generations against corpus reports")
    p.add_argument("--generations", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json", action="store_true", help="print JSON instead of the table")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("count-params", parents=[common], help="trainable parameters per mode")
    p.add_argument("--paper-geometry", action="store_true", help="full-size encoder/LM widths instead of the config")
    p.add_argument("--lora-r", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_count_params)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name, value in GLOBAL_DEFAULTS.items():
            if not hasattr(args, name):
                setattr(args, name, value)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"xraygen {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, ArchiveError, CorpusFormatError, ModeConfigError, TrainingDiverged) as exc:
        print(f"xraygen {args.command}: error: {exc}", file=sys.stderr)
        return 2
    finally:
        T.set_default_dtype(np.float64)


if __name__ == "__main__":
    sys.exit(main())
