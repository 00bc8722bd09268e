"""Command-line entry point: train, predict, evaluate, gradcheck, synth."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import RunConfig
from .data import ConfigError, ParseError, SchemaError, SyntheticConfig, make_synthetic_corpus, parse_squad, to_squad_json
from .gradcheck import gradcheck_config, gradcheck_model
from .metrics import evaluate_corpus
from .nn import CheckpointError
from .optim import NonFiniteGradient
from .train import evaluate_model, load_trained, predict, train

EXIT_DATA = 2
EXIT_FAILED = 1


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    group = parser.add_argument_group("config overrides")
    for key, value in RunConfig().flat().items():
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar=type(value).__name__.upper(), default=None)


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then the environment seed, then explicit flags."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.apply_env()
    for name, value in vars(args).items():
        if name.startswith("cfg:") and value is not None:
            cfg.set(name[4:], value)
    cfg.validate()
    return cfg


def _cmd_train(args) -> int:
    cfg = build_config(args)
    if not cfg.data.train:
        raise ConfigError("data.train is required")
    # parse before the first step so schema problems surface immediately
    train_ex = parse_squad(cfg.data.train)
    dev_ex = parse_squad(cfg.data.dev) if cfg.data.dev else None
    result = train(cfg, train_ex, dev_ex, out_dir=cfg.data.out_dir, resume=args.resume)
    summary = {"out_dir": cfg.data.out_dir, "steps": len(result.steps), "best_dev_f1": result.best_dev_f1}
    if result.final_dev:
        summary["final"] = result.final_dev
    print(json.dumps(summary))
    return 0


def _cmd_predict(args) -> int:
    _, model, vocab = load_trained(args.run, args.checkpoint)
    examples = parse_squad(args.data)
    preds = predict(model, vocab, examples)
    text = json.dumps(preds, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def _cmd_evaluate(args) -> int:
    examples = parse_squad(args.data)
    if args.pred:
        with open(args.pred, encoding="utf-8") as fh:
            preds = json.load(fh)
        if not isinstance(preds, dict):
            raise SchemaError("predictions must be a JSON object mapping id to answer text")
        report = evaluate_corpus(preds, examples)
    elif args.run:
        _, model, vocab = load_trained(args.run, args.checkpoint)
        report = evaluate_model(model, vocab, examples)
    else:
        raise ConfigError("evaluate needs --pred or --run")
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def _cmd_gradcheck(args) -> int:
    ok = True
    for seed in args.seeds:
        cfg = gradcheck_config(seed, experts=args.experts)
        cfg.decoder.moe_enabled = not args.no_moe
        cfg.model.residual_coattention = not args.no_residual
        report = gradcheck_model(cfg, seed, m=args.m, n=args.n, max_entries=args.max_entries or None)
        print(report.summary())
        ok &= report.passed
    return 0 if ok else EXIT_FAILED


def _cmd_synth(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    scfg = SyntheticConfig.from_text(text)
    for key in ("vocab_size", "doc_len", "corpus_size", "seed"):
        value = getattr(args, key)
        if value is not None:
            setattr(scfg, key, value)
    examples = make_synthetic_corpus(scfg)
    data = json.dumps(to_squad_json(examples))
    if args.out:
        Path(args.out).write_text(data)
    else:
        print(data)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coattn", description="Coattention question answering with a mixed objective.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and keep the best dev checkpoint")
    _add_config_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint in data.out_dir")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="write {id: answer} predictions")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--checkpoint", help="checkpoint file (default: best.ckpt of the run)")
    p.add_argument("--data", required=True, help="SQuAD-format JSON")
    p.add_argument("--out", help="output path (default: stdout)")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="EM/F1 report as JSON")
    p.add_argument("--data", required=True, help="SQuAD-format JSON with gold answers")
    p.add_argument("--pred", help="predictions JSON")
    p.add_argument("--run", help="score a trained run directly instead of a predictions file")
    p.add_argument("--checkpoint")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and parameter")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--m", type=int, default=10, help="document length")
    p.add_argument("--n", type=int, default=5, help="question length")
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--max-entries", type=int, default=24, help="entries probed per tensor; 0 probes all")
    p.add_argument("--no-moe", action="store_true")
    p.add_argument("--no-residual", action="store_true")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic SQuAD-format corpus")
    p.add_argument("--config", help="key = value synthetic corpus settings")
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--doc-len", dest="doc_len", type=int)
    p.add_argument("--size", dest="corpus_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output path (default: stdout)")
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ParseError, SchemaError, ConfigError, CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteGradient as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
