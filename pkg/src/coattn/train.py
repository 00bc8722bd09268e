"""Training loop, prediction and checkpoint/resume plumbing."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import QAExample, Vocabulary, iterate_batches, make_batch, parse_squad
from .metrics import EvalReport, evaluate_corpus
from .model import QAModel
from .nn import load_module, load_tensors, save_module, save_tensors
from .objective import compute_losses
from .optim import Adam

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: QAModel
    vocab: Vocabulary
    steps: List[dict] = field(default_factory=list)
    epochs: List[dict] = field(default_factory=list)
    best_dev_f1: float = -1.0

    @property
    def final_dev(self) -> Optional[dict]:
        return self.epochs[-1] if self.epochs else None


def predict(model: QAModel, vocab: Vocabulary, examples: Sequence[QAExample], batch_size: int = 128) -> Dict[str, str]:
    """Greedy answers as ``{question_id: answer_text}``; disordered spans give ''."""
    out = {}
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo : lo + batch_size]
        s, e = model.predict_spans(make_batch(chunk, vocab))
        for ex, a, b in zip(chunk, s, e):
            out[ex.id] = ex.document.span_text(int(a), int(b))
    return out


def evaluate_model(model: QAModel, vocab: Vocabulary, examples: Sequence[QAExample], batch_size: int = 128) -> EvalReport:
    return evaluate_corpus(predict(model, vocab, examples, batch_size), examples)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


class _RunFiles:
    def __init__(self, out_dir):
        self.dir = Path(out_dir)

    def __getattr__(self, name):
        suffix = {
            "config": "config.txt",
            "vocab": "vocab.txt",
            "metrics": "metrics.jsonl",
            "epochs": "epochs.jsonl",
            "best": "best.ckpt",
            "last": "last.ckpt",
            "optim": "last.optim",
            "state": "last.state.json",
        }[name]
        return self.dir / suffix


def train(
    config: RunConfig,
    train_examples: Optional[Sequence[QAExample]] = None,
    dev_examples: Optional[Sequence[QAExample]] = None,
    out_dir=None,
    resume: bool = False,
) -> TrainResult:
    """Train from scratch (or resume from ``out_dir``) and evaluate on dev after every epoch."""
    config.validate()
    if train_examples is None:
        train_examples = parse_squad(config.data.train)
    if dev_examples is None and config.data.dev:
        dev_examples = parse_squad(config.data.dev)
    if not train_examples:
        raise ValueError("no usable training examples")

    files = _RunFiles(out_dir) if out_dir is not None else None
    if resume and files is not None and files.vocab.exists():
        vocab = Vocabulary.load(files.vocab)
    else:
        vocab = Vocabulary.build(train_examples, config.train.min_count)
    model = QAModel(config, len(vocab))
    params = model.state_dict()
    opt = Adam(params, config.optim.lr, config.optim.beta1, config.optim.beta2, config.optim.epsilon)
    rng = np.random.default_rng(config.seed)
    sample_rng = np.random.default_rng(config.sample_seed)
    result = TrainResult(model, vocab)
    start_epoch = 0

    if files is not None:
        files.dir.mkdir(parents=True, exist_ok=True)
        if resume and files.state.exists():
            state = json.loads(files.state.read_text())
            load_module(model, files.last)
            opt.load_state_tensors(load_tensors(files.optim), state["step"])
            _set_rng_state(rng, state["rng"])
            _set_rng_state(sample_rng, state["sample_rng"])
            start_epoch = state["epoch"]
            result.best_dev_f1 = state["best_dev_f1"]
            logger.info("resumed from %s at epoch %d", files.dir, start_epoch)
        else:
            files.config.write_text(config.to_text())
            vocab.save(files.vocab)
            for path in (files.metrics, files.epochs):
                path.write_text("")

    obj = config.objective
    for epoch in range(start_epoch, config.train.epochs):
        for batch in iterate_batches(train_examples, vocab, config.train.batch_size, rng):
            opt.zero_grad()
            rl_now = obj.rl_enabled and opt.step_count >= obj.rl_warmup_steps
            with T.Tape() as tape:
                report = compute_losses(
                    model,
                    batch,
                    ce_enabled=obj.ce_enabled,
                    rl_enabled=rl_now,
                    dropout=config.train.word_dropout,
                    dropout_rng=rng,
                    sample_rng=sample_rng,
                )
            tape.backward(report.combined)
            opt.step()
            rec = {"step": opt.step_count, "epoch": epoch, **report.record()}
            result.steps.append(rec)
            if files is not None:
                with open(files.metrics, "a") as fh:
                    fh.write(json.dumps(rec) + "\n")

        erec = {"epoch": epoch + 1, "step": opt.step_count}
        if dev_examples:
            rep = evaluate_model(model, vocab, dev_examples, config.train.eval_batch_size)
            erec.update(dev_em=rep.em, dev_f1=rep.f1)
            if rep.f1 > result.best_dev_f1:
                result.best_dev_f1 = rep.f1
                if files is not None:
                    save_module(model, files.best)
        result.epochs.append(erec)
        logger.info("epoch %d: %s", epoch + 1, erec)
        if files is not None:
            with open(files.epochs, "a") as fh:
                fh.write(json.dumps(erec) + "\n")
            save_module(model, files.last)
            save_tensors(files.optim, opt.state_tensors())
            files.state.write_text(
                json.dumps(
                    {
                        "epoch": epoch + 1,
                        "step": opt.step_count,
                        "best_dev_f1": result.best_dev_f1,
                        "rng": _rng_state(rng),
                        "sample_rng": _rng_state(sample_rng),
                    }
                )
            )
    if files is not None and not dev_examples:
        save_module(model, files.best)
    return result


def load_trained(run_dir, checkpoint: Optional[str] = None):
    """Rebuild model and vocabulary from a run directory."""
    files = _RunFiles(run_dir)
    config = RunConfig.load(files.config)
    vocab = Vocabulary.load(files.vocab)
    model = QAModel(config, len(vocab))
    load_module(model, checkpoint or files.best)
    return config, model, vocab
