"""Finite-difference verification of every primitive and of the full model's losses."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import AnswerSpan, QAExample, Vocabulary, make_batch, tokenize
from .model import QAModel
from .objective import compute_losses

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class Check:
    name: str
    kind: str  # "op" or "param"
    max_rel_error: float
    n_checked: int
    worst_loss: str = ""


@dataclass
class GradcheckReport:
    seed: int
    checks: List[Check] = field(default_factory=list)
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def failures(self) -> List[Check]:
        return [c for c in self.checks if c.max_rel_error >= self.tolerance]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"seed {self.seed}: {status} max rel error {self.max_rel_error:.2e} ({self.seconds:.1f}s)"]
        for c in self.failures:
            where = f" [{c.worst_loss}]" if c.worst_loss else ""
            lines.append(f"  failing {c.kind} '{c.name}'{where}: rel error {c.max_rel_error:.2e}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# primitive probes
# ---------------------------------------------------------------------------


def _op_probes() -> Dict[str, Callable]:
    """Each probe maps a generator to (function of input tensors, list of input arrays)."""

    def lstm_inputs(rng, d=3, h=2, B=2, L=4):
        return [rng.normal(size=(B, L, d)), rng.normal(size=(4 * h, d)), rng.normal(size=(4 * h, h)), rng.normal(size=4 * h)]

    def cell(x, w_ih, w_hh, b):
        hs, cs = T.Tensor(np.zeros((2, 2))), T.Tensor(np.zeros((2, 2)))
        outs = []
        for t in range(x.shape[1]):
            hs, cs = T.lstm_cell(x[:, t], hs, cs, w_ih, w_hh, b)
            outs.append(hs)
        return T.concat(outs, axis=-1)

    take_idx = np.array([[2, 0, 2], [1, 1, 0]])
    emb_idx = np.array([[0, 3, 3], [1, 2, 0]])
    return {
        "add": lambda r: (lambda a, b: T.add(a, b), [r.normal(size=(3, 4)), r.normal(size=(4,))]),
        "sub": lambda r: (lambda a, b: T.sub(a, b), [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
        "mul": lambda r: (lambda a, b: T.mul(a, b), [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
        "matmul": lambda r: (lambda a, b: T.matmul(a, b), [r.normal(size=(2, 4, 3)), r.normal(size=(3, 5))]),
        "tanh": lambda r: (T.tanh, [r.normal(size=(3, 4))]),
        "sigmoid": lambda r: (T.sigmoid, [r.normal(size=(3, 4))]),
        "exp": lambda r: (T.exp, [r.normal(size=(3, 4))]),
        "sum": lambda r: (lambda a: T.sum(a, axis=1), [r.normal(size=(3, 4))]),
        "reshape": lambda r: (lambda a: T.reshape(a, (4, 3)), [r.normal(size=(3, 4))]),
        "swapaxes": lambda r: (lambda a: T.swapaxes(a, 0, 1), [r.normal(size=(3, 4))]),
        "broadcast_to": lambda r: (lambda a: T.broadcast_to(a, (2, 3, 4)), [r.normal(size=(1, 3, 4))]),
        "getitem": lambda r: (lambda a: a[1:, ::2], [r.normal(size=(3, 4))]),
        "concat": lambda r: (lambda a, b: T.concat([a, b], axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
        "take_rows": lambda r: (lambda a: T.take_rows(a, take_idx), [r.normal(size=(2, 3, 4))]),
        "embedding": lambda r: (lambda a: T.embedding(a, emb_idx), [r.normal(size=(4, 3))]),
        "max": lambda r: (lambda a: T.max(a, axis=-1), [r.normal(size=(3, 5))]),
        "softmax": lambda r: (lambda a: T.softmax(a, axis=0, mask=np.array([[1], [1], [0], [1]])), [r.normal(size=(4, 3))]),
        "softmax_columns": lambda r: (T.softmax_columns, [r.normal(size=(4, 3))]),
        # masked outputs sit near -1e30, so only the unmasked ones are scored
        "log_softmax": lambda r: (
            lambda a: T.log_softmax(a, axis=-1, mask=np.array([1, 1, 0, 1]))[:, [0, 1, 3]],
            [r.normal(size=(3, 4))],
        ),
        "lstm_cell": lambda r: (cell, lstm_inputs(r, h=2)),
        "lstm_sequence": lambda r: (lambda *a: T.lstm_sequence(*a), lstm_inputs(r, h=2)),
        "reverse_within_length": lambda r: (
            lambda a: T.reverse_within_length(a, np.array([3, 2])),
            [r.normal(size=(2, 4, 2))],
        ),
    }


OP_NAMES = tuple(_op_probes())


def check_op(name: str, rng: np.random.Generator, step: float = STEP) -> Check:
    fn, arrays = _op_probes()[name](rng)
    inputs = [T.parameter(a.copy()) for a in arrays]
    with T.no_grad():
        weights = rng.normal(size=fn(*inputs).shape)

    def objective():
        return T.sum(fn(*inputs) * weights)

    with T.Tape() as tape:
        loss = objective()
    tape.backward(loss)
    worst = 0.0
    n = 0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = T.numerical_grad(lambda: objective().item(), t, step=step)
        worst = np.maximum(worst, T.relative_error(analytic, numeric).max())
        n += t.data.size
    return Check(name, "op", float(worst), n)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


def gradcheck_config(seed: int = 0, t_max: int = 2, pool: int = 4, experts: int = 4) -> RunConfig:
    cfg = RunConfig(seed=seed)
    cfg.model.emb_dim = 8
    cfg.model.hidden = 8
    cfg.decoder.t_max = t_max
    cfg.decoder.maxout_pool = pool
    cfg.decoder.moe_experts = experts
    cfg.train.word_dropout = 0.0
    return cfg


def toy_examples(rng: np.random.Generator, m: int = 10, n: int = 5, words: int = 12) -> List[QAExample]:
    """Two random examples; the second is shorter so padding and masks are exercised."""
    lexicon = [f"t{i}" for i in range(words)]
    out = []
    for k, (mm, nn) in enumerate([(m, n), (max(1, m - 3), max(1, n - 1))]):
        doc = tokenize(" ".join(rng.choice(lexicon, size=mm)))
        q = tokenize(" ".join(rng.choice(lexicon, size=nn)))
        s = int(rng.integers(mm))
        e = int(rng.integers(s, mm))
        out.append(QAExample(f"toy-{k}", doc, q, [AnswerSpan(s, e)], [doc.span_text(s, e)]))
    return out


LOSSES = ("l_ce", "l_rl", "mixed")


def _losses(model, batch, seed):
    rep = compute_losses(
        model, batch, ce_enabled=True, rl_enabled=True, sample_rng=np.random.default_rng(seed), surrogate_uncertainty=True
    )
    return {"l_ce": rep.l_ce, "l_rl": rep.l_rl_surrogate, "mixed": rep.combined}


def gradcheck_model(
    config: Optional[RunConfig] = None,
    seed: int = 0,
    m: int = 10,
    n: int = 5,
    max_entries: Optional[int] = 24,
    step: float = STEP,
    include_ops: bool = True,
) -> GradcheckReport:
    """Compare backprop against central differences for the three losses.

    The sampled trajectory, greedy path and every maxout/top-k choice are
    recorded on the first pass and replayed for each probe, which fixes the
    trajectory and the advantage.  ``max_entries`` caps the entries probed per
    parameter tensor (chosen at random, always including the largest-gradient
    entry); ``None`` probes every entry.
    """
    start = time.time()
    config = config or gradcheck_config(seed)
    rng = np.random.default_rng(seed)
    report = GradcheckReport(seed)
    if include_ops:
        for name in OP_NAMES:
            report.checks.append(check_op(name, rng, step))

    examples = toy_examples(rng, m, n)
    vocab = Vocabulary.build(examples)
    model = QAModel(config, len(vocab), seed=seed)
    batch = make_batch(examples, vocab)
    params = model.state_dict()

    recorder = T.BranchRecorder()
    with T.branches(recorder):
        _losses(model, batch, seed)
    recorder.replay()

    analytic = {}
    for loss_name in LOSSES:
        T.zero_grad(params.values())
        with T.branches(recorder.replay()), T.Tape() as tape:
            loss = _losses(model, batch, seed)[loss_name]
        tape.backward(loss)
        analytic[loss_name] = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    T.zero_grad(params.values())

    def probe():
        with T.branches(recorder.replay()):
            vals = _losses(model, batch, seed)
        return {k: v.item() for k, v in vals.items()}

    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if max_entries is None or size <= max_entries:
            idx = np.arange(size)
        else:
            biggest = int(np.argmax(np.abs(analytic["mixed"][name]).reshape(-1)))
            idx = np.unique(np.concatenate([[biggest], rng.choice(size, size=max_entries - 1, replace=False)]))
        worst, worst_loss = 0.0, ""
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            plus = probe()
            flat[i] = orig - step
            minus = probe()
            flat[i] = orig
            for loss_name in LOSSES:
                numeric = (plus[loss_name] - minus[loss_name]) / (2 * step)
                err = float(T.relative_error(analytic[loss_name][name].reshape(-1)[i], numeric))
                if err > worst:
                    worst, worst_loss = err, loss_name
        report.checks.append(Check(name, "param", worst, len(idx), worst_loss))
    report.seconds = time.time() - start
    return report
