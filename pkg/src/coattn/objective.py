"""Mixed training objective: position cross-entropy plus self-critical policy learning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import AnswerSpan, Batch, TokenizedText, word_dropout
from .decoder import DecodeTrace
from .metrics import f1_score
from .tensor import Tensor


class DataError(ValueError):
    pass


@dataclass
class Trajectory:
    sampled: List[tuple]
    log_probs: List[float]


@dataclass
class RewardResult:
    f1_sampled: np.ndarray
    f1_greedy: np.ndarray

    @property
    def advantage(self) -> np.ndarray:
        return self.f1_sampled - self.f1_greedy


@dataclass
class LossReport:
    l_ce: Optional[Tensor]
    l_rl_surrogate: Optional[Tensor]
    log_var_ce: float
    log_var_rl: float
    combined: Tensor
    l_rl: Optional[float] = None  # mean 1 - F1 of the sampled answers
    reward: Optional[RewardResult] = None
    greedy: Optional[DecodeTrace] = None
    sampled: Optional[DecodeTrace] = None

    def record(self) -> dict:
        """Flat diagnostics; sigma values are the learned standard deviations."""
        out = {
            "loss": self.objective_value(),
            "l_ce": None if self.l_ce is None else self.l_ce.item(),
            "l_rl": self.l_rl,
            "l_rl_surrogate": None if self.l_rl_surrogate is None else self.l_rl_surrogate.item(),
            "sigma_ce": float(np.exp(0.5 * self.log_var_ce)),
            "sigma_rl": float(np.exp(0.5 * self.log_var_rl)),
        }
        if self.reward is not None:
            out["f1_sampled"] = float(self.reward.f1_sampled.mean())
            out["f1_greedy"] = float(self.reward.f1_greedy.mean())
        return out

    def objective_value(self) -> float:
        """Value of the mixed objective with the RL term measured by ``l_rl``."""
        if self.l_ce is None:
            return self.combined.item()
        if self.l_rl is None:
            return self.l_ce.item()
        return (
            0.5 * np.exp(-self.log_var_ce) * self.l_ce.item()
            + 0.5 * np.exp(-self.log_var_rl) * self.l_rl
            + self.log_var_ce
            + self.log_var_rl
        )


def _pick(log_p: Tensor, idx: np.ndarray) -> Tensor:
    return log_p[np.arange(log_p.shape[0]), np.asarray(idx, dtype=np.int64)]


def cross_entropy_loss(trace: DecodeTrace, gold_start, gold_end, doc_mask: Optional[np.ndarray] = None) -> Tensor:
    """Per-example ``-sum_t [log p_t^start(s) + log p_t^end(e)]`` over executed steps, shape (B,)."""
    gs = np.asarray(gold_start, dtype=np.int64)
    ge = np.asarray(gold_end, dtype=np.int64)
    if doc_mask is not None:
        rows = np.arange(len(gs))
        if (doc_mask[rows, gs] == 0).any() or (doc_mask[rows, ge] == 0).any():
            raise DataError("gold span points at a padded position")
    total = None
    for step in trace.steps:
        term = (_pick(step.log_p_start, gs) + _pick(step.log_p_end, ge)) * step.active
        total = term if total is None else total + term
    return -total


def trajectory_log_prob(trace: DecodeTrace) -> Tensor:
    """Per-example sum over executed steps of the log-probability of the chosen positions."""
    total = None
    for step in trace.steps:
        term = (_pick(step.log_p_start, step.s) + _pick(step.log_p_end, step.e)) * step.active
        total = term if total is None else total + term
    return total


def trajectory(trace: DecodeTrace, b: int = 0) -> Trajectory:
    steps = trace.steps[: trace.lengths[b]]
    return Trajectory(
        sampled=[(int(st.s[b]), int(st.e[b])) for st in steps],
        log_probs=[float(st.log_p_start.data[b, st.s[b]] + st.log_p_end.data[b, st.e[b]]) for st in steps],
    )


def span_f1(pred: Optional[AnswerSpan], gold: AnswerSpan, doc: TokenizedText) -> float:
    """Token-overlap F1 of two document spans, via the evaluation metric on their surface text."""
    if pred is None:
        return 0.0
    return f1_score(doc.span_text(pred.start, pred.end), doc.span_text(gold.start, gold.end))


def final_span_f1(trace: DecodeTrace, batch: Batch) -> np.ndarray:
    s, e = trace.final_positions()
    out = np.zeros(len(s))
    for b, ex in enumerate(batch.examples):
        pred = AnswerSpan(int(s[b]), int(e[b])) if s[b] <= e[b] else None
        out[b] = span_f1(pred, batch.gold_spans[b], ex.document)
    return out


def self_critical_reward(sampled: DecodeTrace, greedy: DecodeTrace, batch: Batch) -> RewardResult:
    return RewardResult(final_span_f1(sampled, batch), final_span_f1(greedy, batch))


def rl_surrogate_loss(log_prob: Tensor, advantage) -> Tensor:
    """``-advantage * log p(trajectory)`` per example; the advantage enters as a constant."""
    return log_prob * (-np.asarray(advantage, dtype=T.DTYPE))


def mixed_loss(l_ce, l_rl, log_var_ce: Tensor, log_var_rl: Tensor, rl_value: Optional[float] = None) -> Tensor:
    """Uncertainty-weighted sum with learned log-variances ``log sigma^2`` of each task.

    With ``rl_value`` given, ``l_rl`` only supplies the parameter gradient (the
    policy-gradient surrogate) while the RL log-variance is fitted to
    ``rl_value``, the expected F1 shortfall ``1 - F1`` of the sampled answers.
    The surrogate's own value is centred on zero and has no lower bound, so
    fitting the variance to it would drive the RL weight to infinity.
    """
    w_ce = T.exp(-log_var_ce) * 0.5
    w_rl = T.exp(-log_var_rl) * 0.5
    if rl_value is None:
        return w_ce * l_ce + w_rl * l_rl + log_var_ce + log_var_rl
    return w_ce * l_ce + T.Tensor(w_rl.data) * l_rl + w_rl * rl_value + log_var_ce + log_var_rl


def sample_trajectory(model, batch: Batch, rng: np.random.Generator):
    """Sampled trajectory for the first example plus the separately computed greedy trace."""
    with T.no_grad():
        enc = model.encode(batch)
        sampled = model.decode(enc, batch, rng=rng)
        greedy = model.decode(enc, batch)
    return trajectory(sampled), greedy


def compute_losses(
    model,
    batch: Batch,
    *,
    ce_enabled: bool = True,
    rl_enabled: bool = True,
    dropout: float = 0.0,
    dropout_rng: Optional[np.random.Generator] = None,
    sample_rng: Optional[np.random.Generator] = None,
    surrogate_uncertainty: bool = False,
) -> LossReport:
    """Forward pass producing every loss term; record on an active tape for gradients.

    ``surrogate_uncertainty`` plugs the surrogate into the uncertainty weighting
    as-is, which makes ``combined`` an ordinary differentiable function (used
    by the gradient checker).
    """
    gold_s = np.array([g.start for g in batch.gold_spans])
    gold_e = np.array([g.end for g in batch.gold_spans])
    noisy = word_dropout(batch, dropout, dropout_rng) if dropout > 0 else batch
    enc = model.encode(noisy)
    greedy = model.decode(enc, noisy)
    l_ce = T.mean(cross_entropy_loss(greedy, gold_s, gold_e, batch.doc_mask)) if ce_enabled else None

    l_rl = reward = sampled = rl_value = None
    if rl_enabled:
        if sample_rng is None:
            raise ValueError("policy learning needs a sampling generator")
        sampled = model.decode(enc, noisy, rng=sample_rng)
        if noisy is batch:
            baseline = greedy
        else:
            with T.no_grad():
                baseline = model.decode(model.encode(batch), batch)
        reward = self_critical_reward(sampled, baseline, batch)
        l_rl = T.mean(rl_surrogate_loss(trajectory_log_prob(sampled), reward.advantage))
        rl_value = float(np.mean(1.0 - reward.f1_sampled))

    if l_ce is not None and l_rl is not None:
        combined = mixed_loss(
            l_ce, l_rl, model.log_var_ce, model.log_var_rl, None if surrogate_uncertainty else rl_value
        )
    else:
        combined = l_ce if l_ce is not None else l_rl
    return LossReport(
        l_ce=l_ce,
        l_rl_surrogate=l_rl,
        log_var_ce=float(model.log_var_ce.data),
        log_var_rl=float(model.log_var_rl.data),
        combined=combined,
        l_rl=rl_value,
        reward=reward,
        greedy=greedy,
        sampled=sampled,
    )
