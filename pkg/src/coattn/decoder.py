"""Dynamic span decoder with highway-maxout scoring and a top-k mixture-of-experts layer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import AnswerSpan, ConfigError
from .nn import Linear, LstmParams, Module, uniform
from .tensor import Tensor


@dataclass
class DecodeStep:
    """Batched state of one decoding step; ``active[b]`` says whether example b ran it."""

    t: int
    log_p_start: Tensor  # (B, m)
    log_p_end: Tensor  # (B, m)
    s: np.ndarray  # (B,) chosen start (greedy or sampled)
    e: np.ndarray  # (B,)
    active: np.ndarray  # (B,) float 0/1

    @property
    def p_start(self) -> np.ndarray:
        return np.exp(self.log_p_start.data)

    @property
    def p_end(self) -> np.ndarray:
        return np.exp(self.log_p_end.data)


@dataclass
class DecodeTrace:
    steps: List[DecodeStep]
    converged: np.ndarray  # (B,) bool
    lengths: np.ndarray  # (B,) number of steps each example executed
    sampled: bool = False

    def final_positions(self):
        B = len(self.lengths)
        s = np.zeros(B, dtype=np.int64)
        e = np.zeros(B, dtype=np.int64)
        for b in range(B):
            last = self.steps[self.lengths[b] - 1]
            s[b], e[b] = last.s[b], last.e[b]
        return s, e

    def example_steps(self, b: int) -> List[tuple]:
        return [(st.s[b], st.e[b]) for st in self.steps[: self.lengths[b]]]


def greedy_argmax(p: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(p, axis=-1)


def sample_categorical(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``p`` by inverse-CDF sampling."""
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=-1)
    # never land on a zero-probability (masked) position through round-off
    idx = np.minimum(idx, p.shape[-1] - 1)
    bad = p[np.arange(len(idx)), idx] == 0
    if bad.any():
        idx[bad] = np.argmax(p[bad], axis=-1)
    return idx


class MoeLayer(Module):
    """K affine experts mixed by the renormalised softmax of the top-k gate logits."""

    def __init__(self, rng, d_in: int, d_out: int, n_experts: int, top_k: int = 2):
        if n_experts < 2:
            raise ConfigError(f"mixture of experts needs at least 2 experts, got {n_experts}")
        if not 1 <= top_k <= n_experts:
            raise ConfigError(f"top_k={top_k} must lie in [1, {n_experts}]")
        self.n_experts, self.top_k, self.d_out = n_experts, top_k, d_out
        self.expert_weights = T.parameter(uniform(rng, (n_experts * d_out, d_in), d_in))
        self.expert_biases = T.parameter(uniform(rng, (n_experts, d_out), d_in))
        self.gate = Linear(rng, d_in, n_experts)

    def gate_weights(self, x: Tensor) -> Tensor:
        logits = self.gate(x)
        k = self.top_k
        top = T.choose(lambda: np.argsort(-logits.data, axis=-1, kind="stable")[..., :k])
        keep = np.zeros(logits.shape)
        np.put_along_axis(keep, top, 1.0, axis=-1)
        return T.softmax(logits, axis=-1, mask=keep)

    def __call__(self, x: Tensor) -> Tensor:
        w = self.gate_weights(x)  # (..., K), zero off the top-k
        lead = x.shape[:-1]
        y = T.reshape(x @ self.expert_weights.T, lead + (self.n_experts, self.d_out)) + self.expert_biases
        return T.sum(y * T.reshape(w, lead + (self.n_experts, 1)), axis=-2)


class Maxout(Module):
    def __init__(self, rng, d_in: int, d_out: int, pool: int):
        self.pool, self.d_out = pool, d_out
        self.linear = Linear(rng, d_in, d_out * pool)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        return T.max(T.reshape(self.linear(x), lead + (self.d_out, self.pool)), axis=-1)


def moe_forward(x: Tensor, layer: MoeLayer) -> Tensor:
    return layer(x)


class HighwayMaxout(Module):
    """Scores every document position given the decoder state and current span estimate."""

    def __init__(self, rng, hidden: int, pool: int, moe: bool, n_experts: int, top_k: int):
        h = hidden
        self.summary = Linear(rng, 5 * h, h, bias=False)
        self.first = MoeLayer(rng, 3 * h, h, n_experts, top_k) if moe else Maxout(rng, 3 * h, h, pool)
        self.second = Maxout(rng, h, h, pool)
        self.third = Maxout(rng, 2 * h, 1, pool)

    def __call__(self, U: Tensor, state: Tensor, u_s: Tensor, u_e: Tensor) -> Tensor:
        B, m, _ = U.shape
        r = T.tanh(self.summary(T.concat([state, u_s, u_e], axis=-1)))
        r = T.broadcast_to(T.reshape(r, (B, 1, r.shape[-1])), (B, m, r.shape[-1]))
        m1 = self.first(T.concat([U, r], axis=-1))
        m2 = self.second(m1)
        return T.reshape(self.third(T.concat([m1, m2], axis=-1)), (B, m))


class DynamicDecoder(Module):
    def __init__(self, rng, hidden: int, pool: int = 16, moe: bool = True, n_experts: int = 16, top_k: int = 2):
        h = hidden
        self.hidden = h
        self.lstm = LstmParams(rng, 4 * h, h)
        self.start_scorer = HighwayMaxout(rng, h, pool, moe, n_experts, top_k)
        self.end_scorer = HighwayMaxout(rng, h, pool, moe, n_experts, top_k)

    def __call__(
        self,
        U: Tensor,
        doc_mask: np.ndarray,
        t_max: int = 4,
        rng: Optional[np.random.Generator] = None,
        early_stop: bool = True,
    ) -> DecodeTrace:
        """Run up to ``t_max`` steps; draws positions from ``rng`` when given, else greedy."""
        if t_max < 1:
            raise ConfigError(f"t_max must be >= 1, got {t_max}")
        B, m, _ = U.shape
        lengths = doc_mask.sum(axis=1).astype(np.int64)
        s = np.zeros(B, dtype=np.int64)
        e = lengths - 1
        h = T.Tensor(np.zeros((B, self.hidden)))
        c = T.Tensor(np.zeros((B, self.hidden)))
        active = np.ones(B)
        converged = np.zeros(B, dtype=bool)
        ran = np.zeros(B, dtype=np.int64)
        steps = []
        for t in range(1, t_max + 1):
            u_s = T.take_rows(U, s[:, None])[:, 0]
            u_e = T.take_rows(U, e[:, None])[:, 0]
            h, c = self.lstm.cell(T.concat([u_s, u_e], axis=-1), h, c)
            log_ps = T.log_softmax(self.start_scorer(U, h, u_s, u_e), axis=-1, mask=doc_mask)
            log_pe = T.log_softmax(self.end_scorer(U, h, u_s, u_e), axis=-1, mask=doc_mask)
            if rng is None:
                s_new = T.choose(lambda: greedy_argmax(log_ps.data))
                e_new = T.choose(lambda: greedy_argmax(log_pe.data))
            else:
                s_new = T.choose(lambda: sample_categorical(np.exp(log_ps.data), rng))
                e_new = T.choose(lambda: sample_categorical(np.exp(log_pe.data), rng))
            # finished examples keep their last estimate
            s_new = np.where(active > 0, s_new, s)
            e_new = np.where(active > 0, e_new, e)
            steps.append(DecodeStep(t, log_ps, log_pe, s_new, e_new, active.copy()))
            ran += active.astype(np.int64)
            same = (s_new == s) & (e_new == e) & (active > 0)
            if early_stop:
                converged |= same
            else:
                converged = same
            s, e = s_new, e_new
            if early_stop:
                active = active * (~same)
                if not active.any():
                    break
        return DecodeTrace(steps, converged, ran, sampled=rng is not None)


def extract_answer(trace: DecodeTrace, b: int = 0) -> Optional[AnswerSpan]:
    """Final-step estimate for example ``b``; ``None`` (empty prediction) when end precedes start."""
    last = trace.steps[trace.lengths[b] - 1]
    s, e = int(last.s[b]), int(last.e[b])
    return AnswerSpan(s, e) if s <= e else None
