import dataclasses
import math

import numpy as np
import pytest

from coattn import tensor as T
from coattn.config import RunConfig
from coattn.data import AnswerSpan, QAExample, Vocabulary, make_batch, tokenize
from coattn.decoder import DecodeStep, DecodeTrace
from coattn.model import QAModel
from coattn.objective import (
    DataError,
    RewardResult,
    compute_losses,
    cross_entropy_loss,
    mixed_loss,
    rl_surrogate_loss,
    sample_trajectory,
    self_critical_reward,
    span_f1,
    trajectory,
    trajectory_log_prob,
)

from oracles import enumerated_policy_gradient


def fixed_trace(probs_s, probs_e, s=None, e=None):
    """Trace of one example whose per-step distributions are given explicitly."""
    steps = []
    for t, (ps, pe) in enumerate(zip(probs_s, probs_e)):
        with np.errstate(divide="ignore"):
            ls = T.parameter(np.log(np.asarray(ps, dtype=float))[None])
            le = T.parameter(np.log(np.asarray(pe, dtype=float))[None])
        si = np.array([s[t] if s else int(np.argmax(ps))])
        ei = np.array([e[t] if e else int(np.argmax(pe))])
        steps.append(DecodeStep(t + 1, ls, le, si, ei, np.ones(1)))
    return DecodeTrace(steps, np.array([False]), np.array([len(steps)]))


def toy_model(m=4, seed=0, words=None):
    cfg = RunConfig(seed=seed)
    cfg.model.emb_dim = cfg.model.hidden = 6
    cfg.decoder.maxout_pool = 3
    cfg.decoder.moe_experts = 4
    words = words or [f"t{i}" for i in range(m)]
    ex = QAExample("toy", tokenize(" ".join(words)), tokenize("which t ?"), [AnswerSpan(1, min(2, m - 1))], [""])
    ex.answer_texts[0] = ex.document.span_text(ex.answers[0].start, ex.answers[0].end)
    vocab = Vocabulary.build([ex])
    return QAModel(cfg, len(vocab)), make_batch([ex], vocab)


class TestCrossEntropy:
    def test_uniform_single_step(self):
        tr = fixed_trace([[0.25] * 4], [[0.25] * 4])
        assert cross_entropy_loss(tr, [1], [2]).item() == pytest.approx(2 * math.log(4))

    def test_perfect_prediction(self):
        tr = fixed_trace([[1.0, 0.0]] * 2, [[0.0, 1.0]] * 2)
        assert cross_entropy_loss(tr, [0], [1]).item() == 0.0

    def test_three_steps_half_mass(self):
        tr = fixed_trace([[0.5, 0.5]] * 3, [[0.5, 0.5]] * 3)
        assert cross_entropy_loss(tr, [0], [1]).item() == pytest.approx(3 * 2 * math.log(2))

    def test_inactive_steps_do_not_count(self):
        tr = fixed_trace([[0.5, 0.5]] * 2, [[0.5, 0.5]] * 2)
        tr.steps[1].active[:] = 0
        assert cross_entropy_loss(tr, [0], [1]).item() == pytest.approx(2 * math.log(2))

    def test_masked_gold_rejected(self):
        tr = fixed_trace([[0.5, 0.5, 0.0]], [[0.5, 0.5, 0.0]])
        with pytest.raises(DataError):
            cross_entropy_loss(tr, [2], [1], doc_mask=np.array([[1, 1, 0]]))


class TestSpanF1:
    doc = tokenize("a b c d e")

    def test_identity(self):
        assert span_f1(AnswerSpan(1, 3), AnswerSpan(1, 3), self.doc) == 1.0

    def test_partial(self):
        doc = tokenize("p q r s")
        assert span_f1(AnswerSpan(1, 3), AnswerSpan(0, 2), doc) == pytest.approx(2 / 3)

    def test_disjoint_and_empty(self):
        assert span_f1(AnswerSpan(3, 4), AnswerSpan(1, 2), self.doc) == 0.0
        assert span_f1(None, AnswerSpan(1, 2), self.doc) == 0.0


class TestReward:
    def test_same_span_zero_advantage(self):
        model, batch = toy_model()
        with T.no_grad():
            g = model.decode(model.encode(batch), batch)
        rew = self_critical_reward(g, g, batch)
        assert rew.advantage[0] == 0.0

    def test_advantage_range(self):
        rew = RewardResult(np.array([1.0, 0.0, 0.3]), np.array([0.0, 1.0, 0.3]))
        np.testing.assert_array_equal(rew.advantage, [1.0, -1.0, 0.0])

    def test_one_hot_sample_equals_greedy(self):
        one_hot = [[0.0, 1.0, 0.0]] * 2
        greedy = fixed_trace(one_hot, one_hot)
        from coattn.decoder import sample_categorical

        rng = np.random.default_rng(0)
        draws = [int(sample_categorical(np.array(p)[None], rng)[0]) for p in one_hot]
        assert draws == [int(s.s[0]) for s in greedy.steps]


class TestTrajectory:
    def test_invariants(self):
        model, batch = toy_model(m=5)
        for seed in range(10):
            traj, greedy = sample_trajectory(model, batch, np.random.default_rng(seed))
            assert traj.sampled and all(0 <= s < 5 and 0 <= e < 5 for s, e in traj.sampled)
            assert all(np.isfinite(lp) and lp <= 0 for lp in traj.log_probs)
            assert not greedy.sampled

    def test_replay_identical(self):
        model, batch = toy_model(m=5)
        a, _ = sample_trajectory(model, batch, np.random.default_rng(3))
        b, _ = sample_trajectory(model, batch, np.random.default_rng(3))
        assert a == b

    def test_log_prob_matches_trace(self):
        tr = fixed_trace([[0.2, 0.8], [0.6, 0.4]], [[0.5, 0.5], [0.1, 0.9]], s=[1, 0], e=[0, 1])
        assert trajectory_log_prob(tr).item() == pytest.approx(math.log(0.8 * 0.5 * 0.6 * 0.9))
        assert trajectory(tr).sampled == [(1, 0), (0, 1)]


class TestSurrogate:
    def test_arithmetic(self):
        assert rl_surrogate_loss(T.Tensor([-2.0]), [-0.5]).data[0] == -1.0

    def test_zero_advantage_zero_gradient(self):
        tr = fixed_trace([[0.3, 0.7]], [[0.4, 0.6]])
        with T.Tape() as tape:
            loss = T.sum(rl_surrogate_loss(trajectory_log_prob(tr), [0.0]))
        tape.backward(loss)
        assert loss.item() == 0.0
        assert (tr.steps[0].log_p_start.grad == 0).all()

    def test_gradient_is_advantage_times_score(self):
        model, batch = toy_model(m=4)
        params = model.state_dict()
        with T.Tape() as tape:
            trace = model.decode(model.encode(batch), batch, rng=np.random.default_rng(1))
            logp = T.sum(trajectory_log_prob(trace))
        tape.backward(logp)
        score = {k: p.grad.copy() for k, p in params.items() if p.grad is not None}
        T.zero_grad(params.values())
        with T.Tape() as tape:
            trace = model.decode(model.encode(batch), batch, rng=np.random.default_rng(1))
            loss = T.sum(rl_surrogate_loss(trajectory_log_prob(trace), [0.4]))
        tape.backward(loss)
        for k, g in score.items():
            np.testing.assert_allclose(params[k].grad, -0.4 * g, rtol=1e-12, atol=1e-15)

    def test_positive_advantage_raises_sampled_log_probs(self):
        model, batch = toy_model(m=2, words=["x", "y"])
        params = model.state_dict()
        rec = T.BranchRecorder()

        def logps():
            with T.branches(rec.replay()):
                trace = model.decode(model.encode(batch), batch, rng=np.random.default_rng(0))
            return [(st.log_p_start.data[0, st.s[0]], st.log_p_end.data[0, st.e[0]]) for st in trace.steps]

        with T.branches(rec), T.Tape() as tape:
            trace = model.decode(model.encode(batch), batch, rng=np.random.default_rng(0))
            loss = T.sum(rl_surrogate_loss(trajectory_log_prob(trace), [0.7]))
        tape.backward(loss)
        before = logps()
        f_before = loss.item()
        for p in params.values():
            if p.grad is not None:
                p.data -= 1e-3 * p.grad
        after = logps()
        assert len(before) == len(after)
        assert sum(a + b for a, b in after) > sum(a + b for a, b in before)
        with T.branches(rec.replay()):
            trace = model.decode(model.encode(batch), batch, rng=np.random.default_rng(0))
        assert T.sum(rl_surrogate_loss(trajectory_log_prob(trace), [0.7])).item() < f_before


class TestMixedLoss:
    def scalars(self, *vals):
        return [T.parameter(np.array(v, dtype=float)) for v in vals]

    def test_unit_variances(self):
        l_ce, l_rl, a, b = self.scalars(3.0, 1.0, 0.0, 0.0)
        assert mixed_loss(l_ce, l_rl, a, b).item() == pytest.approx(2.0)

    def test_direct_evaluation(self):
        l_ce, l_rl, a, b = self.scalars(2.0, 0.0, math.log(4), 0.0)
        assert mixed_loss(l_ce, l_rl, a, b).item() == pytest.approx(0.25 + math.log(4))

    def test_log_variance_gradient(self):
        l_ce, l_rl, a, b = self.scalars(2.0, 0.7, 0.3, -0.2)
        with T.Tape() as tape:
            loss = mixed_loss(l_ce, l_rl, a, b)
        tape.backward(loss)
        f = lambda: mixed_loss(l_ce, l_rl, a, b).item()
        assert a.grad == pytest.approx(-2.0 / (2 * math.exp(0.3)) + 1, abs=1e-12)
        for t in (l_ce, l_rl, a, b):
            assert abs(t.grad - T.numerical_grad(f, t)) < 1e-6

    def test_rl_value_only_steers_the_variance(self):
        l_ce, l_rl, a, b = self.scalars(2.0, -0.4, 0.1, 0.5)
        with T.Tape() as tape:
            loss = mixed_loss(l_ce, l_rl, a, b, rl_value=0.25)
        tape.backward(loss)
        w_rl = math.exp(-0.5) / 2
        assert l_rl.grad == pytest.approx(w_rl)
        assert b.grad == pytest.approx(-w_rl * 0.25 + 1)
        assert l_ce.grad == pytest.approx(math.exp(-0.1) / 2)


class TestComputeLosses:
    def test_rl_disabled_is_pure_cross_entropy(self):
        model, batch = toy_model()
        with T.Tape() as tape:
            rep = compute_losses(model, batch, rl_enabled=False)
        tape.backward(rep.combined)
        assert rep.combined is rep.l_ce and rep.l_rl_surrogate is None
        assert model.log_var_ce.grad is None and model.log_var_rl.grad is None

    def test_record_fields(self):
        model, batch = toy_model()
        rep = compute_losses(model, batch, sample_rng=np.random.default_rng(0))
        rec = rep.record()
        for key in ("loss", "l_ce", "l_rl", "sigma_ce", "sigma_rl", "f1_sampled", "f1_greedy"):
            assert key in rec
        assert rec["sigma_ce"] == rec["sigma_rl"] == 1.0
        assert rec["l_rl"] == pytest.approx(1 - rec["f1_sampled"])
        assert rec["loss"] == pytest.approx(0.5 * rec["l_ce"] + 0.5 * rec["l_rl"])

    def test_needs_sampling_generator(self):
        model, batch = toy_model()
        with pytest.raises(ValueError):
            compute_losses(model, batch)

    def test_baseline_ignores_word_dropout(self):
        model, batch = toy_model(m=6)
        with T.no_grad():
            clean = model.decode(model.encode(batch), batch)
        rep = compute_losses(
            model, batch, dropout=0.5, dropout_rng=np.random.default_rng(0), sample_rng=np.random.default_rng(1)
        )
        s, e = clean.final_positions()
        expected = span_f1(AnswerSpan(int(s[0]), int(e[0])) if s[0] <= e[0] else None, batch.gold_spans[0], batch.examples[0].document)
        assert rep.reward.f1_greedy[0] == expected

    def test_reward_has_no_gradient_path(self):
        model, batch = toy_model()
        rep = compute_losses(model, batch, sample_rng=np.random.default_rng(2))
        assert isinstance(rep.reward.advantage, np.ndarray)


@pytest.mark.parametrize("seed", range(3))
def test_policy_gradient_unbiased_on_enumerable_toy(seed):
    model, batch = toy_model(m=4, seed=seed)
    average, exact = enumerated_policy_gradient(model, batch, baseline=0.25)
    scale = max(np.abs(g).max() for g in exact.values())
    assert scale > 0
    for k in exact:
        assert np.abs(average[k] - exact[k]).max() < 1e-6, k
