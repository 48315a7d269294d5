import math
import time

import numpy as np
import pytest

from cfrl import offpolicy as op
from cfrl.envs import follow_hint_policy, two_door, uniform_policy
from cfrl.envs import gridpush as gp
from cfrl.errors import InputError, SupportCollapseError
from cfrl.policy import TabularPolicy
from cfrl.pomdp import TrajectoryBatch, rollouts


@pytest.fixture(scope="module")
def door():
    return two_door(0.8)


@pytest.fixture(scope="module")
def desk():
    return gp.as_pomdp(gp.desk_preset())


def hand_buffer(door):
    # two episodes with hint L: one opens L (G=1), one opens R (G=0)
    b = TrajectoryBatch(np.zeros((2, 2), dtype=np.int64), np.zeros((2, 2), dtype=np.int64),
                        np.array([[0], [1]]), np.array([[1.0], [0.0]]), np.full((2, 1), math.log(0.5)))
    return op.ReplayBuffer(b, "uniform", op.describe_env(door), op.env_hash(door), 0)


# --- replay buffer


def test_buffer_roundtrip_and_header(door):
    buf = op.collect(door, uniform_policy(door), 50, seed=3)
    text = buf.dumps()
    back = op.ReplayBuffer.loads(text)
    assert back.dumps() == text
    assert np.array_equal(back.episodes.actions, buf.episodes.actions)
    assert back.env_hash == op.env_hash(door)


def test_empty_buffer_has_valid_header(door):
    buf = op.collect(door, uniform_policy(door), 0, seed=1)
    text = buf.dumps()
    assert len(text.splitlines()) == 1
    assert len(op.ReplayBuffer.loads(text)) == 0


def test_buffer_same_seed_same_bytes(desk):
    pol = TabularPolicy.uniform(desk.default_featurizer(), 5, gp.ACTIONS)
    a = op.collect(desk, pol, 300, seed=7, chunk=64).dumps()
    b = op.collect(desk, pol, 300, seed=7, chunk=64, workers=3).dumps()
    assert a == b


def test_collect_desk_budget(desk):
    pol = TabularPolicy.uniform(desk.default_featurizer(), 5, gp.ACTIONS)
    t0 = time.perf_counter()
    op.collect(desk, pol, 100, seed=0)
    assert time.perf_counter() - t0 < 5.0


def test_buffer_rejects_bad_input(door):
    with pytest.raises(InputError):
        op.ReplayBuffer.loads("")
    with pytest.raises(InputError):
        op.ReplayBuffer.loads('{"schema": "other/9"}\n')
    text = op.collect(door, uniform_policy(door), 3, seed=0).dumps()
    with pytest.raises(InputError):
        op.ReplayBuffer.loads("\n".join(text.splitlines()[:-1]))


# --- importance sampling


def test_is_hand_example(door):
    buf = hand_buffer(door)
    pi = follow_hint_policy(door)
    rep = op.is_evaluate(buf, pi, mode="ordinary")
    assert rep.estimate == pytest.approx(1.0, abs=1e-12)
    assert rep.estimator == "is"


def test_is_with_same_policy_is_mean_return(door):
    mu = uniform_policy(door)
    buf = op.collect(door, mu, 2000, seed=2)
    rep = op.is_evaluate(buf, mu, mu)
    assert rep.estimate == pytest.approx(buf.returns().mean(), abs=1e-12)
    assert rep.n_effective == pytest.approx(len(buf), rel=1e-12)


def test_is_support_collapse(door):
    buf = hand_buffer(door)
    hint = follow_hint_policy(door)
    flipped = TabularPolicy(hint.featurizer, 2, hint.keys, hint.logits[:, ::-1].copy(), hint.action_names)
    only_bad = op.ReplayBuffer(buf.episodes.take(np.array([0])), "uniform")
    with pytest.raises(SupportCollapseError):
        op.is_evaluate(only_bad, flipped)


def test_snis_scale_invariance(door):
    mu = uniform_policy(door)
    buf = op.collect(door, mu, 500, seed=4)
    pi = follow_hint_policy(door, strength=1.5)
    base = op.is_evaluate(buf, pi)
    b = buf.episodes
    shifted = TrajectoryBatch(b.states, b.observations, b.actions, b.rewards, b.logp - math.log(3.0))
    scaled = op.is_evaluate(op.ReplayBuffer(shifted, "uniform"), pi)
    assert scaled.estimate == pytest.approx(base.estimate, rel=1e-12)
    assert scaled.n_effective == pytest.approx(base.n_effective, rel=1e-12)


def test_eval_report_invariants():
    with pytest.raises(Exception):
        op.EvalReport("x", 0.0, -1.0, 3)
    with pytest.raises(Exception):
        op.EvalReport("x", 0.0, 1.0, 3, n_effective=4.0)
    text = op.reports_csv([op.EvalReport("cf", 0.5, 0.1, 10, t=2)])
    assert text.splitlines()[0] == "estimator,t,estimate,stderr,n_effective,n_used,skipped"
    assert text.splitlines()[1] == "cf,2,0.5,0.1,,10,0"


# --- model-based evaluation


def test_mb_two_door(door):
    rep = op.mb_evaluate(door, follow_hint_policy(door), 100_000, 0)
    assert abs(rep.estimate - 0.8) <= 3 * rep.stderr


def test_mb_single_rollout_stderr_undefined(door):
    rep = op.mb_evaluate(door, follow_hint_policy(door), 1, 0)
    assert math.isnan(rep.stderr) and rep.estimate in (0.0, 1.0)
    with pytest.raises(InputError):
        op.mb_evaluate(door, follow_hint_policy(door), 0, 0)


def test_zero_epsilon_is_identity(desk):
    m = op.corrupt_prior(desk, 0.0)
    assert m.prior()[0] is desk.prior()[0] and m.prior()[1] is desk.prior()[1]
    pol = gp.expert_policy(desk)
    a = op.mb_evaluate(desk, pol, 500, 9)
    b = op.mb_evaluate(m, pol, 500, 9)
    assert a.estimate == b.estimate and a.stderr == b.stderr


def test_full_corruption_starts_degenerate(desk):
    m = op.corrupt_prior(desk, 1.0)
    pol = TabularPolicy.uniform(desk.default_featurizer(), 5, gp.ACTIONS)
    b = rollouts(m, pol, np.random.default_rng(0), 500)
    assert m.is_degenerate(b.states[:, 0]).all()
    codes, probs = m.prior()
    assert abs(probs.sum() - 1.0) <= 1e-12


def test_corrupted_prior_is_normalized_mixture(desk):
    m = op.corrupt_prior(desk, 0.5)
    codes, probs = m.prior()
    assert abs(math.fsum(probs.tolist()) - 1.0) <= 1e-12
    assert probs[m.is_degenerate(codes)].sum() == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(InputError):
        op.corrupt_prior(desk, 1.5)


# --- counterfactual evaluation


def test_cf_two_door_full_history(door):
    buf = op.collect(door, uniform_policy(door), 50_000, seed=5)
    rep = op.cf_evaluate(door, follow_hint_policy(door), buf, 2, rng=6)
    assert abs(rep.estimate - 0.8) <= 3 * rep.stderr
    assert rep.skipped == 0 and rep.t == 2


def test_cf_at_zero_matches_mb(door):
    buf = op.collect(door, uniform_policy(door), 50_000, seed=5)
    pi = follow_hint_policy(door, strength=0.5)
    cf = op.cf_evaluate(door, pi, buf, 0, rng=1)
    mb = op.mb_evaluate(door, pi, 50_000, 2)
    assert abs(cf.estimate - mb.estimate) <= 3 * math.hypot(cf.stderr, mb.stderr)


def test_cf_reproduces_logged_return_when_policies_match(door):
    pi = follow_hint_policy(door)
    buf = op.collect(door, pi, 500, seed=8)
    g, ok = op.counterfactual_returns(door, pi, buf.episodes, 2, 3, np.random.default_rng(0))
    assert ok.all()
    assert np.array_equal(g, np.repeat(buf.returns()[:, None], 3, axis=1))


def test_cf_rejects_bad_horizon(door):
    buf = op.collect(door, uniform_policy(door), 10, seed=0)
    with pytest.raises(InputError):
        op.cf_evaluate(door, uniform_policy(door), buf, 3)


def test_cf_worker_invariance(desk):
    pol = TabularPolicy.uniform(desk.default_featurizer(), 5, gp.ACTIONS)
    buf = op.collect(desk, pol, 600, seed=1)
    model = op.corrupt_prior(desk, 0.5)
    a = op.cf_evaluate(model, gp.expert_policy(desk), buf, 4, rng=3, chunk=128)
    b = op.cf_evaluate(model, gp.expert_policy(desk), buf, 4, rng=3, chunk=128, workers=4)
    assert a == b


def test_sweep_preserves_order(door):
    buf = op.collect(door, uniform_policy(door), 200, seed=0)
    out = op.sweep_conditioning(door, follow_hint_policy(door), buf, [2, 0, 1], rng=0)
    assert [t for t, _ in out] == [2, 0, 1]
    assert [r.t for _, r in out] == [2, 0, 1]
    only = op.sweep_conditioning(door, follow_hint_policy(door), buf, [0], rng=0)
    assert len(only) == 1 and only[0][1].t == 0


def test_cf_beats_mb_under_corruption(desk):
    pol = TabularPolicy.uniform(desk.default_featurizer(), 5, gp.ACTIONS)
    expert = gp.expert_policy(desk)
    truth = gp.expert_value(desk)
    model = op.corrupt_prior(desk, 0.5)
    wins = 0
    for seed in range(20):
        buf = op.collect(desk, pol, 200, seed=100 + seed)
        cf = op.cf_evaluate(model, expert, buf, desk.horizon, rng=seed)
        mb = op.mb_evaluate(model, expert, 200, seed)
        wins += abs(cf.estimate - truth) < abs(mb.estimate - truth)
    assert wins >= 18


def test_contradictions_are_skipped_and_counted(desk):
    # a model whose prior holds only degenerate levels cannot explain real episodes
    pol = TabularPolicy.uniform(desk.default_featurizer(), 5, gp.ACTIONS)
    buf = op.collect(desk, pol, 200, seed=2)
    model = op.corrupt_prior(desk, 1.0)
    rep = op.cf_evaluate(model, pol, buf, desk.horizon, rng=0)
    assert rep.skipped > 0 and rep.skipped + rep.n_used == len(buf)
