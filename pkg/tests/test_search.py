import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfrl import search as srch
from cfrl.envs import follow_hint_policy, two_door, uniform_policy
from cfrl.envs import gridpush as gp
from cfrl.errors import ImprovementError, InputError
from cfrl.offpolicy import corrupt_prior
from cfrl.policy import TabularPolicy, history_keys
from cfrl.pomdp import TrajectoryBatch, posterior_noise, rollouts


def door_batch(actions, obs=0):
    n = len(actions)
    return TrajectoryBatch(np.zeros((n, 2), dtype=np.int64), np.full((n, 2), obs),
                           np.array(actions)[:, None], np.zeros((n, 1)), np.zeros((n, 1)))


def first_key(pol, obs=0):
    b = door_batch([0], obs)
    return history_keys(pol.featurizer, b.observations, b.states, b.actions)[:, 0]


# --- improvement step


def test_improve_weighted_mle():
    env = two_door()
    pi = uniform_policy(env)
    b = door_batch([0, 1])
    batch = srch.ImprovementBatch(b, np.zeros(2), np.log([2.0, 1.0]))
    new = srch.improve(batch, pi, kappa=0.0)
    p = new.probs(first_key(pi))[0]
    assert p[0] == pytest.approx(2 / 3, abs=1e-12)


def test_improve_even_split_gives_uniform():
    env = two_door()
    pi = uniform_policy(env)
    batch = srch.ImprovementBatch(door_batch([0, 1, 0, 1]), np.zeros(4), np.zeros(4))
    new = srch.improve(batch, pi)
    assert np.allclose(new.probs(first_key(pi))[0], 0.5, atol=1e-15)


def test_improve_keeps_unvisited_keys():
    env = two_door()
    pi = follow_hint_policy(env, strength=2.0)
    batch = srch.ImprovementBatch(door_batch([1, 1], obs=0), np.zeros(2), np.zeros(2))
    new = srch.improve(batch, pi)
    k1 = first_key(pi, obs=1)
    assert np.array_equal(new.logits_for(k1), pi.logits_for(k1))


def test_improve_rejects_all_zero_weights():
    env = two_door()
    batch = srch.ImprovementBatch(door_batch([0]), np.zeros(1), np.array([-np.inf]))
    with pytest.raises(ImprovementError):
        srch.improve(batch, uniform_policy(env))
    with pytest.raises(InputError):
        srch.ImprovementBatch(door_batch([0]).take(slice(0, 0)),
                              np.zeros(0), np.zeros(0))


def test_improve_invariant_to_weight_scale():
    env = two_door()
    pi = uniform_policy(env)
    b = door_batch([0, 1, 1])
    lw = np.log([0.3, 1.0, 2.5])
    a = srch.improve(srch.ImprovementBatch(b, np.zeros(3), lw), pi)
    c = srch.improve(srch.ImprovementBatch(b, np.zeros(3), lw + math.log(7.0)), pi)
    assert np.allclose(a.logits, c.logits, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=1, max_size=12), st.integers(-1000, 1000))
def test_improve_bit_invariant_to_return_shift(returns, shift):
    env = two_door()
    pi = uniform_policy(env)
    n = len(returns)
    rng = np.random.default_rng(n)
    acts = rng.integers(0, 2, size=n)
    obs = rng.integers(0, 2, size=n)
    def batch(g):
        return TrajectoryBatch(np.zeros((n, 2), dtype=np.int64), np.stack([obs, obs], axis=1),
                               acts[:, None], np.array(g, dtype=float)[:, None], np.zeros((n, 1)))
    lp = np.full((n, 1), math.log(0.5))
    a = srch.improve(srch.make_batch(batch(returns), lp, lp), pi)
    b = srch.improve(srch.make_batch(batch([r + shift for r in returns]), lp, lp), pi)
    assert np.array_equal(a.logits, b.logits) and np.array_equal(a.keys, b.keys)


def test_make_batch_weights():
    b = door_batch([0, 1])
    b.rewards[:] = [[1.0], [3.0]]
    lp_pi = np.log([[0.2], [0.6]])
    lp_lam = np.log([[0.5], [0.5]])
    batch = srch.make_batch(b, lp_pi, lp_lam, eta=2.0)
    want = np.array([-1.0 + math.log(0.4), 0.0 + math.log(1.2)])
    assert np.allclose(batch.log_weights, want, atol=1e-12)
    with pytest.raises(InputError):
        srch.make_batch(b, lp_pi, lp_lam, eta=0.0)


# --- planner


def test_beta_schedule():
    sched = srch.BetaSchedule(500)
    assert sched(0) == 1.0
    vals = [sched(k) for k in range(0, 5000, 37)]
    assert all(b2 <= b1 for b1, b2 in zip(vals, vals[1:]))
    assert srch.BetaSchedule(math.inf)(10**9) == 1.0


def test_planner_mixture_expert_rate():
    env = two_door()
    expert = follow_hint_policy(env)
    never = TabularPolicy(expert.featurizer, 2, expert.keys, expert.logits[:, ::-1].copy(), expert.action_names)
    beta = 0.3
    mix = srch.PlannerMixture(expert, never, beta)
    n = 100_000
    rng = np.random.default_rng(0)
    keys = {expert.featurizer: np.repeat(first_key(expert), n)}
    a = mix.choose(keys, rng.random(n), rng.random(n))
    rate = np.mean(a == 0)
    assert abs(rate - beta) <= 3 * math.sqrt(beta * (1 - beta) / n)
    with pytest.raises(InputError):
        srch.PlannerMixture(None, never, 0.5)
    with pytest.raises(InputError):
        srch.PlannerMixture(expert, never, 1.5)


def test_search_config_validation():
    with pytest.raises(InputError):
        srch.SearchConfig(n_rollouts=0)
    with pytest.raises(InputError):
        srch.SearchConfig(eta=0.0)


# --- algorithms on two doors


def test_zero_iterations_returns_initial_policy():
    env = two_door()
    start = follow_hint_policy(env, strength=0.3)
    res = srch.mb_ps(env, srch.SearchConfig(iterations=0), policy=start)
    assert res.policy is start and res.metrics == []
    assert srch.metrics_csv(res.metrics) == "iter,algo,beta,mean_train_return,true_eval_return,stderr,skipped\n"
    assert res.checkpoints == {0: start}


def test_mb_ps_learns_two_door():
    env = two_door()
    cfg = srch.SearchConfig(iterations=50, n_rollouts=20, n_eval=0, seed=1)
    res = srch.mb_ps(env, cfg)
    value, _ = srch.evaluate_policy(env, res.policy, 20_000, 0)
    assert value >= 0.75


def test_expert_only_planner_imitates_expert():
    env = two_door()
    cfg = srch.SearchConfig(iterations=10, n_rollouts=40, tau_c=math.inf, n_eval=0)
    res = srch.mb_ps(env, cfg, expert=follow_hint_policy(env))
    for o in (0, 1):
        assert res.policy.probs(first_key(res.policy, o))[0][o] > 0.95


def test_cf_gps_and_mb_ps_agree_without_mismatch():
    env = two_door(0.7)
    cfg = dict(iterations=5, n_rollouts=10, n_cf=1, refresh_period=1, n_eval=0, kappa=0.1)
    finals = {"mb": [], "cf": []}
    for seed in range(10):
        c = srch.SearchConfig(seed=seed, **cfg)
        finals["mb"].append(srch.evaluate_policy(env, srch.mb_ps(env, c).policy, 4000, 99)[0])
        finals["cf"].append(srch.evaluate_policy(env, srch.cf_gps(env, c, env).policy, 4000, 99)[0])
    a, b = np.array(finals["mb"]), np.array(finals["cf"])
    z = (a.mean() - b.mean()) / math.sqrt(a.var(ddof=1) / 10 + b.var(ddof=1) / 10 + 1e-12)
    assert abs(z) <= 3


def test_gps_like_is_cf_gps_conditioned_on_first_step():
    env = two_door()
    cfg = srch.SearchConfig(iterations=4, n_rollouts=10, n_eval=20)
    a = srch.gps_like(env, cfg, env)
    b = srch.cf_gps(env, cfg, env, condition_t=1)
    assert a.policy == b.policy
    assert [r.true_eval_return for r in a.metrics] == [r.true_eval_return for r in b.metrics]
    assert {r.algo for r in a.metrics} == {"gpslike"}


# --- grid world


@pytest.fixture(scope="module")
def desk():
    return gp.as_pomdp(gp.desk_preset())


def test_corrupted_model_rollouts_start_degenerate(desk):
    model = corrupt_prior(desk, 1.0)
    pol = srch._initial_policy(desk, None)
    cfg = srch.SearchConfig(n_rollouts=200)
    batch, _ = srch._model_rollouts(model, srch.PlannerMixture(None, pol, 0.0), pol, 200, 0, 0, cfg, 1)
    assert model.is_degenerate(batch.states[:, 0]).all()


def test_full_observability_first_step_reveals_scenario():
    env = gp.as_pomdp(gp.desk_preset(p_mask=0.0))
    pol = srch._initial_policy(env, None)
    real = rollouts(env, pol, np.random.default_rng(0), 200)
    d1 = posterior_noise(env, real, 1, np.random.default_rng(1))
    dT = posterior_noise(env, real, env.horizon, np.random.default_rng(2))
    assert np.array_equal(d1.noise.s1, real.states[:, 0])
    assert np.array_equal(dT.noise.s1, real.states[:, 0])


def test_search_metrics_worker_invariant(desk):
    cfg = srch.SearchConfig(iterations=6, n_rollouts=30, n_cf=3, n_eval=50, chunk=8, seed=4)
    model = corrupt_prior(desk, 0.5)
    expert = gp.expert_policy(desk)
    a = srch.cf_gps(model, cfg, desk, expert, workers=1)
    b = srch.cf_gps(model, cfg, desk, expert, workers=4)
    assert srch.metrics_csv(a.metrics) == srch.metrics_csv(b.metrics)
    assert a.policy == b.policy


def test_metrics_rows(desk):
    cfg = srch.SearchConfig(iterations=3, n_rollouts=10, n_eval=20)
    res = srch.cf_gps(desk, cfg, desk, gp.expert_policy(desk))
    assert [r.iter for r in res.metrics] == [1, 2, 3]
    betas = [r.beta for r in res.metrics]
    assert betas[0] == 1.0 and all(b2 <= b1 for b1, b2 in zip(betas, betas[1:]))
    assert sorted(res.checkpoints) == [0, 1, 2, 3]
