"""Return-weighted policy search: model-based and counterfactually anchored.

Every algorithm iterates

1. draw training rollouts under a planner ``lambda = beta * expert + (1 - beta) * pi``,
2. weight each rollout by ``exp(G / eta) * p_pi(tau) / p_lambda(tau)``,
3. refit the tabular policy by weighted maximum likelihood (:func:`improve`).

They differ only in where the rollouts' scenarios come from: the model prior
(:func:`mb_ps`), scenarios inferred from full real episodes (:func:`cf_gps`),
or scenarios inferred from the first observation only (:func:`gps_like`).
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import ImprovementError, InputError
from .offpolicy import _mean_stderr
from .parallel import chunks, pmap, seed_of
from .policy import TabularPolicy, history_keys, sample_from_probs
from .pomdp import (TrajectoryBatch, draw_action_noise, draw_env_noise, posterior_noise,
                    rollouts, simulate)

METRIC_FIELDS = ("iter", "algo", "beta", "mean_train_return", "true_eval_return", "stderr", "skipped")


# --------------------------------------------------------------------------
# planner


@dataclass(frozen=True)
class BetaSchedule:
    """``beta(k) = exp(-k / tau_c)`` with ``k`` counted in episodes."""

    tau_c: float = 500.0

    def __call__(self, k):
        if self.tau_c == math.inf:
            return 1.0
        if self.tau_c <= 0:
            return 0.0
        return math.exp(-k / self.tau_c)


@dataclass(frozen=True, eq=False)
class PlannerMixture:
    """Per action: follow the expert with probability ``beta``, else ``policy``."""

    expert: object
    policy: TabularPolicy
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise InputError("beta must lie in [0, 1]")
        if self.expert is None and self.beta > 0:
            raise InputError("a positive beta needs an expert")

    @property
    def n_actions(self):
        return self.policy.n_actions

    @property
    def action_names(self):
        return self.policy.action_names

    def components(self):
        return [self.policy] if self.expert is None else [self.expert, self.policy]

    def mixture_probs(self, keys_by_feat):
        p = self.policy.probs(keys_by_feat[self.policy.featurizer])
        if self.expert is None or self.beta == 0.0:
            return p
        e = self.expert.probs(keys_by_feat[self.expert.featurizer])
        return self.beta * e + (1.0 - self.beta) * p

    def choose(self, keys_by_feat, u_a, u_mix):
        p = self.policy.probs(keys_by_feat[self.policy.featurizer])
        if self.expert is None or self.beta == 0.0:
            return sample_from_probs(p, u_a)
        e = self.expert.probs(keys_by_feat[self.expert.featurizer])
        use_expert = np.asarray(u_mix) < self.beta
        return sample_from_probs(np.where(use_expert[:, None], e, p), u_a)


# --------------------------------------------------------------------------
# the improvement step


@dataclass
class ImprovementBatch:
    """Training rollouts with their log-weights ``G/eta + log p_pi - log p_lambda``."""

    trajectories: TrajectoryBatch
    returns: np.ndarray
    log_weights: np.ndarray
    eta: float = 1.0

    def __post_init__(self):
        if len(self.trajectories) == 0:
            raise InputError("an improvement batch needs at least one trajectory")


def make_batch(trajectories, logp_policy, logp_planner, eta=1.0):
    """Log-weights for return-weighted regression.

    ``logp_policy`` / ``logp_planner`` are per-step action log-probabilities
    ``(B, T-1)`` under the current policy and under the rollout planner.
    Returns are shifted by their maximum before scaling, so adding a
    constant to every return leaves the weights unchanged.
    """
    g = trajectories.returns()
    if eta <= 0:
        raise InputError("temperature eta must be positive")
    shifted = g - g.max() if len(g) else g
    with np.errstate(invalid="ignore"):
        logw = shifted / eta + logp_policy.sum(axis=1) - logp_planner.sum(axis=1)
    logw = np.where(np.isnan(logw), -np.inf, logw)
    return ImprovementBatch(trajectories, g, logw, eta)


def improve(batch, policy, kappa=0.1):
    """Closed-form weighted maximum likelihood for a tabular softmax policy.

    For each visited key ``h`` and action ``a`` the new logit is
    ``log(sum_i w_i * #{t: key(h_t^i) = h, a_t^i = a} + kappa)``; keys not
    visited keep their old logits.
    """
    logw = np.asarray(batch.log_weights, dtype=float)
    top = logw.max()
    if not np.isfinite(top):
        raise ImprovementError("every trajectory in the batch has zero weight")
    w = np.exp(logw - top)
    tr = batch.trajectories
    keys = history_keys(policy.featurizer, tr.observations, tr.states, tr.actions)
    steps = keys.shape[1]
    flat_keys = keys.ravel()                     # episode-major, then step
    flat_a = tr.actions[:, :steps].ravel()
    flat_w = np.repeat(w, steps)
    uniq, inv = np.unique(flat_keys, return_inverse=True)
    counts = np.zeros((len(uniq), policy.n_actions))
    np.add.at(counts, (inv, flat_a), flat_w)
    return policy.updated(uniq, np.log(counts + kappa))


# --------------------------------------------------------------------------
# configuration and metrics


@dataclass(frozen=True)
class SearchConfig:
    iterations: int = 50
    n_rollouts: int = 20            # real episodes (CF) or model rollouts (MB) per iteration
    n_cf: int = 10                  # counterfactual rollouts per logged episode
    refresh_period: int = 5         # behaviour policy <- current policy every this many iterations
    eta: float = 1.0
    kappa: float = 0.1
    tau_c: float = 500.0
    n_eval: int = 200               # true-environment episodes per iteration for metrics
    seed: int = 0
    chunk: int = 256

    def __post_init__(self):
        for name in ("n_rollouts", "n_cf", "refresh_period", "chunk"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be positive")
        if self.iterations < 0 or self.n_eval < 0 or self.eta <= 0 or self.kappa < 0:
            raise InputError("iterations, n_eval, eta and kappa must be non-negative (eta positive)")


@dataclass
class MetricsRow:
    iter: int
    algo: str
    beta: float
    mean_train_return: float
    true_eval_return: float
    stderr: float
    skipped: int

    def as_dict(self):
        return {"iter": str(self.iter), "algo": self.algo, "beta": repr(float(self.beta)),
                "mean_train_return": repr(float(self.mean_train_return)),
                "true_eval_return": repr(float(self.true_eval_return)),
                "stderr": repr(float(self.stderr)), "skipped": str(self.skipped)}


def metrics_csv(rows):
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=list(METRIC_FIELDS), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.as_dict())
    return out.getvalue()


@dataclass
class SearchResult:
    policy: TabularPolicy
    metrics: list
    checkpoints: dict = field(default_factory=dict)   # iteration -> policy

    def final_return(self):
        return self.metrics[-1].true_eval_return if self.metrics else float("nan")


# --------------------------------------------------------------------------
# shared machinery


def _split(n, chunk):
    return chunks(n, chunk)


def _true_eval(env, policy, n, seed, k, cfg, workers):
    if n == 0:
        return float("nan"), float("nan")

    def run(span):
        lo, hi = span
        g = rngmod.stream(seed, rngmod.SEARCH, k, 3, lo // cfg.chunk)
        return rollouts(env, policy, g, hi - lo).returns()

    return _mean_stderr(np.concatenate(pmap(run, _split(n, cfg.chunk), workers)))


def evaluate_policy(env, policy, n, seed, workers=1, chunk=4096):
    """Monte-Carlo mean return of ``policy`` in ``env`` with worker-independent streams."""
    def run(span):
        lo, hi = span
        return rollouts(env, policy, rngmod.stream(seed, rngmod.EVAL, 99, lo // chunk), hi - lo).returns()

    return _mean_stderr(np.concatenate(pmap(run, _split(n, chunk), workers)))


def _initial_policy(env, featurizer):
    feat = featurizer if featurizer is not None else env.default_featurizer()
    return TabularPolicy.uniform(feat, env.n_actions, tuple(env.actions))


def _model_rollouts(model, planner, policy, n, seed, k, cfg, workers):
    def run(span):
        lo, hi = span
        g = rngmod.stream(seed, rngmod.SEARCH, k, 1, lo // cfg.chunk)
        env = draw_env_noise(model, g, hi - lo)
        act = draw_action_noise(g, hi - lo, model.horizon)
        batch, (lp,) = simulate(model, planner, env, act, record=(policy,))
        return batch, lp

    parts = pmap(run, _split(n, cfg.chunk), workers)
    return (TrajectoryBatch.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]))


def _cf_rollouts(model, real, t, planner, policy, seed, k, cfg, workers):
    """``n_cf`` replays per real episode in one posterior scenario each."""
    def run(span):
        lo, hi = span
        g = rngmod.stream(seed, rngmod.SEARCH, k, 2, lo // cfg.chunk)
        draw = posterior_noise(model, real.take(slice(lo, hi)), t, g)
        ok = np.flatnonzero(draw.ok)
        env = draw.noise.take(np.repeat(ok, cfg.n_cf))
        act = draw_action_noise(g, len(env), model.horizon)
        batch, (lp,) = simulate(model, planner, env, act, record=(policy,))
        return batch, lp, int(len(draw.ok) - len(ok))

    parts = pmap(run, _split(len(real), cfg.chunk), workers)
    return (TrajectoryBatch.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]), sum(p[2] for p in parts))


def _search(algo, model, true_env, cfg, expert, featurizer, workers, condition_t, policy):
    seed = seed_of(cfg.seed)
    schedule = BetaSchedule(cfg.tau_c)
    pi = policy if policy is not None else _initial_policy(true_env, featurizer)
    mu = pi
    result = SearchResult(pi, [], {0: pi})
    for k in range(cfg.iterations):
        beta = schedule(k * cfg.n_rollouts) if expert is not None else 0.0
        planner = PlannerMixture(expert, pi, beta)
        skipped = 0
        if algo == "mbps":
            batch, lp_pi = _model_rollouts(model, planner, pi, cfg.n_rollouts, seed, k, cfg, workers)
        else:
            g = rngmod.stream(seed, rngmod.SEARCH, k, 0)
            real = rollouts(true_env, mu, g, cfg.n_rollouts)
            t = true_env.horizon if condition_t is None else condition_t
            batch, lp_pi, skipped = _cf_rollouts(model, real, t, planner, pi, seed, k, cfg, workers)
        if len(batch):
            imp = make_batch(batch, lp_pi, batch.logp, cfg.eta)
            pi = improve(imp, pi, cfg.kappa)
            train = float(np.mean(batch.returns()))
        else:
            train = float("nan")
        if algo != "mbps" and (k + 1) % cfg.refresh_period == 0:
            mu = pi
        est, se = _true_eval(true_env, pi, cfg.n_eval, seed, k, cfg, workers)
        result.metrics.append(MetricsRow(k + 1, algo, beta, train, est, se, skipped))
        result.checkpoints[k + 1] = pi
    result.policy = pi
    return result


def mb_ps(model, cfg, true_env=None, expert=None, featurizer=None, workers=1, policy=None):
    """Model-based policy search: full-episode rollouts from the model's scenario prior."""
    return _search("mbps", model, true_env if true_env is not None else model, cfg, expert,
                   featurizer, workers, None, policy)


def cf_gps(model, cfg, true_env, expert=None, featurizer=None, workers=1, policy=None,
           condition_t=None):
    """Counterfactually guided search: replays anchored in scenarios inferred from real episodes."""
    return _search("cfgps", model, true_env, cfg, expert, featurizer, workers, condition_t, policy)


def gps_like(model, cfg, true_env, expert=None, featurizer=None, workers=1, policy=None):
    """Like :func:`cf_gps` but the scenario is inferred from the first observation only."""
    res = _search("gpslike", model, true_env, cfg, expert, featurizer, workers, 1, policy)
    return res


ALGORITHMS = {"mbps": mb_ps, "cfgps": cf_gps, "gpslike": gps_like}
