"""POMDPs as structural causal models.

Two views of the same environment live here:

* a vectorized simulator (:func:`simulate`, :func:`rollouts`,
  :func:`env_rollout`) that consumes pre-drawn noise arrays, and
* :func:`compile`, which unrolls a finite POMDP and a policy into an
  :class:`~cfrl.scm.Scm` for the exact engine.

Environment objects (:class:`TablePomdp` here, the grid world in
:mod:`cfrl.envs.gridpush`) share one duck-typed protocol.  States are
``int64`` codes; observations are arrays with a leading batch axis; noise is
passed explicitly as :class:`EnvNoise` so that counterfactual rollouts can
reuse inferred scenario noise while drawing fresh action noise.

Index conventions for an episode of horizon ``T``: ``states[:, j]`` is
``S_{j+1}``; ``actions[:, j]`` and ``rewards[:, j]`` belong to step ``j+1``
(``j < T-1``); ``u_s[:, j]`` drives the transition into ``S_{j+2}``.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import scm as scm_mod
from .errors import CapacityError, ConstructionError, InputError
from .policy import history_keys, log_prob, sample_from_probs
from .scm import Mechanism, NoiseSpec, Scm, uniformize
from . import textfmt


def inverse_cdf(probs, u):
    """Index of the first cumulative probability exceeding ``u`` (vectorized)."""
    cdf = np.cumsum(probs)
    idx = np.searchsorted(cdf, np.asarray(u) * cdf[-1], side="right")
    return np.minimum(idx, len(probs) - 1)


# --------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    states: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    logp: np.ndarray

    def __post_init__(self):
        T = len(self.states)
        if len(self.observations) != T or len(self.actions) != T - 1 or len(self.rewards) != T - 1:
            raise ConstructionError("trajectory lengths inconsistent with the horizon")

    @property
    def horizon(self):
        return len(self.states)


@dataclass(frozen=True)
class History:
    """Observation history ``(o_1, a_1, ..., a_{t-1}, o_t)``."""

    observations: tuple
    actions: tuple = ()
    rewards: tuple = ()

    def __post_init__(self):
        if len(self.actions) != len(self.observations) - 1:
            raise ConstructionError("history must alternate observations and actions")
        if self.rewards and len(self.rewards) != len(self.actions):
            raise ConstructionError("history rewards must align with actions")

    @classmethod
    def prefix(cls, traj, t):
        return cls(tuple(traj.observations[:t]), tuple(int(a) for a in traj.actions[: t - 1]),
                   tuple(float(r) for r in traj.rewards[: t - 1]))


@dataclass
class TrajectoryBatch:
    states: np.ndarray          # (B, T) int64
    observations: np.ndarray    # (B, T, *obs_shape)
    actions: np.ndarray         # (B, T-1) int64
    rewards: np.ndarray         # (B, T-1) float
    logp: np.ndarray            # (B, T-1) generating-policy log-probs

    def __len__(self):
        return len(self.states)

    @property
    def horizon(self):
        return self.states.shape[1]

    def returns(self):
        return self.rewards.sum(axis=1)

    def __getitem__(self, i):
        return Trajectory(self.states[i], self.observations[i], self.actions[i],
                          self.rewards[i], self.logp[i])

    def take(self, idx):
        return TrajectoryBatch(self.states[idx], self.observations[idx], self.actions[idx],
                               self.rewards[idx], self.logp[idx])

    @classmethod
    def concatenate(cls, batches):
        batches = list(batches)
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("states", "observations", "actions", "rewards", "logp")))

    @classmethod
    def from_trajectories(cls, trajs):
        return cls(*(np.stack([getattr(t, f) for t in trajs])
                     for f in ("states", "observations", "actions", "rewards", "logp")))


def trajectory_return(traj):
    """Undiscounted return: the plain sum of rewards."""
    return math.fsum(float(r) for r in traj.rewards)


# --------------------------------------------------------------------------
# noise


@dataclass
class EnvNoise:
    """Environment noise for a batch of episodes (no action noise)."""

    s1: np.ndarray        # (B,) initial state codes
    u_s: np.ndarray       # (B, T-1) transition-noise indices
    u_o: np.ndarray       # (B, T, *obs_noise_shape) observation noise

    def __len__(self):
        return len(self.s1)

    def take(self, idx):
        return EnvNoise(self.s1[idx], self.u_s[idx], self.u_o[idx])


def draw_env_noise(model, rng, n):
    """Prior draw of environment noise for ``n`` episodes."""
    T = model.horizon
    u1 = rng.random(n)
    us = rng.random((n, T - 1))
    uo = rng.random((n, T) + tuple(model.obs_noise_shape))
    return EnvNoise(model.sample_initial(u1, rng), model.sample_transition_noise(us),
                    model.sample_obs_noise(uo))


@dataclass
class ActionNoise:
    u_a: np.ndarray       # (B, T-1) uniforms for inverse-CDF action draws
    u_mix: np.ndarray     # (B, T-1) uniforms for choosing a mixture component


def draw_action_noise(rng, n, horizon):
    return ActionNoise(rng.random((n, horizon - 1)), rng.random((n, horizon - 1)))


# --------------------------------------------------------------------------
# policies inside rollouts


class _KeyTracker:
    """Runs every featurizer needed by a set of policies alongside a rollout."""

    def __init__(self, policies, n):
        self.feats = []
        for p in policies:
            for f in policy_featurizers(p):
                if f not in self.feats:
                    self.feats.append(f)
        self.mem = [f.start(n) for f in self.feats]
        self.keys = {}

    def step(self, obs, state, t, prev_a, prev_r):
        for i, f in enumerate(self.feats):
            self.mem[i], self.keys[f] = f.step(self.mem[i], obs, state, t, prev_a, prev_r)


def policy_featurizers(policy):
    if hasattr(policy, "components"):
        out = []
        for c in policy.components():
            out.extend(policy_featurizers(c))
        return out
    return [policy.featurizer]


def policy_probs(policy, keys_by_feat):
    """Per-step action probabilities given featurizer keys."""
    if hasattr(policy, "mixture_probs"):
        return policy.mixture_probs(keys_by_feat)
    return policy.probs(keys_by_feat[policy.featurizer])


def _choose(policy, keys_by_feat, u_a, u_mix):
    if hasattr(policy, "choose"):
        return policy.choose(keys_by_feat, u_a, u_mix)
    return sample_from_probs(policy.probs(keys_by_feat[policy.featurizer]), u_a)


def simulate(model, policy, env_noise, action_noise, record=()):
    """Vectorized episodes of ``policy`` under explicit noise.

    Returns the batch and, for each policy in ``record``, the per-step
    log-probabilities of the taken actions under that policy.
    """
    T = model.horizon
    n = len(env_noise)
    states = np.zeros((n, T), dtype=np.int64)
    obs = np.zeros((n, T) + tuple(model.obs_shape), dtype=model.obs_dtype)
    actions = np.zeros((n, T - 1), dtype=np.int64)
    rewards = np.zeros((n, T - 1))
    logp = np.zeros((n, T - 1))
    rec = [np.zeros((n, T - 1)) for _ in record]
    tracker = _KeyTracker([policy, *record], n)
    s = np.asarray(env_noise.s1, dtype=np.int64)
    prev_a = prev_r = None
    for t in range(1, T + 1):
        states[:, t - 1] = s
        o = model.observe(s, env_noise.u_o[:, t - 1])
        obs[:, t - 1] = o
        if t == T:
            break
        tracker.step(o, s, t, prev_a, prev_r)
        a = _choose(policy, tracker.keys, action_noise.u_a[:, t - 1], action_noise.u_mix[:, t - 1])
        logp[:, t - 1] = log_prob(policy_probs(policy, tracker.keys), a)
        for j, p in enumerate(record):
            rec[j][:, t - 1] = log_prob(policy_probs(p, tracker.keys), a)
        s_next, r = model.step(s, a, env_noise.u_s[:, t - 1])
        actions[:, t - 1] = a
        rewards[:, t - 1] = r
        prev_a, prev_r = a, model.reward_index(r)
        s = s_next
    batch = TrajectoryBatch(states, obs, actions, rewards, logp)
    return (batch, rec) if record else batch


def rollouts(model, policy, rng, n, record=()):
    """``n`` episodes from the model's prior scenario distribution."""
    env = draw_env_noise(model, rng, n)
    act = draw_action_noise(rng, n, model.horizon)
    return simulate(model, policy, env, act, record)


def env_rollout(pomdp, policy, rng):
    """One episode of ``policy`` in ``pomdp``, with action log-probabilities."""
    return rollouts(pomdp, policy, rng, 1)[0]


def step_log_probs(policy, batch, reward_index=None):
    """``log policy(a_t | h_t)`` for every step of every episode, ``(B, T-1)``."""
    T = batch.horizon
    keys = {}
    for f in policy_featurizers(policy):
        if f not in keys:
            keys[f] = history_keys(f, batch.observations, batch.states, batch.actions, reward_index)
    out = np.zeros(batch.actions.shape)
    for t in range(T - 1):
        kt = {f: k[:, t] for f, k in keys.items()}
        out[:, t] = log_prob(policy_probs(policy, kt), batch.actions[:, t])
    return out


def action_loglik(policy, traj, reward_index=None):
    """Sum of ``log policy(a_t | h_t)``; ``-inf`` when an action has probability 0."""
    if isinstance(traj, Trajectory):
        batch = TrajectoryBatch.from_trajectories([traj])
        return float(step_log_probs(policy, batch, reward_index).sum())
    return step_log_probs(policy, traj, reward_index).sum(axis=1)


# --------------------------------------------------------------------------
# table POMDP


@dataclass(frozen=True, eq=False)
class TablePomdp:
    """Finite POMDP given by explicit tables.

    ``transition[s, a, u]`` and ``observation[s, u]`` are index-valued
    tables; ``reward[s, a]`` is real-valued.  Names are kept for compiling to
    an SCM and for description files.
    """

    states: tuple
    actions: tuple
    observations: tuple
    horizon: int
    initial_probs: np.ndarray
    transition_noise: NoiseSpec
    transition: np.ndarray
    observation_noise: NoiseSpec
    observation: np.ndarray
    reward_table: np.ndarray
    reward_min: float = None
    reward_max: float = None

    obs_shape = ()
    obs_noise_shape = ()
    obs_dtype = np.int64
    posterior_method = "dense"

    def __post_init__(self):
        S, A, O = len(self.states), len(self.actions), len(self.observations)
        Us, Uo = len(self.transition_noise.support), len(self.observation_noise.support)
        for name, arr, shape in (("transition", self.transition, (S, A, Us)),
                                 ("observation", self.observation, (S, Uo)),
                                 ("reward", self.reward_table, (S, A))):
            arr = np.asarray(arr)
            if arr.shape != shape:
                raise ConstructionError(f"{name} table has shape {arr.shape}, expected {shape}")
        if self.horizon < 1:
            raise ConstructionError("horizon must be at least 1")
        tr = np.asarray(self.transition, dtype=np.int64)
        ob = np.asarray(self.observation, dtype=np.int64)
        if tr.min() < 0 or tr.max() >= S or ob.min() < 0 or ob.max() >= O:
            raise ConstructionError("table entry outside its domain")
        p0 = np.asarray(self.initial_probs, dtype=float)
        if p0.shape != (S,) or np.any(p0 < 0) or abs(p0.sum() - 1) > 1e-12:
            raise ConstructionError("initial_probs must be a distribution over states")
        rw = np.asarray(self.reward_table, dtype=float)
        lo = rw.min() if self.reward_min is None else self.reward_min
        hi = rw.max() if self.reward_max is None else self.reward_max
        if rw.min() < lo or rw.max() > hi or not np.all(np.isfinite(rw)):
            raise ConstructionError("rewards outside the declared bounds")
        for name, val in (("transition", tr), ("observation", ob), ("reward_table", rw),
                          ("initial_probs", p0)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "reward_min", float(lo))
        object.__setattr__(self, "reward_max", float(hi))
        # P(o | s) and the reward alphabet
        po = np.asarray(self.observation_noise.probs)
        lik = np.zeros((S, O))
        for u in range(Uo):
            np.add.at(lik, (np.arange(S), ob[:, u]), po[u])
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "_obs_loglik", np.log(lik))
        object.__setattr__(self, "reward_values", tuple(np.unique(rw).tolist()))

    @property
    def n_actions(self):
        return len(self.actions)

    @property
    def n_states(self):
        return len(self.states)

    @property
    def n_obs(self):
        return len(self.observations)

    # protocol ---------------------------------------------------------------

    def prior(self):
        return np.arange(self.n_states, dtype=np.int64), np.asarray(self.initial_probs)

    def sample_initial(self, u, rng=None):
        codes, probs = self.prior()
        return codes[inverse_cdf(probs, u)]

    @property
    def transition_probs(self):
        return np.asarray(self.transition_noise.probs)

    def sample_transition_noise(self, u):
        return inverse_cdf(self.transition_probs, u)

    def transition_fn(self, s, a, u_s):
        return self.transition[s, a, u_s]

    def reward(self, s, a):
        return self.reward_table[s, a]

    def step(self, s, a, u_s):
        return self.transition[s, a, u_s], self.reward_table[s, a]

    def reward_index(self, r):
        return np.searchsorted(np.asarray(self.reward_values), r)

    def sample_obs_noise(self, u):
        return inverse_cdf(np.asarray(self.observation_noise.probs), u)

    def observe(self, s, u_o):
        return self.observation[s, u_o]

    def obs_loglik(self, s, o):
        return self._obs_loglik[s, o]

    def obs_noise_posterior(self, s, o, u):
        po = np.asarray(self.observation_noise.probs)
        w = po[None, :] * (self.observation[s] == np.asarray(o)[:, None])
        cdf = np.cumsum(w, axis=1)
        idx = (cdf <= np.asarray(u)[:, None] * cdf[:, -1:]).sum(axis=1)
        return np.minimum(idx, w.shape[1] - 1)

    def default_featurizer(self, k=1, include_step=True):
        from .policy import ObservationFeaturizer
        return ObservationFeaturizer(self.n_obs, self.horizon, k, include_step)


# --------------------------------------------------------------------------
# posterior sampling of scenario noise


@dataclass
class PosteriorDraw:
    noise: EnvNoise
    ok: np.ndarray        # (B,) False where the history contradicts the model


def posterior_noise(model, batch, t, rng):
    """Sample environment noise with steps ``<= t`` from the posterior given ``h_t``.

    Conditioning data are ``o_1..o_t``, ``a_1..a_{t-1}`` and
    ``r_1..r_{t-1}``.  Noise for later steps comes from the prior.  Rows
    whose history has zero likelihood under the model are flagged in ``ok``
    and keep their prior draw.
    """
    n, T = len(batch), model.horizon
    if not 0 <= t <= T:
        raise InputError(f"conditioning horizon {t} outside [0, {T}]")
    prior = draw_env_noise(model, rng, n)
    if t == 0 or n == 0:
        return PosteriorDraw(prior, np.ones(n, dtype=bool))
    u_pick = rng.random(n)
    u_back = rng.random((n, max(t - 1, 0)))
    u_obs = rng.random((n, t) + tuple(model.obs_noise_shape))
    if model.posterior_method == "dense":
        s_path, u_s, ok = _dense_backward(model, batch, t, u_pick, u_back)
    else:
        s_path, u_s, ok = _particle_backward(model, batch, t, u_pick)
    noise = EnvNoise(prior.s1.copy(), prior.u_s.copy(), prior.u_o.copy())
    noise.s1[ok] = s_path[ok, 0]
    if t > 1:
        noise.u_s[ok, : t - 1] = u_s[ok]
    for j in range(t):
        post = model.obs_noise_posterior(s_path[ok, j], batch.observations[ok, j], u_obs[ok, j])
        noise.u_o[ok, j] = post
    return PosteriorDraw(noise, ok)


def _dense_backward(model, batch, t, u_pick, u_back):
    codes, p0 = model.prior()
    S = len(codes)
    if not np.array_equal(codes, np.arange(S)):
        raise ConstructionError("dense posterior needs states indexed 0..S-1")
    n = len(batch)
    pu = model.transition_probs
    U = len(pu)
    A = batch.actions
    alphas = []
    alpha = p0[None, :] * np.exp(model.obs_loglik(np.arange(S)[None, :], batch.observations[:, 0][:, None]))
    gated = []
    for j in range(t - 1):
        z = alpha.sum(axis=1, keepdims=True)
        alpha = np.divide(alpha, z, out=np.zeros_like(alpha), where=z > 0)
        alphas.append(alpha)
        r_ok = model.reward(np.arange(S)[None, :], A[:, j][:, None]) == batch.rewards[:, j][:, None]
        g = alpha * r_ok
        gated.append(g)
        nxt = model.transition_fn(np.arange(S)[None, :, None], A[:, j][:, None, None],
                                  np.arange(U)[None, None, :])          # (n, S, U)
        w = g[:, :, None] * pu[None, None, :]
        new = np.zeros((n, S))
        rows = np.broadcast_to(np.arange(n)[:, None, None], nxt.shape)
        np.add.at(new, (rows.ravel(), nxt.ravel()), w.ravel())
        lik = np.exp(model.obs_loglik(np.arange(S)[None, :], batch.observations[:, j + 1][:, None]))
        alpha = new * lik
    z = alpha.sum(axis=1, keepdims=True)
    ok = z[:, 0] > 0
    alpha = np.divide(alpha, z, out=np.zeros_like(alpha), where=z > 0)
    s_path = np.zeros((n, t), dtype=np.int64)
    u_s = np.zeros((n, max(t - 1, 0)), dtype=np.int64)
    s_path[:, t - 1] = _rowwise_pick(alpha, u_pick)
    for j in range(t - 2, -1, -1):
        nxt = model.transition_fn(np.arange(S)[None, :, None], A[:, j][:, None, None],
                                  np.arange(U)[None, None, :])
        w = gated[j][:, :, None] * pu[None, None, :] * (nxt == s_path[:, j + 1][:, None, None])
        flat = w.reshape(n, S * U)
        k = _rowwise_pick(flat, u_back[:, j])
        s_path[:, j], u_s[:, j] = k // U, k % U
    return s_path, u_s, ok


def _rowwise_pick(w, u):
    cdf = np.cumsum(w, axis=1)
    total = cdf[:, -1:]
    idx = (cdf <= np.asarray(u)[:, None] * total).sum(axis=1)
    idx = np.minimum(idx, w.shape[1] - 1)
    # never land on a zero-weight entry at the tail
    bad = (w[np.arange(len(idx)), idx] <= 0) & (total[:, 0] > 0)
    if np.any(bad):
        idx[bad] = w.shape[1] - 1 - np.argmax(w[bad][:, ::-1] > 0, axis=1)
    return idx


def prior_candidates(model, first_obs):
    """Default candidate set: every prior-supported initial state for every episode.

    Returns ``(episode_index, codes, log_prior)`` for all (episode, candidate)
    pairs.  Models may override this with a cheaper pre-filter.
    """
    hook = getattr(model, "prior_candidates", None)
    if hook is not None:
        return hook(first_obs)
    codes, p0 = model.prior()
    keep = p0 > 0
    codes, logp0 = codes[keep], np.log(p0[keep])
    n = len(first_obs)
    return (np.repeat(np.arange(n), len(codes)), np.tile(codes, n), np.tile(logp0, n))


def _particle_backward(model, batch, t, u_pick):
    """Posterior over the initial state for deterministic transitions.

    Each (episode, candidate) pair is filtered along the logged actions and
    dropped as soon as an observation or reward contradicts it.
    """
    if len(model.transition_probs) != 1:
        raise ConstructionError("particle posterior requires deterministic transitions")
    n = len(batch)
    ep, s1, logw = prior_candidates(model, batch.observations[:, 0])
    s = s1
    zero = np.zeros(1, dtype=np.int64)
    for j in range(t):
        logw = logw + model.obs_loglik(s, batch.observations[ep, j])
        alive = np.isfinite(logw)
        if j < t - 1:
            a = batch.actions[ep, j]
            s_next, r = model.step(s, a, np.broadcast_to(zero, s.shape))
            alive &= r == batch.rewards[ep, j]
            s = s_next
        ep, s1, s, logw = ep[alive], s1[alive], s[alive], logw[alive]
    ok = np.zeros(n, dtype=bool)
    ok[ep] = True
    chosen = np.zeros(n, dtype=np.int64)
    if len(ep):
        # pairs are grouped by episode in increasing order
        starts = np.flatnonzero(np.r_[True, ep[1:] != ep[:-1]])
        ends = np.r_[starts[1:], len(ep)]
        mx = np.maximum.reduceat(logw, starts)
        w = np.exp(logw - np.repeat(mx, ends - starts))
        cum = np.cumsum(w)
        base = np.r_[0.0, cum[ends[:-1] - 1]]
        tot = cum[ends - 1] - base
        target = base + u_pick[ep[starts]] * tot
        k = np.searchsorted(cum, target, side="right")
        k = np.clip(k, starts, ends - 1)
        chosen[ep[starts]] = s1[k]
    s_path = np.zeros((n, t), dtype=np.int64)
    cur = chosen
    zeros = np.zeros(n, dtype=np.int64)
    for j in range(t):
        s_path[:, j] = cur
        if j < t - 1:
            cur = model.step(cur, batch.actions[:, j], zeros)[0]
    return s_path, np.zeros((n, max(t - 1, 0)), dtype=np.int64), ok


# --------------------------------------------------------------------------
# exact reference distributions


def exact_trajectory_distribution(pomdp, policy):
    """Exact law of ``(observations, actions, G)`` by direct recursion.

    Walks the simulator's own probabilities (initial, transition, observation
    and policy) without any uniformization; the reference route against which
    compiled SCMs are checked.
    """
    T = pomdp.horizon
    p0 = pomdp.initial_probs.tolist()
    pu = pomdp.transition_probs.tolist()
    po = list(pomdp.observation_noise.probs)
    out = {}

    def rec(t, s, obs_hist, act_hist, g, prob):
        for uo in range(len(po)):
            if po[uo] == 0:
                continue
            o = int(pomdp.observation[s, uo])
            pr = prob * po[uo]
            oh = obs_hist + (o,)
            if t == T:
                key = (oh, act_hist, g)
                out[key] = out.get(key, 0.0) + pr
                continue
            hist_obs = np.array([list(oh)])
            keys = {}
            for f in policy_featurizers(policy):
                mem = f.start(1)
                for tt in range(1, t + 1):
                    prev_a = None if tt == 1 else np.array([act_hist[tt - 2]])
                    mem, k = f.step(mem, hist_obs[:, tt - 1], np.array([s]), tt, prev_a, None)
                keys[f] = k
            probs = policy_probs(policy, keys)[0]
            for a in range(pomdp.n_actions):
                if probs[a] == 0:
                    continue
                r = float(pomdp.reward_table[s, a])
                for us in range(len(pu)):
                    if pu[us] == 0:
                        continue
                    s2 = int(pomdp.transition[s, a, us])
                    rec(t + 1, s2, oh, act_hist + (a,), g + r, pr * float(probs[a]) * pu[us])

    for s in range(pomdp.n_states):
        if p0[s] > 0:
            rec(1, s, (), (), 0.0, p0[s])
    return out


# --------------------------------------------------------------------------
# compile to an SCM


def node_names(T):
    """Node identifiers of the unrolled SCM for horizon ``T``."""
    names = [f"S{t}" for t in range(1, T + 1)] + [f"O{t}" for t in range(1, T + 1)]
    if T >= 2:
        names += [f"H{t}" for t in range(1, T + 1)]
        names += [f"A{t}" for t in range(1, T)] + [f"R{t}" for t in range(1, T)] + ["G"]
    return names


def node_count(T):
    return 2 if T == 1 else 5 * T - 1


@dataclass(frozen=True)
class _HistoryAppend:
    first: bool

    def __call__(self, parents, u):
        if self.first:
            return (parents[0],)
        h, a, o = parents
        return h + (a, o)


@dataclass(frozen=True)
class _Sum:
    def __call__(self, parents, u):
        return float(math.fsum(parents))


@dataclass(frozen=True, eq=False)
class _PolicyRow:
    """Maps a history value to the policy's feature key, then inverse CDF."""

    pomdp: object
    policy: object
    inner: object

    def __call__(self, parents, u):
        h = parents[0]
        obs = [self.pomdp.observations.index(v) for v in h[0::2]]
        acts = [self.pomdp.actions.index(v) for v in h[1::2]]
        mem = self.policy.featurizer.start(1)
        for t, o in enumerate(obs, start=1):
            prev = None if t == 1 else np.array([acts[t - 2]])
            mem, key = self.policy.featurizer.step(mem, np.array([o]), None, t, prev, None)
        return self.inner((int(key[0]),), u)

    def __eq__(self, other):
        return (isinstance(other, _PolicyRow) and other.pomdp is self.pomdp
                and other.policy == self.policy)

    def __hash__(self):
        return id(self.pomdp)


def policy_mechanism(pomdp, policy, t):
    """``A_t = f_policy(H_t, U_A{t})`` via uniformization of the policy rows."""
    if policy.n_actions != pomdp.n_actions:
        raise ConstructionError("policy and POMDP disagree on the action domain")
    if getattr(policy.featurizer, "privileged", False):
        raise ConstructionError("compiled policies must act on histories, not states")
    names = pomdp.actions
    rows = {}
    for k in policy.keys:
        p = policy.probs(np.array([k]))[0]
        rows[(int(k),)] = dict(zip(names, p))
    default = dict(zip(names, np.full(len(names), 1.0 / len(names))))
    inner = uniformize(rows, node=f"A{t}", parents=(f"H{t}",), noise=f"U_A{t}", default_row=default)
    return Mechanism(f"A{t}", (f"H{t}",), f"U_A{t}", fn=_PolicyRow(pomdp, policy, inner.fn),
                     breakpoints=inner.breakpoints)


def compile(pomdp, policy, T=None):
    """Unroll ``pomdp`` under ``policy`` into an SCM over ``T`` steps."""
    if not isinstance(pomdp, TablePomdp):
        raise CapacityError("only table POMDPs can be compiled; use the simulator for larger envs")
    T = pomdp.horizon if T is None else T
    if T < 1:
        raise ConstructionError("horizon must be at least 1")
    S, A, O = pomdp.states, pomdp.actions, pomdp.observations
    us, uo = pomdp.transition_noise.support, pomdp.observation_noise.support
    domains, noise, mechs = {}, [], []

    def add(node, dom, spec, mech):
        domains[node] = dom
        noise.append(spec)
        mechs.append(mech)

    add("S1", S, NoiseSpec("U_S1", S, tuple(pomdp.initial_probs.tolist())),
        Mechanism.from_table("S1", (), "U_S1", {(s,): s for s in S}))
    for t in range(1, T + 1):
        if t > 1:
            table = {(S[s], A[a], us[u]): S[pomdp.transition[s, a, u]]
                     for s in range(len(S)) for a in range(len(A)) for u in range(len(us))}
            add(f"S{t}", S, replace(pomdp.transition_noise, id=f"U_S{t}"),
                Mechanism.from_table(f"S{t}", (f"S{t-1}", f"A{t-1}"), f"U_S{t}", table))
        table = {(S[s], uo[u]): O[pomdp.observation[s, u]]
                 for s in range(len(S)) for u in range(len(uo))}
        add(f"O{t}", O, replace(pomdp.observation_noise, id=f"U_O{t}"),
            Mechanism.from_table(f"O{t}", (f"S{t}",), f"U_O{t}", table))
        if T == 1:
            continue
        parents = (f"O{t}",) if t == 1 else (f"H{t-1}", f"A{t-1}", f"O{t}")
        add(f"H{t}", None, NoiseSpec.point(f"U_H{t}"),
            Mechanism(f"H{t}", parents, f"U_H{t}", fn=_HistoryAppend(t == 1), breakpoints=()))
        if t < T:
            add(f"A{t}", A, NoiseSpec.uniform(f"U_A{t}"), policy_mechanism(pomdp, policy, t))
            table = {(S[s], A[a], 0): float(pomdp.reward_table[s, a])
                     for s in range(len(S)) for a in range(len(A))}
            add(f"R{t}", pomdp.reward_values, NoiseSpec.point(f"U_R{t}"),
                Mechanism.from_table(f"R{t}", (f"S{t}", f"A{t}"), f"U_R{t}", table))
    if T >= 2:
        add("G", None, NoiseSpec.point("U_G"),
            Mechanism("G", tuple(f"R{t}" for t in range(1, T)), "U_G", fn=_Sum(), breakpoints=()))
    return Scm(domains, noise, mechs)


def policy_intervention(old, new, pomdp):
    """Intervention ``I(old -> new)``: swap every action mechanism for ``new``'s."""
    if old.n_actions != new.n_actions or old.action_names != new.action_names:
        raise InputError("policies must share the action domain")
    if new.n_actions != pomdp.n_actions:
        raise InputError("policy and POMDP disagree on the action domain")
    return scm_mod.Intervention(
        {f"A{t}": policy_mechanism(pomdp, new, t) for t in range(1, pomdp.horizon)}
    )


# --------------------------------------------------------------------------
# description files

_POMDP_SECTIONS = {"pomdp", "initial", "transition_noise", "transition",
                   "observation_noise", "observation", "reward"}


def _noise_section(sec, nid):
    sec.check_keys({"support", "probs"})
    support = tuple(textfmt.split_list(sec.require("support")))
    probs = tuple(textfmt.parse_float_list(sec.require("probs"), sec.line_of("probs")))
    try:
        return NoiseSpec(nid, support, probs)
    except ConstructionError as exc:
        raise textfmt.ConfigError(str(exc), sec.lineno) from exc


def _rows(sec, pattern):
    import re
    rx = re.compile(pattern)
    out = []
    for text, lineno in sec.rows:
        m = rx.match(text)
        if not m:
            raise textfmt.ConfigError(f"malformed [{sec.name}] row: {text!r}", lineno)
        out.append((m.groups(), lineno))
    return out


def parse_pomdp(text):
    """Build a :class:`TablePomdp` from description-file text."""
    from .errors import ConfigError
    secs = textfmt.parse(text, _POMDP_SECTIONS, allow_rows={"transition", "observation", "reward"})
    by = {}
    for s in secs:
        if s.name in by:
            raise ConfigError(f"duplicate section [{s.name}]", s.lineno)
        by[s.name] = s
    missing = _POMDP_SECTIONS - set(by)
    if missing:
        raise ConfigError(f"missing sections: {sorted(missing)}")
    head = by["pomdp"]
    head.check_keys({"horizon", "states", "actions", "observations", "reward_min", "reward_max"})
    S = tuple(textfmt.split_list(head.require("states")))
    A = tuple(textfmt.split_list(head.require("actions")))
    O = tuple(textfmt.split_list(head.require("observations")))
    T = textfmt.parse_int(head.require("horizon"), head.line_of("horizon"))
    init = by["initial"]
    init.check_keys({"support", "probs"})
    p_init = dict(zip(textfmt.split_list(init.require("support")),
                      textfmt.parse_float_list(init.require("probs"), init.line_of("probs"))))
    for s in p_init:
        if s not in S:
            raise ConfigError(f"initial support value {s!r} is not a state", init.lineno)
    p0 = np.array([p_init.get(s, 0.0) for s in S])
    tn = _noise_section(by["transition_noise"], "U_S")
    on = _noise_section(by["observation_noise"], "U_O")
    tr = np.full((len(S), len(A), len(tn.support)), -1)
    for (s, a, u, v), ln in _rows(by["transition"], r"^s=(\S+)\s+a=(\S+)\s+u=(\S+)\s*->\s*(\S+)$"):
        try:
            tr[S.index(s), A.index(a), tn.support.index(u)] = S.index(v)
        except ValueError:
            raise ConfigError("transition row uses an unknown value", ln) from None
    ob = np.full((len(S), len(on.support)), -1)
    for (s, u, v), ln in _rows(by["observation"], r"^s=(\S+)\s+u=(\S+)\s*->\s*(\S+)$"):
        try:
            ob[S.index(s), on.support.index(u)] = O.index(v)
        except ValueError:
            raise ConfigError("observation row uses an unknown value", ln) from None
    rw = np.full((len(S), len(A)), np.nan)
    for (s, a, v), ln in _rows(by["reward"], r"^s=(\S+)\s+a=(\S+)\s*->\s*(\S+)$"):
        try:
            rw[S.index(s), A.index(a)] = float(v)
        except ValueError:
            raise ConfigError("reward row uses an unknown value", ln) from None
    if np.any(tr < 0) or np.any(ob < 0) or np.any(np.isnan(rw)):
        raise ConfigError("POMDP tables are not total")
    rmin = head.get("reward_min")
    rmax = head.get("reward_max")
    try:
        return TablePomdp(S, A, O, T, p0, tn, tr, on, ob, rw,
                          None if rmin is None else float(rmin), None if rmax is None else float(rmax))
    except ConstructionError as exc:
        raise ConfigError(str(exc)) from exc


def dump_pomdp(p):
    lines = ["[pomdp]", f"horizon = {p.horizon}", f"states = {', '.join(p.states)}",
             f"actions = {', '.join(p.actions)}", f"observations = {', '.join(p.observations)}",
             f"reward_min = {p.reward_min!r}", f"reward_max = {p.reward_max!r}", "",
             "[initial]", f"support = {', '.join(p.states)}",
             f"probs = {', '.join(repr(float(x)) for x in p.initial_probs)}", ""]
    for name, spec in (("transition_noise", p.transition_noise), ("observation_noise", p.observation_noise)):
        lines += [f"[{name}]", f"support = {', '.join(map(str, spec.support))}",
                  f"probs = {', '.join(repr(x) for x in spec.probs)}", ""]
    lines.append("[transition]")
    for s, sn in enumerate(p.states):
        for a, an in enumerate(p.actions):
            for u, un in enumerate(p.transition_noise.support):
                lines.append(f"s={sn} a={an} u={un} -> {p.states[p.transition[s, a, u]]}")
    lines += ["", "[observation]"]
    for s, sn in enumerate(p.states):
        for u, un in enumerate(p.observation_noise.support):
            lines.append(f"s={sn} u={un} -> {p.observations[p.observation[s, u]]}")
    lines += ["", "[reward]"]
    for s, sn in enumerate(p.states):
        for a, an in enumerate(p.actions):
            lines.append(f"s={sn} a={an} -> {float(p.reward_table[s, a])!r}")
    return "\n".join(lines) + "\n"
