"""Off-policy evaluation: importance sampling, model rollouts, counterfactual replay.

All three estimators report an :class:`EvalReport`.  Randomness comes from
an integer seed (or a generator that supplies one); work is split into fixed
chunks with one stream per chunk, so results do not depend on ``workers``.
"""

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .envs.gridpush import GridPomdp, degenerate_distribution
from .errors import ConstructionError, InputError, SupportCollapseError
from .parallel import chunks, pmap, seed_of
from .pomdp import (TablePomdp, TrajectoryBatch, draw_action_noise, dump_pomdp,
                    posterior_noise, rollouts, simulate, step_log_probs)

SCHEMA = "cfrl.replay/1"
CSV_FIELDS = ("estimator", "t", "estimate", "stderr", "n_effective", "n_used", "skipped")


# --------------------------------------------------------------------------
# environment identity


def describe_env(model):
    if isinstance(model, MismatchedModel):
        return {"kind": "mismatched", "epsilon": model.epsilon, "base": describe_env(model.base)}
    if isinstance(model, GridPomdp):
        return {"kind": "grid", **asdict(model.cfg)}
    if isinstance(model, TablePomdp):
        return {"kind": "table", "text": dump_pomdp(model)}
    raise InputError(f"cannot describe environment of type {type(model).__name__}")


def env_hash(model):
    blob = json.dumps(describe_env(model), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# --------------------------------------------------------------------------
# replay buffer


@dataclass
class ReplayBuffer:
    """Logged episodes with the behaviour policy's per-step log-probabilities."""

    episodes: TrajectoryBatch
    behavior: str = "uniform"
    env: dict = field(default_factory=dict)
    env_hash: str = ""
    seed: int = None

    def __post_init__(self):
        if len(self.episodes) and not np.all(np.isfinite(self.episodes.logp)):
            raise ConstructionError("behaviour log-probabilities must be finite")

    def __len__(self):
        return len(self.episodes)

    def returns(self):
        return self.episodes.returns()

    def prefix(self, n):
        return ReplayBuffer(self.episodes.take(slice(0, n)), self.behavior, self.env,
                            self.env_hash, self.seed)

    def dumps(self):
        b = self.episodes
        head = {"schema": SCHEMA, "env": self.env, "env_hash": self.env_hash, "seed": self.seed,
                "behavior": self.behavior, "n": len(b), "horizon": int(b.horizon),
                "obs_shape": list(b.observations.shape[2:]), "obs_dtype": str(b.observations.dtype)}
        lines = [json.dumps(head, sort_keys=True)]
        for i in range(len(b)):
            lines.append(json.dumps({
                "states": b.states[i].tolist(),
                "observations": b.observations[i].tolist(),
                "actions": b.actions[i].tolist(),
                "rewards": b.rewards[i].tolist(),
                "logp": b.logp[i].tolist(),
                "behavior": self.behavior,
            }, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise InputError("replay buffer file is empty")
        head = json.loads(lines[0])
        if head.get("schema") != SCHEMA:
            raise InputError(f"unsupported replay buffer schema {head.get('schema')!r}")
        T = int(head["horizon"])
        shape = tuple(head["obs_shape"])
        dtype = np.dtype(head["obs_dtype"])
        rows = [json.loads(ln) for ln in lines[1:]]
        if len(rows) != head["n"]:
            raise InputError(f"header announces {head['n']} episodes, found {len(rows)}")
        n = len(rows)
        batch = TrajectoryBatch(
            np.array([r["states"] for r in rows], dtype=np.int64).reshape(n, T),
            np.array([r["observations"] for r in rows], dtype=dtype).reshape((n, T) + shape),
            np.array([r["actions"] for r in rows], dtype=np.int64).reshape(n, T - 1),
            np.array([r["rewards"] for r in rows], dtype=float).reshape(n, T - 1),
            np.array([r["logp"] for r in rows], dtype=float).reshape(n, T - 1),
        )
        return cls(batch, head["behavior"], head["env"], head["env_hash"], head["seed"])

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def collect(env, policy, n, seed, behavior="uniform", workers=1, chunk=1024):
    """Roll ``policy`` out ``n`` times in ``env`` and log the episodes."""
    def run(span):
        lo, hi = span
        return rollouts(env, policy, rngmod.stream(seed, rngmod.DATA, lo // chunk), hi - lo)

    parts = pmap(run, chunks(n, chunk), workers)
    if parts:
        batch = TrajectoryBatch.concatenate(parts)
    else:
        batch = rollouts(env, policy, rngmod.stream(seed, rngmod.DATA, 0), 0)
    return ReplayBuffer(batch, behavior, describe_env(env), env_hash(env), seed)


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    estimator: str
    estimate: float
    stderr: float
    n_used: int
    n_effective: float = None
    t: int = None
    skipped: int = 0

    def __post_init__(self):
        if not (math.isnan(self.stderr) or self.stderr >= 0):
            raise ConstructionError("stderr must be non-negative")
        if self.n_effective is not None and self.n_effective > self.n_used * (1 + 1e-9):
            raise ConstructionError("n_effective cannot exceed n_used")

    def row(self):
        def fmt(x):
            return "" if x is None else repr(float(x)) if isinstance(x, float) else str(x)
        return {"estimator": self.estimator, "t": "" if self.t is None else str(self.t),
                "estimate": fmt(float(self.estimate)), "stderr": fmt(float(self.stderr)),
                "n_effective": fmt(None if self.n_effective is None else float(self.n_effective)),
                "n_used": str(self.n_used), "skipped": str(self.skipped)}


def reports_csv(reports, extra=None):
    """CSV text for reports (``extra`` adds constant columns such as ``seed``)."""
    extra = extra or {}
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=list(CSV_FIELDS) + list(extra), lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({**r.row(), **{k: str(v) for k, v in extra.items()}})
    return out.getvalue()


def _mean_stderr(x):
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return float("nan"), float("nan")
    mean = math.fsum(x.tolist()) / len(x)
    if len(x) < 2:
        return mean, float("nan")
    return mean, float(np.std(x, ddof=1) / math.sqrt(len(x)))


# --------------------------------------------------------------------------
# importance sampling


def is_weights(buffer, target, behavior=None):
    """Per-episode ratios ``exp(loglik(target) - loglik(behavior))``."""
    b = buffer.episodes
    lt = step_log_probs(target, b).sum(axis=1)
    lb = (b.logp if behavior is None else step_log_probs(behavior, b)).sum(axis=1)
    with np.errstate(invalid="ignore", over="ignore"):
        return np.exp(lt - lb)


def is_evaluate(buffer, target, behavior=None, mode="self_normalized"):
    """Importance-sampling estimate of ``target``'s expected return."""
    if len(buffer) == 0:
        raise InputError("importance sampling needs a non-empty buffer")
    if mode not in ("ordinary", "self_normalized"):
        raise InputError(f"unknown importance-sampling mode {mode!r}")
    w = is_weights(buffer, target, behavior)
    g = buffer.returns()
    sw = math.fsum(w.tolist())
    if sw == 0.0:
        raise SupportCollapseError("every logged action has zero probability under the target")
    n = len(w)
    n_eff = sw ** 2 / math.fsum((w * w).tolist())
    if mode == "ordinary":
        est, se = _mean_stderr(w * g)
    else:
        est = math.fsum((w * g).tolist()) / sw
        se = math.sqrt(math.fsum((w * w * (g - est) ** 2).tolist())) / sw if n > 1 else float("nan")
    name = "is" if mode == "ordinary" else "snis"
    return EvalReport(name, est, se, n, min(n_eff, float(n)))


# --------------------------------------------------------------------------
# models with a corrupted scenario prior


class MismatchedModel:
    """A model whose initial-state prior mixes in degenerate scenarios.

    ``prior = (1 - epsilon) * base prior + epsilon * degenerate``; all
    kernels are the base model's.  ``epsilon = 0`` returns the base prior
    arrays untouched.
    """

    def __init__(self, base, epsilon, degenerate):
        if not 0.0 <= epsilon <= 1.0:
            raise InputError("epsilon must lie in [0, 1]")
        self.base = base
        self.epsilon = float(epsilon)
        self.degenerate = degenerate
        codes, probs = base.prior()
        if self.epsilon == 0.0:
            self._prior = (codes, probs)
        else:
            dc, dp = degenerate
            allc = np.union1d(codes, dc)
            p = np.zeros(len(allc))
            p[np.searchsorted(allc, codes)] += (1 - self.epsilon) * probs
            p[np.searchsorted(allc, dc)] += self.epsilon * dp
            keep = p > 0
            self._prior = (allc[keep], p[keep] / math.fsum(p[keep].tolist()))

    def __getattr__(self, name):
        return getattr(self.base, name)

    def prior(self):
        return self._prior

    def sample_initial(self, u, rng=None):
        codes, probs = self._prior
        cdf = np.cumsum(probs)
        idx = np.minimum(np.searchsorted(cdf, np.asarray(u) * cdf[-1], side="right"), len(codes) - 1)
        return codes[idx]

    def prior_candidates(self, first_obs):
        if hasattr(self.base, "prior_candidates"):
            return self.base.prior_candidates(first_obs, self._prior)
        codes, probs = self._prior
        keep = probs > 0
        n = len(first_obs)
        return (np.repeat(np.arange(n), keep.sum()), np.tile(codes[keep], n),
                np.tile(np.log(probs[keep]), n))

    def is_degenerate(self, codes):
        return np.isin(codes, self.degenerate[0]) & ~np.isin(codes, self.base.prior()[0])


def corrupt_prior(model, epsilon, rng=None, degenerate=None):
    """Mix ``epsilon`` of a degenerate-scenario distribution into the prior.

    For the grid world the degenerate scenarios are generator levels with one
    box moved into a free corner; the mixture is computed exactly, so ``rng``
    is accepted only for interface symmetry.
    """
    if degenerate is None:
        if not isinstance(model, GridPomdp):
            raise InputError("pass degenerate=(codes, probs) for non-grid models")
        codes, probs = model.prior()
        degenerate = degenerate_distribution(model.cfg, codes, probs)
    return MismatchedModel(model, epsilon, degenerate)


# --------------------------------------------------------------------------
# model-based and counterfactual evaluation


def mb_evaluate(model, policy, n_rollouts, rng, workers=1, chunk=4096):
    """Mean return of ``policy`` over rollouts from the model's scenario prior."""
    if n_rollouts < 1:
        raise InputError("n_rollouts must be at least 1")
    seed = seed_of(rng)

    def run(span):
        lo, hi = span
        return rollouts(model, policy, rngmod.stream(seed, rngmod.EVAL, lo // chunk), hi - lo).returns()

    g = np.concatenate(pmap(run, chunks(n_rollouts, chunk), workers))
    est, se = _mean_stderr(g)
    return EvalReport("mb", est, se, n_rollouts)


def counterfactual_returns(model, policy, batch, t, n_cf, rng):
    """Returns of ``policy`` replayed in scenarios inferred from ``h_t`` of each episode.

    Output ``(returns (B, n_cf), ok (B,))``; each of the ``n_cf`` replays draws
    its own posterior scenario and fresh action noise.
    """
    n = len(batch)
    out = np.zeros((n, n_cf))
    ok = np.ones(n, dtype=bool)
    for j in range(n_cf):
        draw = posterior_noise(model, batch, t, rng)
        act = draw_action_noise(rng, n, model.horizon)
        out[:, j] = simulate(model, policy, draw.noise, act).returns()
        ok &= draw.ok
    return out, ok


def cf_evaluate(model, policy, buffer, t, n_cf=1, rng=0, workers=1, chunk=1024):
    """Counterfactual policy evaluation conditioned on the first ``t`` steps of each episode."""
    if len(buffer) == 0:
        raise InputError("counterfactual evaluation needs a non-empty buffer")
    if not 0 <= t <= model.horizon:
        raise InputError(f"conditioning horizon {t} outside [0, {model.horizon}]")
    seed = seed_of(rng)

    def run(span):
        lo, hi = span
        g = rngmod.stream(seed, rngmod.EVAL, t, lo // chunk)
        return counterfactual_returns(model, policy, buffer.episodes.take(slice(lo, hi)), t, n_cf, g)

    parts = pmap(run, chunks(len(buffer), chunk), workers)
    returns = np.concatenate([p[0] for p in parts])
    ok = np.concatenate([p[1] for p in parts])
    est, se = _mean_stderr(returns[ok].mean(axis=1))
    return EvalReport("cf", est, se, int(ok.sum()), t=t, skipped=int((~ok).sum()))


def sweep_conditioning(model, policy, buffer, t_list, rng=0, n_cf=1, workers=1):
    """CF-PE for each conditioning horizon in ``t_list`` (order preserved)."""
    seed = seed_of(rng)
    return [(t, cf_evaluate(model, policy, buffer, t, n_cf, seed, workers)) for t in t_list]
