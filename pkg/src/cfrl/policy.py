"""History featurizers and tabular softmax policies.

A featurizer turns an observation history into a non-negative ``int64`` key.
Featurizers are incremental: :meth:`start` returns a memory for a batch of
episodes and :meth:`step` folds in the observation at step ``t`` (1-based)
together with the previous action and reward.  Privileged featurizers read
the true state instead of the observation; they are meant for planners and
experts that act on model states.

A :class:`TabularPolicy` stores logits for the keys it has seen, sorted so
that batched lookup is a single ``searchsorted``.  Unseen keys get uniform
probabilities.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConstructionError, InputError

_MISSING = -1


@dataclass(frozen=True)
class ObservationFeaturizer:
    """Key = last ``k`` observation indices (+ step index, + last reward index)."""

    n_obs: int
    horizon: int
    k: int = 1
    include_step: bool = True
    n_rewards: int = 0          # >0 enables the last-reward field
    privileged = False

    def start(self, n):
        return np.full((n, self.k + 1), _MISSING, dtype=np.int64)

    def step(self, mem, obs, state, t, prev_action=None, prev_reward_index=None):
        mem = mem.copy()
        mem[:, :-2] = mem[:, 1:-1]
        mem[:, -2] = np.asarray(obs, dtype=np.int64)
        if self.n_rewards and prev_reward_index is not None:
            mem[:, -1] = prev_reward_index
        key = np.zeros(len(mem), dtype=np.int64)
        for j in range(self.k):
            key = key * (self.n_obs + 1) + (mem[:, j] + 1)
        if self.n_rewards:
            key = key * (self.n_rewards + 1) + (mem[:, -1] + 1)
        if self.include_step:
            key = key * (self.horizon + 1) + t
        return mem, key

    def describe(self):
        return {"kind": "observation", "n_obs": self.n_obs, "horizon": self.horizon,
                "k": self.k, "include_step": int(self.include_step), "n_rewards": self.n_rewards}


@dataclass(frozen=True)
class StateFeaturizer:
    """Privileged key = true state code (+ step index)."""

    horizon: int
    include_step: bool = True
    privileged = True

    def start(self, n):
        return None

    def step(self, mem, obs, state, t, prev_action=None, prev_reward_index=None):
        key = np.asarray(state, dtype=np.int64)
        if self.include_step:
            key = key * (self.horizon + 1) + t
        return mem, key

    def describe(self):
        return {"kind": "state", "horizon": self.horizon, "include_step": int(self.include_step)}


def featurizer_from_dict(d):
    kind = d.get("kind")
    if kind == "observation":
        return ObservationFeaturizer(int(d["n_obs"]), int(d["horizon"]), int(d["k"]),
                                     bool(int(d["include_step"])), int(d.get("n_rewards", 0)))
    if kind == "state":
        return StateFeaturizer(int(d["horizon"]), bool(int(d["include_step"])))
    if kind == "grid_memory":
        from .envs.gridpush import GridMemoryFeaturizer
        return GridMemoryFeaturizer(int(d["width"]), int(d["height"]), bool(int(d["include_step"])),
                                    int(d["horizon"]))
    raise ConstructionError(f"unknown featurizer kind {kind!r}")


def history_keys(featurizer, observations, states, actions=None, reward_index=None, steps=None):
    """Keys for ``h_1 .. h_steps`` of a batch of episodes, shape ``(B, steps)``."""
    observations = np.asarray(observations)
    n, horizon = observations.shape[0], observations.shape[1]
    steps = horizon - 1 if steps is None else steps
    mem = featurizer.start(n)
    keys = np.zeros((n, steps), dtype=np.int64)
    for t in range(1, steps + 1):
        prev_a = None if t == 1 or actions is None else actions[:, t - 2]
        prev_r = None if t == 1 or reward_index is None else reward_index[:, t - 2]
        st = None if states is None else states[:, t - 1]
        mem, keys[:, t - 1] = featurizer.step(mem, observations[:, t - 1], st, t, prev_a, prev_r)
    return keys


def _softmax(logits):
    m = np.max(logits, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Softmax policy over ``n_actions`` with logits per feature key."""

    featurizer: object
    n_actions: int
    keys: np.ndarray
    logits: np.ndarray
    action_names: tuple = None

    def __post_init__(self):
        keys = np.asarray(self.keys, dtype=np.int64)
        logits = np.asarray(self.logits, dtype=float).reshape(len(keys), self.n_actions)
        if len(keys) and np.any(np.diff(keys) <= 0):
            order = np.argsort(keys, kind="stable")
            keys, logits = keys[order], logits[order]
            if np.any(np.diff(keys) == 0):
                raise ConstructionError("duplicate policy keys")
        if np.any(np.isnan(logits)) or np.any(logits == np.inf):
            raise ConstructionError("policy logits must be finite or -inf")
        if len(keys) and np.any(np.all(logits == -np.inf, axis=1)):
            raise ConstructionError("a policy row has no action with positive probability")
        keys.setflags(write=False)
        logits.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "logits", logits)
        if self.action_names is not None:
            object.__setattr__(self, "action_names", tuple(self.action_names))
            if len(self.action_names) != self.n_actions:
                raise ConstructionError("action_names length differs from n_actions")

    @classmethod
    def uniform(cls, featurizer, n_actions, action_names=None):
        return cls(featurizer, n_actions, np.zeros(0, np.int64), np.zeros((0, n_actions)), action_names)

    @classmethod
    def from_table(cls, featurizer, n_actions, table, action_names=None):
        keys = sorted(table)
        logits = np.array([np.asarray(table[k], dtype=float) for k in keys]).reshape(len(keys), n_actions)
        return cls(featurizer, n_actions, np.array(keys, dtype=np.int64), logits, action_names)

    def __eq__(self, other):
        return (isinstance(other, TabularPolicy) and self.featurizer == other.featurizer
                and self.n_actions == other.n_actions and np.array_equal(self.keys, other.keys)
                and np.array_equal(self.logits, other.logits))

    __hash__ = None

    def _rows(self, keys):
        keys = np.asarray(keys, dtype=np.int64)
        if len(self.keys) == 0:
            return np.full(keys.shape, -1)
        idx = np.searchsorted(self.keys, keys)
        idx_c = np.minimum(idx, len(self.keys) - 1)
        found = self.keys[idx_c] == keys
        return np.where(found, idx_c, -1)

    def probs(self, keys):
        """Action probabilities for an array of keys, shape ``keys.shape + (n_actions,)``."""
        rows = self._rows(keys)
        out = np.full(rows.shape + (self.n_actions,), 1.0 / self.n_actions)
        hit = rows >= 0
        if np.any(hit):
            out[hit] = _softmax(self.logits[rows[hit]])
        return out

    def logits_for(self, keys):
        rows = self._rows(keys)
        out = np.zeros(rows.shape + (self.n_actions,))
        hit = rows >= 0
        out[hit] = self.logits[rows[hit]]
        return out

    def updated(self, keys, logits):
        """New policy with rows for ``keys`` replaced (or added)."""
        keys = np.asarray(keys, dtype=np.int64)
        logits = np.asarray(logits, dtype=float).reshape(len(keys), self.n_actions)
        keep = ~np.isin(self.keys, keys)
        all_keys = np.concatenate([self.keys[keep], keys])
        all_logits = np.concatenate([self.logits[keep], logits])
        order = np.argsort(all_keys, kind="stable")
        return TabularPolicy(self.featurizer, self.n_actions, all_keys[order], all_logits[order],
                             self.action_names)

    def table(self):
        return {int(k): self.logits[i].copy() for i, k in enumerate(self.keys)}

    # text tables -----------------------------------------------------------

    def dumps(self):
        names = self.action_names or tuple(str(a) for a in range(self.n_actions))
        desc = " ".join(f"{k}={v}" for k, v in self.featurizer.describe().items())
        lines = ["# cfrl policy v1", f"# featurizer {desc}", f"# actions {' '.join(names)}"]
        for i, k in enumerate(self.keys):
            for a in range(self.n_actions):
                lines.append(f"{int(k)} {names[a]} {float(self.logits[i, a])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text):
        feat, names, rows = None, None, {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("# featurizer "):
                feat = featurizer_from_dict(dict(kv.split("=", 1) for kv in line[13:].split()))
                continue
            if line.startswith("# actions "):
                names = tuple(line[10:].split())
                continue
            if line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or names is None:
                raise InputError(f"policy table line {lineno}: expected 'key action logit'")
            key, act, val = int(parts[0]), names.index(parts[1]), float(parts[2])
            rows.setdefault(key, [0.0] * len(names))[act] = val
        if feat is None or names is None:
            raise InputError("policy table is missing its featurizer or actions header")
        return cls.from_table(feat, len(names), rows, names)


def sample_from_probs(probs, u):
    """Inverse-CDF draw of one action per row of ``probs`` at uniforms ``u``."""
    cdf = np.cumsum(probs, axis=-1)
    a = (cdf <= np.asarray(u)[..., None] * cdf[..., -1:]).sum(axis=-1)
    # guard rows whose tail carries zero mass
    a = np.minimum(a, probs.shape[-1] - 1)
    bad = probs[np.arange(len(a)), a] <= 0
    if np.any(bad):
        last = probs.shape[-1] - 1 - np.argmax(probs[bad][:, ::-1] > 0, axis=-1)
        a[bad] = last
    return a


def log_prob(probs, actions):
    p = probs[np.arange(len(actions)), actions]
    with np.errstate(divide="ignore"):
        return np.log(p)


def safe_logsumexp(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))
