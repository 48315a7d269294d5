"""Executable invariant suite for the exact engine and the POMDP compiler.

Each check compares two independently computed exact distributions and
records the largest absolute deviation.  Randomized SCMs are generated from
``stream(seed, VERIFY, index)`` so any failing case can be replayed from the
report line alone.
"""

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import scm as S
from .envs.twodoor import follow_hint_policy, two_door, uniform_policy
from .errors import CfrlError, ConfigError
from .policy import ObservationFeaturizer, TabularPolicy
from .pomdp import compile as compile_pomdp
from .pomdp import exact_trajectory_distribution, policy_intervention
from .scmfile import load_scm

TOL = 1e-10
UNIFORM_TOL = 1e-12


@dataclass
class Check:
    invariant: str
    subject: str
    deviation: float
    tol: float
    detail: str = ""

    @property
    def ok(self):
        return self.deviation <= self.tol

    def line(self):
        flag = "PASS" if self.ok else "FAIL"
        extra = f" {self.detail}" if self.detail else ""
        return f"{flag} {self.invariant} {self.subject} max_dev={self.deviation:.3e} tol={self.tol:.0e}{extra}"


@dataclass
class Report:
    checks: list = field(default_factory=list)

    @property
    def ok(self):
        return all(c.ok for c in self.checks)

    def failed(self):
        return [c for c in self.checks if not c.ok]

    def text(self):
        lines = [c.line() for c in self.checks]
        n_bad = len(self.failed())
        lines.append(f"{'PASS' if self.ok else 'FAIL'}: {len(self.checks) - n_bad}/{len(self.checks)} checks")
        return "\n".join(lines) + "\n"


def max_abs_diff(p, q):
    keys = set(p) | set(q)
    return max((abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys), default=0.0)


# --------------------------------------------------------------------------
# exact identities


def posterior_averaging_deviation(scm, intervention, observed, query, cap=S.DEFAULT_CAP):
    """``sum_x p(x) * cf(x, I)`` against ``p^{do(I)}``, via the public query API."""
    target = S.apply_intervention(scm, intervention)
    enum, groups = S.observational_groups(scm, observed, cap=cap, refine=(target,))
    mixed = defaultdict(float)
    for key, (p_obs, _) in groups.items():
        obs = dict(zip(S._normalize_query(observed), key))
        cf = S.counterfactual_query(scm, obs, intervention, query, enumeration=enum)
        for q, p in cf.items():
            mixed[q] += p_obs * p
    return max_abs_diff(dict(mixed), S.interventional_marginal(scm, intervention, query, cap=cap))


def posterior_marginal_deviation(scm, observed, cap=S.DEFAULT_CAP):
    """``sum_x p(x) p(u | x)`` against the prior ``p(u)``."""
    enum, groups = S.observational_groups(scm, observed, cap=cap)
    acc = defaultdict(float)
    for key, (p_obs, _) in groups.items():
        post = S.infer_noise_posterior(scm, dict(zip(S._normalize_query(observed), key)),
                                       enumeration=enum)
        for a, w in zip(post.assignments, post.weights.tolist()):
            acc[a] += p_obs * w
    prior = {a: p for a, p in zip(enum.assignments, enum.probs.tolist()) if p > 0}
    return max_abs_diff(dict(acc), prior)


def mixed_simulation_deviation(scm, intervention, observed, query, subsets=None, cap=S.DEFAULT_CAP):
    """Worst deviation of mixed posterior/prior simulation from ``p^{do(I)}`` over noise splits."""
    target = S.apply_intervention(scm, intervention)
    enum, groups = S.observational_groups(scm, observed, cap=cap, refine=(target,))
    ref = S.interventional_marginal(scm, intervention, query, cap=cap)
    ids = sorted(scm.noise)
    if subsets is None:
        subsets = [set(c) for r in range(len(ids) + 1) for c in itertools.combinations(ids, r)]
    worst = 0.0
    for sub in subsets:
        mixed = defaultdict(float)
        for key, (p_obs, _) in groups.items():
            obs = dict(zip(S._normalize_query(observed), key))
            for q, p in S.mixed_query(scm, obs, sub, intervention, query, cap=cap).items():
                mixed[q] += p_obs * p
        worst = max(worst, max_abs_diff(dict(mixed), ref))
    return worst


def consistency_deviation(scm, observed, cap=S.DEFAULT_CAP):
    """Empty-intervention counterfactuals must reproduce the observation."""
    enum, groups = S.observational_groups(scm, observed, cap=cap)
    worst = 0.0
    for key in groups:
        obs = dict(zip(S._normalize_query(observed), key))
        cf = S.counterfactual_query(scm, obs, S.Intervention(), observed, enumeration=enum)
        worst = max(worst, 1.0 - cf.get(key, 0.0))
    return worst


def uniformization_deviation(rng, n_tables=100):
    """Random conditionals -> inverse-CDF mechanism -> induced table, and the quantized twin."""
    worst = 0.0
    for _ in range(n_tables):
        n_par = int(rng.integers(0, 3))
        pdoms = [tuple(range(int(rng.integers(1, 4)))) for _ in range(n_par)]
        values = tuple(f"v{i}" for i in range(int(rng.integers(1, 5))))
        table = {}
        for combo in itertools.product(*pdoms):
            p = rng.dirichlet(np.ones(len(values)))
            p[rng.random(len(values)) < 0.2] = 0.0
            if p.sum() == 0:
                p[int(rng.integers(len(values)))] = 1.0
            p = p / p.sum()
            table[combo] = dict(zip(values, p.tolist()))
        parents = tuple(f"P{i}" for i in range(n_par))
        mech = S.uniformize(table, node="X", parents=parents)
        induced = S.induced_conditional(mech, pdoms)
        spec, qmech = S.quantize(mech, pdoms)
        for combo, row in table.items():
            qrow = defaultdict(float)
            for u, pu in zip(spec.support, spec.probs):
                qrow[qmech(combo, u)] += pu
            full = {v: p for v, p in row.items() if p > 0}
            worst = max(worst, max_abs_diff(full, induced[combo]), max_abs_diff(full, dict(qrow)))
    return worst


# --------------------------------------------------------------------------
# fixtures


def two_coin():
    doms = {"A": ("a1", "a2"), "O": (0, 1)}
    noise = [S.NoiseSpec.point("U_A"), S.NoiseSpec("U_O", (0, 1), (0.5, 0.5))]
    mechs = [S.Mechanism.constant("A", "a1", "U_A"),
             S.Mechanism.from_table("O", ("A",), "U_O",
                                    {("a1", 0): 0, ("a1", 1): 1, ("a2", 0): 1, ("a2", 1): 0})]
    return S.Scm(doms, noise, mechs)


def uniform_chain():
    """X -> Y with both mechanisms on continuous uniform noise."""
    mx = S.uniformize({(): {0: 0.3, 1: 0.7}}, node="X", noise="U_X")
    my = S.uniformize({(0,): {"a": 0.5, "b": 0.25, "c": 0.25}, (1,): {"a": 0.1, "b": 0.9}},
                      node="Y", parents=("X",), noise="U_Y")
    return S.Scm({"X": (0, 1), "Y": ("a", "b", "c")},
                 [S.NoiseSpec.uniform("U_X"), S.NoiseSpec.uniform("U_Y")], [mx, my])


def builtin_fixtures():
    """``(name, scm, intervention, observed, query)`` for the built-in models."""
    coin = two_coin()
    chain = uniform_chain()
    chain_i = S.Intervention({"Y": S.uniformize({(0,): {"a": 0.2, "b": 0.2, "c": 0.6},
                                                 (1,): {"c": 1.0}},
                                                node="Y", parents=("X",), noise="U_Y")})
    env = two_door()
    mu, pi = uniform_policy(env), follow_hint_policy(env)
    door = compile_pomdp(env, mu)
    return [
        ("two_coin", coin, S.do(coin, {"A": "a2"}), ("A", "O"), ("O",)),
        ("uniform_chain", chain, chain_i, ("Y",), ("X", "Y")),
        ("two_door", door, policy_intervention(mu, pi, env), ("O1", "A1", "O2"), ("G",)),
    ]


# --------------------------------------------------------------------------
# randomized SCMs


def random_scm(rng, max_nodes=6, max_support=4):
    n = int(rng.integers(2, max_nodes + 1))
    names = [f"X{i}" for i in range(n)]
    doms, noise, mechs = {}, [], []
    for i, name in enumerate(names):
        doms[name] = tuple(range(int(rng.integers(2, max_support + 1))))
    for i, name in enumerate(names):
        parents = tuple(p for p in names[:i] if rng.random() < 0.5)[:2]
        k = int(rng.integers(1, max_support + 1))
        probs = rng.dirichlet(np.ones(k))
        probs = probs / math.fsum(probs.tolist())
        probs[-1] = 1.0 - math.fsum(probs[:-1].tolist())
        if probs[-1] < 0:
            probs = np.full(k, 1.0 / k)
        noise.append(S.NoiseSpec(f"U{i}", tuple(range(k)), tuple(probs.tolist())))
        mechs.append(_random_table(rng, name, parents, f"U{i}", doms, k))
    return S.Scm(doms, noise, mechs)


def _random_table(rng, node, parents, nid, doms, k):
    table = {}
    for combo in itertools.product(*(doms[p] for p in parents)):
        for u in range(k):
            table[(*combo, u)] = int(rng.integers(len(doms[node])))
    return S.Mechanism.from_table(node, parents, nid, table)


def random_case(rng, scm):
    names = list(scm.nodes)
    order = list(scm.order)
    targets = sorted(rng.choice(names, size=int(rng.integers(1, min(2, len(names)) + 1)), replace=False))
    repl = {}
    for node in targets:
        earlier = order[: order.index(node)]
        parents = tuple(p for p in earlier if rng.random() < 0.5)[:2]
        k = len(scm.noise[scm.mechanisms[node].noise].support)
        repl[node] = _random_table(rng, node, parents, scm.mechanisms[node].noise, scm.domains, k)
    observed = tuple(sorted(rng.choice(names, size=int(rng.integers(1, min(3, len(names)) + 1)),
                                       replace=False)))
    query = tuple(sorted(rng.choice(names, size=int(rng.integers(1, min(2, len(names)) + 1)),
                                    replace=False)))
    return S.Intervention(repl), observed, query


# --------------------------------------------------------------------------
# POMDP-level identities


def compiled_equivalence_deviation(env, policies):
    """Compiled SCM vs direct recursion over the simulator, per policy."""
    worst = 0.0
    T = env.horizon
    for pol in policies:
        m = compile_pomdp(env, pol)
        obs_nodes = [f"O{t}" for t in range(1, T + 1)]
        act_nodes = [f"A{t}" for t in range(1, T)]
        dist = S.interventional_marginal(m, S.Intervention(), (*obs_nodes, *act_nodes, "G"))
        ref = {}
        for (o, a, g), p in exact_trajectory_distribution(env, pol).items():
            key = (*(env.observations[i] for i in o), *(env.actions[i] for i in a), g)
            ref[key] = ref.get(key, 0.0) + p
        worst = max(worst, max_abs_diff(dist, ref))
    return worst


def noise_invariance_deviation(env, mu, pi):
    m = compile_pomdp(env, mu)
    swapped = S.apply_intervention(m, policy_intervention(mu, pi, env))
    env_noise = [n for n in m.noise if n.startswith(("U_S", "U_O"))]
    same = all(m.noise[n] == swapped.noise[n] for n in env_noise) and dict(m.noise) == dict(swapped.noise)
    return 0.0 if same else 1.0


def _random_policy(env, rng):
    feat = ObservationFeaturizer(env.n_obs, env.horizon)
    keys = [int(feat.step(feat.start(1), np.array([o]), None, 1)[1][0]) for o in range(env.n_obs)]
    return TabularPolicy.from_table(feat, env.n_actions,
                                    {k: rng.normal(size=env.n_actions) for k in keys}, env.actions)


# --------------------------------------------------------------------------
# the suite


def run_suite(seed, n_random=20, fixture_paths=(), tol=TOL):
    report = Report()
    add = report.checks.append
    for name, scm, inter, observed, query in builtin_fixtures():
        add(Check("posterior_averaging", name, posterior_averaging_deviation(scm, inter, observed, query), tol))
        add(Check("posterior_marginalization", name, posterior_marginal_deviation(scm, observed), tol))
        add(Check("mixed_simulation", name, mixed_simulation_deviation(scm, inter, observed, query), tol))
        add(Check("cfi_consistency", name, consistency_deviation(scm, observed), tol))
    env = two_door()
    mu, pi = uniform_policy(env), follow_hint_policy(env)
    rnd = _random_policy(env, rngmod.stream(seed, rngmod.VERIFY, 10**6))
    add(Check("compiled_equivalence", "two_door", compiled_equivalence_deviation(env, [mu, pi, rnd]), tol))
    add(Check("noise_invariance", "two_door", noise_invariance_deviation(env, mu, pi), 0.0))
    door = compile_pomdp(env, mu)
    cf = posterior_averaging_deviation(door, policy_intervention(mu, pi, env), ("O1", "A1", "R1", "O2"), "G")
    exact = abs(S.expectation(S.interventional_marginal(door, policy_intervention(mu, pi, env), "G")) - 0.8)
    add(Check("cfpe_unbiased", "two_door", max(cf, exact), tol))
    add(Check("uniformization", f"random_tables[100] seed={seed}",
              uniformization_deviation(rngmod.stream(seed, rngmod.VERIFY, 10**6 + 1)), UNIFORM_TOL))
    for i in range(n_random):
        g = rngmod.stream(seed, rngmod.VERIFY, i)
        scm = random_scm(g)
        inter, observed, query = random_case(g, scm)
        subj = f"random[{i}] seed={seed}"
        add(Check("posterior_averaging", subj, posterior_averaging_deviation(scm, inter, observed, query), tol))
        add(Check("posterior_marginalization", subj, posterior_marginal_deviation(scm, observed), tol))
        ids = sorted(scm.noise)
        split = [{n for n in ids if g.random() < 0.5}]
        add(Check("mixed_simulation", subj, mixed_simulation_deviation(scm, inter, observed, query, split), tol))
    for path in fixture_paths:
        _check_file(report, path, tol)
    return report


def _check_file(report, path, tol):
    add = report.checks.append
    try:
        scm, expects = load_scm(path)
    except (ConfigError, CfrlError, OSError) as exc:
        add(Check("well_formed", str(path), 1.0, 0.0, detail=f"({exc})"))
        return
    add(Check("well_formed", str(path), 0.0, 0.0))
    for node, value, prob, lineno in expects:
        got = S.interventional_marginal(scm, S.Intervention(), (node,)).get((value,), 0.0)
        add(Check("expected_marginal", f"{path}:{lineno}", abs(got - prob), tol,
                  detail=f"P({node}={value})={got!r}"))
    nodes = scm.nodes
    observed = nodes[-1:]
    add(Check("posterior_averaging", str(path), posterior_averaging_deviation(scm, S.Intervention(), observed, nodes[:1]), tol))
    add(Check("posterior_marginalization", str(path), posterior_marginal_deviation(scm, observed), tol))
