"""Structural causal models with finite discrete noise.

An :class:`Scm` is a DAG of deterministic mechanisms ``x_i = f_i(pa_i, u_i)``
driven by independent exogenous noise variables.  Every query here is
answered *exactly* by enumerating the joint noise space, which is why noise
supports must be finite.  Continuous ``Uniform[0, 1)`` noise is accepted only
for mechanisms built by :func:`uniformize`: such mechanisms are piecewise
constant in ``u`` and publish their breakpoints, so the engine can quantize
the unit interval into the cells where every mechanism reading the noise is
constant.

Node values and finite noise values can be any hashable objects.  Node and
noise identifiers are strings; everything that is ordered is ordered by
identifier so that results are reproducible bit for bit.
"""

import heapq
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Callable, Mapping, Optional

import numpy as np

from .errors import CapacityError, ConstructionError, ContradictionError, InputError

DEFAULT_CAP = 10**7
PROB_TOL = 1e-12
ROW_TOL = 1e-9


@dataclass(frozen=True)
class NoiseSpec:
    """Distribution of one exogenous noise variable.

    ``support=None`` denotes continuous ``Uniform[0, 1)`` noise.
    """

    id: str
    support: Optional[tuple] = None
    probs: Optional[tuple] = None

    def __post_init__(self):
        if self.support is None:
            if self.probs is not None:
                raise ConstructionError(f"uniform noise {self.id!r} cannot carry probs")
            return
        support = tuple(self.support)
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)
        if not support:
            raise ConstructionError(f"noise {self.id!r} has empty support")
        if len(support) != len(probs):
            raise ConstructionError(f"noise {self.id!r}: support and probs differ in length")
        if len(set(support)) != len(support):
            raise ConstructionError(f"noise {self.id!r}: support values are not distinct")
        if any(p < 0 or not math.isfinite(p) for p in probs):
            raise ConstructionError(f"noise {self.id!r}: negative or non-finite probability")
        if abs(math.fsum(probs) - 1.0) > PROB_TOL:
            raise ConstructionError(f"noise {self.id!r}: probs sum to {math.fsum(probs)!r}, not 1")

    @classmethod
    def uniform(cls, id):
        return cls(id)

    @classmethod
    def point(cls, id, value=0):
        return cls(id, (value,), (1.0,))

    @property
    def is_uniform(self):
        return self.support is None

    def sample(self, rng):
        if self.is_uniform:
            return float(rng.random())
        idx = int(np.searchsorted(np.cumsum(self.probs), rng.random(), side="right"))
        return self.support[min(idx, len(self.support) - 1)]


@dataclass(frozen=True)
class Mechanism:
    """Deterministic function ``node = f(parents, noise)``.

    Either ``table`` (keyed by ``(*parent_values, noise_value)``) or ``fn``
    (called as ``fn(parent_values, u)``) is given.  ``breakpoints`` lists the
    points of ``(0, 1)`` where a mechanism on uniform noise may change value.
    """

    node: str
    parents: tuple
    noise: str
    fn: Optional[Callable] = None
    table: Optional[Mapping] = None
    breakpoints: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(self.parents))
        if (self.fn is None) == (self.table is None):
            raise ConstructionError(f"mechanism for {self.node!r} needs exactly one of fn/table")
        if self.table is not None and not isinstance(self.table, MappingProxyType):
            object.__setattr__(self, "table", MappingProxyType(dict(self.table)))
        if self.breakpoints is not None:
            object.__setattr__(self, "breakpoints", tuple(float(b) for b in self.breakpoints))

    @classmethod
    def from_table(cls, node, parents, noise, table):
        return cls(node, tuple(parents), noise, table=table)

    @classmethod
    def constant(cls, node, value, noise):
        return cls(node, (), noise, fn=_Const(value), breakpoints=())

    def __call__(self, parent_values, u):
        if self.table is not None:
            try:
                return self.table[(*parent_values, u)]
            except KeyError:
                raise InputError(
                    f"mechanism {self.node!r} has no row for parents={tuple(parent_values)!r} noise={u!r}"
                ) from None
        return self.fn(tuple(parent_values), u)


@dataclass(frozen=True)
class _Const:
    value: Any

    def __call__(self, parent_values, u):
        return self.value


@dataclass(frozen=True)
class Scm:
    """A structural causal model.

    ``domains`` maps each node to its tuple of admissible values, or ``None``
    when the domain is not enumerated (e.g. observation histories).
    """

    domains: Mapping
    noise: Mapping
    mechanisms: Mapping
    order: tuple = field(default=(), compare=False)

    def __init__(self, domains, noise_specs, mechanisms):
        if not isinstance(noise_specs, Mapping):
            noise_specs = {n.id: n for n in noise_specs}
        if not isinstance(mechanisms, Mapping):
            mechanisms = {m.node: m for m in mechanisms}
        domains = {k: (None if v is None else tuple(v)) for k, v in dict(domains).items()}
        object.__setattr__(self, "domains", MappingProxyType(domains))
        object.__setattr__(self, "noise", MappingProxyType(dict(noise_specs)))
        object.__setattr__(self, "mechanisms", MappingProxyType(dict(mechanisms)))
        self._validate()
        object.__setattr__(self, "order", tuple(topo_order(self)))
        self._check_tables()

    @property
    def nodes(self):
        return tuple(sorted(self.domains))

    def parents(self, node):
        return self.mechanisms[node].parents

    def _validate(self):
        nodes = set(self.domains)
        if set(self.mechanisms) != nodes:
            missing = sorted(nodes - set(self.mechanisms))
            extra = sorted(set(self.mechanisms) - nodes)
            raise ConstructionError(f"mechanism/node mismatch: missing={missing} extra={extra}")
        overlap = nodes & set(self.noise)
        if overlap:
            raise ConstructionError(f"noise identifiers collide with nodes: {sorted(overlap)}")
        for key, spec in self.noise.items():
            if spec.id != key:
                raise ConstructionError(f"noise spec keyed {key!r} has id {spec.id!r}")
        used = {}
        for node, mech in self.mechanisms.items():
            if mech.node != node:
                raise ConstructionError(f"mechanism keyed {node!r} computes {mech.node!r}")
            for p in mech.parents:
                if p not in nodes:
                    raise ConstructionError(f"{node!r} has unknown parent {p!r}")
            if mech.noise not in self.noise:
                raise ConstructionError(f"{node!r} reads unknown noise {mech.noise!r}")
            if mech.noise in used:
                raise ConstructionError(
                    f"noise {mech.noise!r} shared by {used[mech.noise]!r} and {node!r}"
                )
            used[mech.noise] = node
            if self.noise[mech.noise].is_uniform and mech.breakpoints is None:
                raise ConstructionError(
                    f"{node!r} reads uniform noise but publishes no breakpoints"
                )
        unused = sorted(set(self.noise) - set(used))
        if unused:
            raise ConstructionError(f"noise variables without a mechanism: {unused}")

    def _check_tables(self):
        for node, mech in self.mechanisms.items():
            if mech.table is None:
                continue
            spec = self.noise[mech.noise]
            doms = [self.domains[p] for p in mech.parents]
            if spec.is_uniform or any(d is None for d in doms):
                continue
            out_dom = self.domains[node]
            for combo in itertools.product(*doms, spec.support):
                if combo not in mech.table:
                    raise ConstructionError(f"mechanism {node!r} table has no row for {combo!r}")
                if out_dom is not None and mech.table[combo] not in out_dom:
                    raise ConstructionError(
                        f"mechanism {node!r} maps {combo!r} outside its domain"
                    )


def topo_order(scm):
    """Topological order with lexicographic tie-break among ready nodes."""
    children = defaultdict(list)
    indeg = {}
    for node, mech in scm.mechanisms.items():
        indeg[node] = len(mech.parents)
        for p in mech.parents:
            children[p].append(node)
    ready = [n for n, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for c in children[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != len(indeg):
        stuck = sorted(set(indeg) - set(order))
        edge = _find_cycle_edge(scm, stuck)
        raise ConstructionError(f"cycle detected through edge {edge[0]} -> {edge[1]}")
    return order


def _find_cycle_edge(scm, stuck):
    # every stuck node has a stuck parent, so walking parents must revisit a node
    stuck = set(stuck)
    node = min(stuck)
    path = []
    while node not in path:
        path.append(node)
        node = min(p for p in scm.mechanisms[node].parents if p in stuck)
    return node, path[-1]


@dataclass(frozen=True)
class Intervention:
    """Mechanism replacements ``node -> Mechanism``; noise is never replaced."""

    replacements: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "replacements", MappingProxyType(dict(self.replacements)))


def do(scm, values):
    """Atomic intervention setting each node in ``values`` to a constant."""
    return Intervention(
        {n: Mechanism.constant(n, v, scm.mechanisms[n].noise) for n, v in values.items()}
    )


@dataclass(frozen=True)
class Observation:
    assignments: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "assignments", MappingProxyType(dict(self.assignments)))


def _as_observation(scm, obs):
    if obs is None:
        obs = {}
    if isinstance(obs, Observation):
        obs = obs.assignments
    for node, value in obs.items():
        if node not in scm.domains:
            raise InputError(f"observed node {node!r} is not in the model")
        dom = scm.domains[node]
        if dom is not None and value not in dom:
            raise InputError(f"observed value {value!r} outside the domain of {node!r}")
    return dict(obs)


def apply_intervention(scm, intervention):
    """Return ``scm`` with the intervention's mechanisms swapped in."""
    if not intervention.replacements:
        return scm
    mechs = dict(scm.mechanisms)
    for node, mech in intervention.replacements.items():
        if node not in mechs:
            raise InputError(f"intervention targets unknown node {node!r}")
        if mech.node != node:
            raise InputError(f"replacement for {node!r} computes {mech.node!r}")
        if mech.noise != mechs[node].noise:
            raise InputError(f"replacement for {node!r} must keep noise {mechs[node].noise!r}")
        mechs[node] = mech
    return Scm(scm.domains, scm.noise, mechs)


def _check_noise(scm, u):
    for nid, spec in scm.noise.items():
        if nid not in u:
            raise InputError(f"noise assignment is missing {nid!r}")
        val = u[nid]
        if spec.is_uniform:
            if not (isinstance(val, (float, int)) and 0.0 <= val < 1.0):
                raise InputError(f"uniform noise {nid!r} value {val!r} outside [0, 1)")
        elif val not in spec.support:
            raise InputError(f"noise {nid!r} value {val!r} outside its support")


def _evaluate(scm, u):
    x = {}
    for node in scm.order:
        mech = scm.mechanisms[node]
        x[node] = mech(tuple(x[p] for p in mech.parents), u[mech.noise])
    return x


def evaluate(scm, u):
    """Compute every node from a full noise assignment ``u``."""
    _check_noise(scm, u)
    return _evaluate(scm, u)


def sample_prior(scm, rng):
    u = {nid: scm.noise[nid].sample(rng) for nid in sorted(scm.noise)}
    return u, _evaluate(scm, u)


# --------------------------------------------------------------------------
# enumeration


@dataclass(frozen=True)
class Enumeration:
    """The joint noise space of one or more SCMs sharing noise specs.

    ``values[nid]`` and ``cell_probs[nid]`` describe each variable's finite
    support; uniform noise is represented by cell midpoints.
    ``assignments`` are tuples ordered like ``noise_ids``.
    """

    noise_ids: tuple
    values: Mapping
    cell_probs: Mapping
    cells: Mapping
    assignments: tuple
    probs: np.ndarray

    def as_dict(self, k):
        return dict(zip(self.noise_ids, self.assignments[k]))


def noise_cells(scms, nid):
    """Finite representation of noise ``nid`` valid for every model in ``scms``."""
    spec = scms[0].noise[nid]
    if not spec.is_uniform:
        return spec.support, np.asarray(spec.probs, dtype=float), None
    cuts = set()
    for s in scms:
        for mech in s.mechanisms.values():
            if mech.noise == nid:
                cuts.update(b for b in mech.breakpoints if 0.0 < b < 1.0)
    edges = [0.0, *sorted(cuts), 1.0]
    lo = np.array(edges[:-1])
    hi = np.array(edges[1:])
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    mids = tuple(float(v) for v in (lo + hi) / 2.0)
    return mids, hi - lo, tuple(zip(lo.tolist(), hi.tolist()))


def enumerate_noise(scms, cap=DEFAULT_CAP):
    if isinstance(scms, Scm):
        scms = [scms]
    scms = list(scms)
    base = scms[0]
    for s in scms[1:]:
        if dict(s.noise) != dict(base.noise):
            raise InputError("models in one enumeration must share noise specs")
    ids = tuple(sorted(base.noise))
    values, cprobs, cells = {}, {}, {}
    total = 1
    for nid in ids:
        vals, probs, cell = noise_cells(scms, nid)
        values[nid], cprobs[nid], cells[nid] = vals, probs, cell
        total *= len(vals)
        if total > cap:
            raise CapacityError(
                f"joint noise space exceeds the enumeration cap of {cap}; coarsen the model"
            )
    assignments = tuple(itertools.product(*(values[n] for n in ids)))
    probs = np.ones(1)
    for nid in ids:
        probs = np.multiply.outer(probs, cprobs[nid]).ravel()
    return Enumeration(ids, MappingProxyType(values), MappingProxyType(cprobs),
                       MappingProxyType(cells), assignments, probs)


def _evaluations(scm, enum):
    return [_evaluate(scm, dict(zip(enum.noise_ids, a))) for a in enum.assignments]


@dataclass(frozen=True)
class ScenarioPosterior:
    """Weighted, normalized set of distinct full noise assignments."""

    noise_ids: tuple
    assignments: tuple
    weights: np.ndarray

    def as_dicts(self):
        return [dict(zip(self.noise_ids, a)) for a in self.assignments]

    def marginal(self, subset):
        idx = [self.noise_ids.index(n) for n in subset]
        out = defaultdict(float)
        for a, w in zip(self.assignments, self.weights.tolist()):
            out[tuple(a[i] for i in idx)] += w
        return dict(out)

    def sample_index(self, rng):
        cdf = np.cumsum(self.weights)
        k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return min(k, len(self.weights) - 1)


def _consistent(x, obs):
    return all(x[n] == v for n, v in obs.items())


def infer_noise_posterior(scm, obs=None, *, cap=DEFAULT_CAP, refine=(), enumeration=None):
    """Exact posterior over noise given a partial node observation.

    ``refine`` lists further models (typically intervened versions of
    ``scm``) whose uniform-noise breakpoints must be respected by the cells.
    """
    obs = _as_observation(scm, obs)
    enum = enumeration if enumeration is not None else enumerate_noise([scm, *refine], cap)
    keep, weights = [], []
    for k, a in enumerate(enum.assignments):
        if enum.probs[k] <= 0.0:
            continue
        x = _evaluate(scm, dict(zip(enum.noise_ids, a)))
        if _consistent(x, obs):
            keep.append(a)
            weights.append(enum.probs[k])
    if not keep:
        raise ContradictionError(f"no noise assignment is consistent with {obs!r}")
    w = np.asarray(weights)
    return ScenarioPosterior(enum.noise_ids, tuple(keep), w / w.sum())


def _normalize_query(query):
    if isinstance(query, str):
        return (query,)
    return tuple(query)


def counterfactual_query(scm, obs, intervention, query, *, cap=DEFAULT_CAP, enumeration=None):
    """Exact counterfactual distribution over ``query`` value tuples."""
    query = _normalize_query(query)
    target = apply_intervention(scm, intervention)
    post = infer_noise_posterior(scm, obs, cap=cap, refine=(target,), enumeration=enumeration)
    out = defaultdict(float)
    for a, w in zip(post.assignments, post.weights.tolist()):
        x = _evaluate(target, dict(zip(post.noise_ids, a)))
        out[tuple(x[q] for q in query)] += w
    return dict(out)


def counterfactual_sample(scm, obs, intervention, query, rng, *, cap=DEFAULT_CAP):
    """One draw of ``query`` from a single posterior noise sample."""
    query = _normalize_query(query)
    target = apply_intervention(scm, intervention)
    post = infer_noise_posterior(scm, obs, cap=cap, refine=(target,))
    u = dict(zip(post.noise_ids, post.assignments[post.sample_index(rng)]))
    x = _evaluate(target, u)
    return tuple(x[q] for q in query)


def mixed_sample(scm, obs, cf_subset, intervention, rng, *, cap=DEFAULT_CAP):
    """Noise in ``cf_subset`` from the posterior, the rest from the prior.

    A whole posterior particle is drawn and only its ``cf_subset``
    coordinates are kept, which preserves their posterior dependence.
    """
    cf_subset = set(cf_subset)
    unknown = cf_subset - set(scm.noise)
    if unknown:
        raise InputError(f"unknown noise variables in cf_subset: {sorted(unknown)}")
    target = apply_intervention(scm, intervention)
    post = infer_noise_posterior(scm, obs, cap=cap, refine=(target,))
    particle = dict(zip(post.noise_ids, post.assignments[post.sample_index(rng)]))
    u = {}
    for nid in sorted(scm.noise):
        u[nid] = particle[nid] if nid in cf_subset else scm.noise[nid].sample(rng)
    return _evaluate(target, u)


def interventional_marginal(scm, intervention, query, *, cap=DEFAULT_CAP):
    """Exact distribution of ``query`` under ``do(intervention)``."""
    query = _normalize_query(query)
    target = apply_intervention(scm, intervention)
    enum = enumerate_noise([target], cap)
    out = defaultdict(float)
    for a, p in zip(enum.assignments, enum.probs.tolist()):
        if p <= 0.0:
            continue
        x = _evaluate(target, dict(zip(enum.noise_ids, a)))
        out[tuple(x[q] for q in query)] += p
    return dict(out)


def expectation(dist, index=0):
    """Mean of component ``index`` of a distribution over value tuples."""
    return math.fsum(p * float(k[index]) for k, p in dist.items())


# --------------------------------------------------------------------------
# uniformization


def _row_cumulative(row):
    values = tuple(row)
    probs = np.array([float(row[v]) for v in values])
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise InputError("conditional row has negative or non-finite probabilities")
    total = math.fsum(probs)
    if abs(total - 1.0) > ROW_TOL:
        raise InputError(f"conditional row sums to {total!r}, not 1")
    return values, probs, np.cumsum(probs)


@dataclass(frozen=True)
class _InverseCdf:
    rows: Mapping        # parent tuple -> (values, cumulative)
    default: Optional[tuple] = None

    def __call__(self, parent_values, u):
        entry = self.rows.get(tuple(parent_values), self.default)
        if entry is None:
            raise InputError(f"no conditional row for parents {tuple(parent_values)!r}")
        values, cum, last = entry
        k = int(np.searchsorted(cum, u, side="right"))
        return values[k] if k < len(values) else values[last]


def _inverse_cdf_entry(row):
    values, probs, cum = _row_cumulative(row)
    last = int(np.flatnonzero(probs > 0)[-1])
    return values, cum, last


def uniformize(conditional, *, node="X", parents=(), noise=None, default_row=None):
    """Inverse-CDF mechanism for ``P(node | parents)`` on ``Uniform[0, 1)`` noise.

    ``conditional`` maps parent-value tuples to rows ``{value: prob}``;
    values are laid out on the unit interval in the row's own order.
    ``default_row`` (optional) serves parent tuples not listed.
    """
    noise = noise or f"U_{node}"
    rows = {tuple(k): _inverse_cdf_entry(r) for k, r in conditional.items()}
    default = _inverse_cdf_entry(default_row) if default_row is not None else None
    cuts = set()
    for _, cum, _ in list(rows.values()) + ([default] if default else []):
        cuts.update(float(c) for c in cum[:-1] if 0.0 < c < 1.0)
    fn = _InverseCdf(MappingProxyType(rows), default)
    return Mechanism(node, tuple(parents), noise, fn=fn, breakpoints=tuple(sorted(cuts)))


def quantize(mechanism, parent_domains):
    """Finite-noise equivalent of a uniform-noise mechanism.

    Returns ``(NoiseSpec, Mechanism)`` whose noise support is the cell index
    set of the mechanism's breakpoints, with cell lengths as probabilities.
    """
    edges = [0.0, *mechanism.breakpoints, 1.0]
    lo = np.array(edges[:-1])
    hi = np.array(edges[1:])
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    support = tuple(range(len(lo)))
    spec = NoiseSpec(mechanism.noise, support, tuple((hi - lo).tolist()))
    table = {}
    for combo in itertools.product(*parent_domains):
        for k in support:
            table[(*combo, k)] = mechanism(combo, float((lo[k] + hi[k]) / 2.0))
    return spec, Mechanism.from_table(mechanism.node, mechanism.parents, mechanism.noise, table)


def induced_conditional(mechanism, parent_domains):
    """Distribution of the mechanism's output for each parent tuple under uniform noise."""
    edges = np.array([0.0, *mechanism.breakpoints, 1.0])
    out = {}
    for combo in itertools.product(*parent_domains):
        row = defaultdict(float)
        for lo, hi in zip(edges[:-1], edges[1:]):
            if hi > lo:
                row[mechanism(combo, (lo + hi) / 2.0)] += hi - lo
        out[combo] = dict(row)
    return out


def observational_groups(scm, observed, *, cap=DEFAULT_CAP, refine=()):
    """Group the joint noise space by the value of the ``observed`` nodes.

    Returns ``(enumeration, groups)`` with ``groups`` mapping each observed
    value tuple to ``(p(x_o), index array of consistent assignments)``.
    """
    observed = _normalize_query(observed)
    enum = enumerate_noise([scm, *refine], cap)
    groups = defaultdict(list)
    for k, a in enumerate(enum.assignments):
        if enum.probs[k] <= 0.0:
            continue
        x = _evaluate(scm, dict(zip(enum.noise_ids, a)))
        groups[tuple(x[n] for n in observed)].append(k)
    out = {}
    for key, idx in groups.items():
        idx = np.asarray(idx)
        out[key] = (math.fsum(enum.probs[idx].tolist()), idx)
    return enum, out


def mixed_query(scm, obs, cf_subset, intervention, query, *, cap=DEFAULT_CAP):
    """Exact law of :func:`mixed_sample` projected onto ``query``."""
    query = _normalize_query(query)
    target = apply_intervention(scm, intervention)
    enum = enumerate_noise([scm, target], cap)
    post = infer_noise_posterior(scm, obs, cap=cap, enumeration=enum)
    cf = sorted(cf_subset)
    cf_idx = [enum.noise_ids.index(n) for n in cf]
    rest_idx = [i for i, n in enumerate(enum.noise_ids) if n not in cf_subset]
    post_cf = post.marginal(cf)
    out = defaultdict(float)
    for a in enum.assignments:
        p_cf = post_cf.get(tuple(a[i] for i in cf_idx), 0.0)
        if p_cf == 0.0:
            continue
        p_rest = 1.0
        for i in rest_idx:
            nid = enum.noise_ids[i]
            p_rest *= float(enum.cell_probs[nid][enum.values[nid].index(a[i])])
        if p_rest == 0.0:
            continue
        x = _evaluate(target, dict(zip(enum.noise_ids, a)))
        out[tuple(x[q] for q in query)] += p_cf * p_rest
    return dict(out)
