import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfrl import scm as S
from cfrl.errors import CapacityError, ConstructionError, ContradictionError, InputError
from cfrl.verify import random_case, random_scm, two_coin


def chain(names=("A", "B", "C")):
    doms = {n: (0, 1) for n in names}
    noise = [S.NoiseSpec(f"U_{n}", (0, 1), (0.5, 0.5)) for n in names]
    mechs = [S.Mechanism.from_table(names[0], (), f"U_{names[0]}", {(0,): 0, (1,): 1})]
    for p, n in zip(names, names[1:]):
        mechs.append(S.Mechanism.from_table(n, (p,), f"U_{n}",
                                            {(a, u): a ^ u for a in (0, 1) for u in (0, 1)}))
    return S.Scm(doms, noise, mechs)


def brute_counterfactual(scm, obs, inter, query):
    """Oracle: loop over the product of noise supports directly."""
    target = S.apply_intervention(scm, inter)
    ids = sorted(scm.noise)
    num, z = {}, 0.0
    for vals in itertools.product(*(scm.noise[n].support for n in ids)):
        p = math.prod(scm.noise[n].probs[scm.noise[n].support.index(v)] for n, v in zip(ids, vals))
        u = dict(zip(ids, vals))
        x = S.evaluate(scm, u)
        if p == 0 or any(x[k] != v for k, v in obs.items()):
            continue
        y = S.evaluate(target, u)
        key = tuple(y[q] for q in query)
        num[key] = num.get(key, 0.0) + p
        z += p
    return {k: v / z for k, v in num.items()}


# --- construction and ordering


def test_topo_order_chain_and_fork():
    assert S.topo_order(chain()) == ["A", "B", "C"]
    doms = {n: (0, 1) for n in "CBA"}
    noise = [S.NoiseSpec.point(f"U_{n}") for n in "ABC"]
    mechs = [S.Mechanism.constant("A", 0, "U_A"),
             S.Mechanism.from_table("C", ("A",), "U_C", {(0, 0): 0, (1, 0): 1}),
             S.Mechanism.from_table("B", ("A",), "U_B", {(0, 0): 0, (1, 0): 1})]
    assert S.topo_order(S.Scm(doms, noise, mechs)) == ["A", "B", "C"]


def test_self_loop_is_a_cycle():
    with pytest.raises(ConstructionError, match="A -> A"):
        S.Scm({"A": (0, 1)}, [S.NoiseSpec.point("U")],
              [S.Mechanism.from_table("A", ("A",), "U", {(0, 0): 0, (1, 0): 1})])


def test_two_node_cycle_names_an_edge():
    mechs = [S.Mechanism.from_table("A", ("B",), "U_A", {(0, 0): 0, (1, 0): 1}),
             S.Mechanism.from_table("B", ("A",), "U_B", {(0, 0): 0, (1, 0): 1})]
    with pytest.raises(ConstructionError, match="cycle"):
        S.Scm({"A": (0, 1), "B": (0, 1)}, [S.NoiseSpec.point("U_A"), S.NoiseSpec.point("U_B")], mechs)


@pytest.mark.parametrize("support,probs", [((), ()), ((0, 0), (0.5, 0.5)), ((0, 1), (0.6, 0.6)),
                                           ((0, 1), (-0.1, 1.1))])
def test_noise_spec_rejects_bad_input(support, probs):
    with pytest.raises(ConstructionError):
        S.NoiseSpec("U", support, probs)


def test_incomplete_table_rejected():
    with pytest.raises(ConstructionError):
        S.Scm({"A": (0, 1)}, [S.NoiseSpec("U", (0, 1), (0.5, 0.5))],
              [S.Mechanism.from_table("A", (), "U", {(0,): 0})])


def test_noise_and_node_names_disjoint():
    with pytest.raises(ConstructionError):
        S.Scm({"A": (0,)}, [S.NoiseSpec.point("A")], [S.Mechanism.constant("A", 0, "A")])


# --- evaluation and sampling


def test_evaluate_two_coin():
    coin = two_coin()
    assert S.evaluate(coin, {"U_A": 0, "U_O": 1})["O"] == 1
    flipped = S.apply_intervention(coin, S.do(coin, {"A": "a2"}))
    assert S.evaluate(flipped, {"U_A": 0, "U_O": 1}) == {"A": "a2", "O": 0}
    assert S.evaluate(coin, {"U_A": 0, "U_O": 1}) == S.evaluate(coin, {"U_A": 0, "U_O": 1})


def test_evaluate_rejects_bad_noise():
    coin = two_coin()
    with pytest.raises(InputError):
        S.evaluate(coin, {"U_A": 0})
    with pytest.raises(InputError):
        S.evaluate(coin, {"U_A": 0, "U_O": 5})


def test_sample_prior_point_mass_and_frequency():
    spec = S.NoiseSpec("U", (3, 4), (1.0, 0.0))
    rng = np.random.default_rng(0)
    assert {spec.sample(rng) for _ in range(200)} == {3}
    coin = two_coin()
    n = 100_000
    ones = sum(S.sample_prior(coin, rng)[1]["O"] for _ in range(n))
    assert abs(ones / n - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_sample_prior_matches_marginal():
    scm = chain()
    exact = S.interventional_marginal(scm, S.Intervention(), ("C",))
    rng = np.random.default_rng(1)
    n = 20_000
    freq = sum(S.sample_prior(scm, rng)[1]["C"] for _ in range(n)) / n
    p = exact[(1,)]
    assert abs(freq - p) <= 3 * math.sqrt(p * (1 - p) / n)


# --- interventions


def test_apply_intervention_identity_and_value_semantics():
    coin = two_coin()
    assert S.apply_intervention(coin, S.Intervention()) is coin
    before = dict(coin.mechanisms)
    out = S.apply_intervention(coin, S.do(coin, {"A": "a2"}))
    assert dict(coin.mechanisms) == before
    assert out.noise == coin.noise
    for u in (0, 1):
        assert S.evaluate(out, {"U_A": 0, "U_O": u})["A"] == "a2"


def test_disjoint_interventions_commute():
    scm = chain()
    i1, i2 = S.do(scm, {"A": 1}), S.do(scm, {"C": 0})
    m12 = S.apply_intervention(S.apply_intervention(scm, i1), i2)
    m21 = S.apply_intervention(S.apply_intervention(scm, i2), i1)
    assert S.interventional_marginal(m12, S.Intervention(), ("A", "B", "C")) == \
        S.interventional_marginal(m21, S.Intervention(), ("A", "B", "C"))


def test_intervention_introducing_cycle_rejected():
    scm = chain()
    back = S.Mechanism.from_table("A", ("C",), "U_A", {(c, u): c for c in (0, 1) for u in (0, 1)})
    with pytest.raises(ConstructionError):
        S.apply_intervention(scm, S.Intervention({"A": back}))


# --- posterior and counterfactuals


def test_posterior_two_coin():
    post = S.infer_noise_posterior(two_coin(), {"A": "a1", "O": 1})
    assert post.marginal(["U_O"]) == {(1,): 1.0}
    prior = S.infer_noise_posterior(two_coin(), {})
    assert prior.marginal(["U_O"]) == {(0,): 0.5, (1,): 0.5}


def test_posterior_two_door_first_observation():
    from cfrl.envs import two_door, uniform_policy
    from cfrl.pomdp import compile as compile_pomdp
    env = two_door(0.8)
    door = compile_pomdp(env, uniform_policy(env))
    post = S.infer_noise_posterior(door, {"O1": "L"})
    m = post.marginal(["U_S1"])
    # Bayes by hand: P(L | O1=L) = 0.5*0.8 / (0.5*0.8 + 0.5*0.2)
    assert m[("L",)] == pytest.approx(0.8, abs=1e-12)
    assert m[("R",)] == pytest.approx(0.2, abs=1e-12)


def test_contradiction_and_capacity_errors():
    coin = two_coin()
    with pytest.raises(ContradictionError):
        S.infer_noise_posterior(coin, {"A": "a2"})
    with pytest.raises(CapacityError):
        S.infer_noise_posterior(coin, {}, cap=1)


def test_counterfactual_two_coin():
    coin = two_coin()
    obs = {"A": "a1", "O": 1}
    assert S.counterfactual_query(coin, obs, S.do(coin, {"A": "a2"}), "O") == {(0,): 1.0}
    assert S.counterfactual_query(coin, obs, S.Intervention(), "O") == {(1,): 1.0}


def test_counterfactual_sample_frequencies():
    scm = chain()
    obs = {"C": 1}
    inter = S.do(scm, {"B": 0})
    exact = S.counterfactual_query(scm, obs, inter, ("C",))
    rng = np.random.default_rng(2)
    n = 20_000
    freq = sum(S.counterfactual_sample(scm, obs, inter, ("C",), rng)[0] for _ in range(n)) / n
    p = exact.get((1,), 0.0)
    assert abs(freq - p) <= 3 * math.sqrt(max(p * (1 - p), 1e-12) / n) + 1e-12


def test_counterfactual_point_mass_sample():
    coin = two_coin()
    rng = np.random.default_rng(0)
    draws = {S.counterfactual_sample(coin, {"A": "a1", "O": 1}, S.do(coin, {"A": "a2"}), "O", rng)
             for _ in range(50)}
    assert draws == {(0,)}


def test_mixed_sample_edge_subsets():
    scm = chain()
    inter = S.do(scm, {"B": 1})
    obs = {"C": 0}
    none = S.mixed_query(scm, obs, set(), inter, ("A", "B", "C"))
    assert none == pytest.approx(S.interventional_marginal(scm, inter, ("A", "B", "C")))
    full = S.mixed_query(scm, obs, set(scm.noise), inter, ("A", "B", "C"))
    assert full == pytest.approx(S.counterfactual_query(scm, obs, inter, ("A", "B", "C")))
    with pytest.raises(InputError):
        S.mixed_sample(scm, obs, {"nope"}, inter, np.random.default_rng(0))


def test_mixed_sample_matches_its_exact_law():
    scm = chain()
    inter = S.do(scm, {"B": 1})
    obs = {"C": 0}
    law = S.mixed_query(scm, obs, {"U_A"}, inter, ("C",))
    rng = np.random.default_rng(3)
    n = 20_000
    freq = sum(S.mixed_sample(scm, obs, {"U_A"}, inter, rng)["C"] for _ in range(n)) / n
    p = law.get((1,), 0.0)
    assert abs(freq - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_interventional_marginal_two_coin():
    coin = two_coin()
    dist = S.interventional_marginal(coin, S.do(coin, {"A": "a1"}), "O")
    assert dist == {(0,): 0.5, (1,): 0.5}
    assert math.fsum(dist.values()) == pytest.approx(1.0, abs=1e-12)


# --- uniformization


def test_uniformize_threshold():
    mech = S.uniformize({(): {0: 0.3, 1: 0.7}})
    assert mech((), 0.0) == 0 and mech((), 0.2999) == 0
    assert mech((), 0.3) == 1 and mech((), 0.99) == 1
    assert mech.breakpoints == (0.3,)


def test_uniformize_point_mass():
    mech = S.uniformize({(): {2: 1.0}})
    assert mech.breakpoints == ()
    spec, table = S.quantize(mech, [])
    assert spec.support == (0,) and spec.probs == (1.0,)
    assert table((), 0) == 2


def test_uniformize_two_parent_table():
    cond = {(0, 0): {"x": 0.25, "y": 0.75}, (0, 1): {"x": 0.5, "y": 0.5},
            (1, 0): {"x": 1.0, "y": 0.0}, (1, 1): {"x": 0.1, "y": 0.9}}
    mech = S.uniformize(cond, parents=("P", "Q"))
    back = S.induced_conditional(mech, [(0, 1), (0, 1)])
    for k, row in cond.items():
        for v, p in row.items():
            assert abs(back[k].get(v, 0.0) - p) <= 1e-12


def test_uniformize_rejects_bad_row():
    with pytest.raises(InputError):
        S.uniformize({(): {0: 0.5, 1: 0.4}})


# --- properties


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_counterfactual_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    scm = random_scm(rng)
    inter, observed, query = random_case(rng, scm)
    _, x = S.sample_prior(scm, rng)
    obs = {n: x[n] for n in observed}
    got = S.counterfactual_query(scm, obs, inter, query)
    want = brute_counterfactual(scm, obs, inter, query)
    assert set(got) == set(want)
    for k in want:
        assert abs(got[k] - want[k]) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_posterior_is_normalized_and_distinct(seed):
    rng = np.random.default_rng(seed)
    scm = random_scm(rng)
    _, x = S.sample_prior(scm, rng)
    node = scm.nodes[int(rng.integers(len(scm.nodes)))]
    post = S.infer_noise_posterior(scm, {node: x[node]})
    assert abs(post.weights.sum() - 1.0) <= 1e-12
    assert np.all(post.weights > 0)
    assert len(set(post.assignments)) == len(post.assignments)
    assert all(len(a) == len(scm.noise) for a in post.assignments)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=5).filter(lambda v: sum(v) > 0))
def test_uniformize_reconstructs_row(weights):
    p = np.asarray(weights) / np.sum(weights)
    row = {i: float(q) for i, q in enumerate(p)}
    row[len(p) - 1] = 1.0 - math.fsum(p[:-1].tolist())
    if row[len(p) - 1] < 0:
        return
    mech = S.uniformize({(): row})
    back = S.induced_conditional(mech, [])[()]
    for v, q in row.items():
        assert abs(back.get(v, 0.0) - q) <= 1e-12
