import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochbenders.cuts import (Cut, CutKind, NO_TARGET, Target, feasibility_cut, multi_cut,
                               single_cut)
from stochbenders.master import Budget, Layout, Master, MasterInfeasible
from stochbenders.subproblem import solve_subproblem

from conftest import t1_design, t1_vector
from oracles import dense_simplex, enumerate_optimum, random_small_instance


def exact_callback(inst, log=None, single=False):
    """Exact optimality cuts (one aggregate cut if ``single``), or feasibility cuts."""
    def cb(z, eta):
        if log is not None:
            log.append(z.tobytes())
        cuts = []
        duals = {}
        for r in range(inst.n_scenarios):
            res = solve_subproblem(inst, z, r)
            if res.feasible:
                duals[r] = res.dual
            else:
                cuts.append(feasibility_cut(inst, res.farkas, inst.demands[r]))
        if single:
            return cuts or [single_cut(inst, duals)]
        return cuts + multi_cut(inst, duals)
    return cb


def _t1_single_cut(t1):
    return Cut(CutKind.OPTIMALITY, Target.scenario(0), 30.0, t1_vector(t1, (-2, -2, -4.5)))


def test_t1_lp_with_one_cut(t1):
    # e1 and e2 cost 1 and save 2 each; e3 costs 10 and saves only 4.5
    m = Master(t1, Layout.single(1))
    m.add_cuts([_t1_single_cut(t1)])
    node = m.solve_lp_relaxation()
    assert np.allclose(node.z, t1_design(t1, 1, 1, 0))
    assert node.bound == pytest.approx(28.0)
    assert node.is_integral()
    A, b = m._constraints()
    val, _ = dense_simplex(m.c, A.toarray(), b, np.zeros(4), np.array([1, 1, 1, np.inf]))
    assert val == pytest.approx(28.0, abs=1e-9)


def test_lp_without_cuts_opens_only_fixed_edges():
    inst = random_small_instance(3)
    m = Master(inst, Layout.single(inst.n_scenarios))
    node = m.solve_lp_relaxation()
    assert np.allclose(node.z, inst.fixed_mask)
    assert node.bound == pytest.approx(float(inst.fixed_cost @ inst.fixed_mask))


def test_feasibility_cut_with_branching_bound(t1):
    m = Master(t1, Layout.single(1))
    cut = Cut(CutKind.FEASIBILITY, NO_TARGET, 5.0, t1_vector(t1, (0, -10, -10)))
    m.add_cuts([cut])
    lo, hi = m.root_bounds()
    hi = hi.copy()
    hi[t1.network.edge_index()[(1, 2)]] = 0.0
    node = m.solve_lp_relaxation(lo, hi)
    idx = t1.network.edge_index()
    assert node.z[idx[(2, 3)]] + node.z[idx[(1, 3)]] >= 0.5 - 1e-9


def test_duplicate_cuts_are_ignored(t1):
    m = Master(t1, Layout.single(1))
    assert m.add_cuts([_t1_single_cut(t1), _t1_single_cut(t1)]) == 1
    assert m.add_cuts([_t1_single_cut(t1)], lazy=True) == 0


def test_promote_lazy(t1):
    m = Master(t1, Layout.single(1))
    m.add_cuts([_t1_single_cut(t1)], lazy=True)
    assert len(m.lazy) == 1 and not m.regular
    assert m.promote_lazy() == 1
    assert len(m.regular) == 1 and not m.lazy


def test_branch_and_cut_t1(t1):
    m = Master(t1, Layout.single(1))
    res = m.branch_and_cut(exact_callback(t1))
    assert np.array_equal(res.z, t1_design(t1, 1, 1, 1))
    assert res.value == pytest.approx(33.5, abs=1e-6)
    assert res.lower_bound == pytest.approx(33.5, abs=1e-6)
    assert not res.truncated


def test_accepting_callback_returns_fixed_design():
    inst = random_small_instance(9)
    m = Master(inst, Layout.single(inst.n_scenarios))
    res = m.branch_and_cut(lambda z, eta: [])
    assert np.array_equal(res.z, inst.fixed_mask.astype(float))
    assert res.value == pytest.approx(float(inst.fixed_cost @ inst.fixed_mask))


def test_one_node_budget_truncates(t1):
    m = Master(t1, Layout.single(1))
    res = m.branch_and_cut(exact_callback(t1), Budget(max_nodes=1))
    assert res.lower_bound <= 33.5 + 1e-9
    # every node that could be left open has a bound no larger than the optimum
    m2 = Master(t1, Layout.single(1))
    res0 = m2.branch_and_cut(exact_callback(t1), Budget(max_nodes=0))
    assert res0.truncated and res0.lower_bound <= 33.5


def test_cardinality_one(t1):
    inst = t1.with_budget(1)
    res = Master(inst, Layout.single(1)).branch_and_cut(exact_callback(inst))
    assert np.array_equal(res.z, t1_design(t1, e3=1))
    assert res.value == pytest.approx(37.5, abs=1e-6)


def test_fixed_edge_with_tight_budget(t1):
    e3 = t1.network.edge_index()[(1, 3)]
    inst = t1.with_budget(1, fixed_open=[e3])
    res = Master(inst, Layout.single(1)).branch_and_cut(exact_callback(inst))
    assert np.array_equal(res.z, t1_design(t1, e3=1))
    with pytest.raises(MasterInfeasible):
        Master(t1.with_budget(0, fixed_open=[e3]), Layout.single(1))


def test_inactive_budget_changes_nothing():
    inst = random_small_instance(11)
    free = inst.with_budget(inst.n_edges)
    big = inst.with_budget(10 * inst.n_edges)
    a = Master(free, Layout.per_scenario(inst.n_scenarios)).branch_and_cut(exact_callback(free))
    b = Master(big, Layout.per_scenario(inst.n_scenarios)).branch_and_cut(exact_callback(big))
    assert a.value == pytest.approx(b.value, rel=1e-9)


def test_callback_never_sees_a_design_twice():
    inst = random_small_instance(13)
    log = []
    Master(inst, Layout.single(inst.n_scenarios)).branch_and_cut(exact_callback(inst, log, True))
    assert len(log) == len(set(log))


@pytest.mark.parametrize("seed", range(10))
def test_exact_cuts_find_enumeration_optimum(seed):
    inst = random_small_instance(seed + 200, max_edges=9)
    best, _ = enumerate_optimum(inst)
    for layout in (Layout.single(inst.n_scenarios), Layout.per_scenario(inst.n_scenarios)):
        cb = exact_callback(inst, single=layout.name == "single")
        res = Master(inst, layout).branch_and_cut(cb)
        # bound sandwich: lower bound <= optimum <= incumbent
        assert res.lower_bound <= best + 1e-6 * max(1, best)
        assert res.value == pytest.approx(best, rel=1e-6, abs=1e-6)


def test_layout_blocks_for():
    lay = Layout.clusters(type("P", (), {"clusters": lambda self: [(0, 2), (1,), (3,)]})())
    assert lay.blocks_for((0, 1, 2)) == [0, 1]
    with pytest.raises(ValueError):
        lay.blocks_for((0, 1))


@settings(max_examples=40)
@given(seed=st.integers(0, 10_000), n_cuts=st.integers(0, 6), fix=st.integers(0, 3))
def test_node_lp_matches_dense_simplex(seed, n_cuts, fix):
    rng = np.random.default_rng(seed)
    inst = random_small_instance(seed % 500, max_edges=8)
    R = inst.n_scenarios
    layout = Layout.per_scenario(R) if rng.random() < 0.5 else Layout.single(R)
    m = Master(inst, layout)
    cuts = []
    for _ in range(n_cuts):
        if rng.random() < 0.3:
            slope = -rng.uniform(0, 3, inst.n_edges) * (rng.random(inst.n_edges) < 0.5)
            cuts.append(Cut(CutKind.FEASIBILITY, NO_TARGET, float(rng.uniform(0, 1)), slope))
        else:
            r = int(rng.integers(R))
            tgt = Target.scenario(r) if layout.name == "multi" else Target.single(R)
            cuts.append(Cut(CutKind.OPTIMALITY, tgt, float(rng.uniform(0, 50)),
                            -rng.uniform(0, 10, inst.n_edges)))
    m.add_cuts(cuts)
    lo, hi = m.root_bounds()
    for j in rng.choice(inst.n_edges, size=min(fix, inst.n_edges), replace=False):
        if lo[j] == 0:
            hi[j] = float(rng.integers(2))
    node = m.solve_lp_relaxation(lo, hi)
    A, b = m._constraints()
    B = layout.n_blocks
    val, x = dense_simplex(m.c, A.toarray(), b, np.concatenate([lo, np.zeros(B)]),
                           np.concatenate([hi, np.full(B, np.inf)]))
    if not node.feasible:
        assert math.isinf(val)
    else:
        assert node.bound == pytest.approx(val, abs=1e-8, rel=1e-8)
