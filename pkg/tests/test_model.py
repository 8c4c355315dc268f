import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from stochbenders.model import (GenConfig, GenerationError, InstanceFormatError,
                                InstanceValidationError, check_design, generate_synthetic_instance, instance_from_dict,
                                instance_to_dict, make_instance, make_rng, read_design,
                                read_instance, validate_instance, write_design, write_instance)

from conftest import t1_design


def _undirected_components(n, pairs):
    rows = [i - 1 for i, j in pairs]
    cols = [j - 1 for i, j in pairs]
    g = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return connected_components(g, directed=False)[0]


def test_t1_is_valid(t1):
    assert validate_instance(t1) == []
    assert t1.n_edges == 3 and t1.n_scenarios == 1 and t1.n_commodities == 1


def test_edges_are_canonical_and_arrays_follow(t1):
    assert t1.network.edges == ((1, 2), (1, 3), (2, 3))
    idx = t1.network.edge_index()
    assert t1.fixed_cost[idx[(1, 3)]] == 10
    assert t1.flow_cost[idx[(1, 3)], 0] == 3
    assert t1.fixed_cost[idx[(2, 3)]] == 1


def test_incidence_signs(t1):
    A = t1.network.incidence.toarray()
    e = t1.network.edge_index()[(1, 3)]
    assert A[0, e] == 1 and A[2, e] == -1 and A[1, e] == 0


def test_round_trip_t1(t1, tmp_path):
    path = tmp_path / "t1.json"
    write_instance(t1, path)
    assert read_instance(path) == t1


def test_round_trip_with_infinities_and_scenario_file(tmp_path):
    inst = make_instance(3, [(1, 2), (2, 3)], fixed_cost=[1, 2], flow_cost=[[1, 2], [3, 4]],
                         capacity=[math.inf, 4.5], gamma=math.inf,
                         demands=[[[1, 0, -1], [0, 2, -2]], [[3, 0, -3], [0, 0, 0]]],
                         fixed_open=[(2, 3)], cardinality=2)
    path = tmp_path / "a.json"
    write_instance(inst, path, scenario_file="a-scen.csv")
    doc = json.loads(path.read_text())
    assert "demands" not in doc and doc["capacity"][0] == "inf" and doc["gamma"] == "inf"
    back = read_instance(path)
    assert back == inst
    assert back.fixed_open == inst.fixed_open


def test_unbalanced_demand_is_reported(t1, tmp_path):
    doc = instance_to_dict(t1)
    doc["demands"] = [[[5, 0, -4]]]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(InstanceValidationError) as err:
        read_instance(path)
    assert "unbalanced demand, commodity 1, scenario 1" in str(err.value)


def test_duplicate_edge_is_a_parse_error(t1, tmp_path):
    doc = instance_to_dict(t1)
    doc["edges"][1] = [1, 2]
    path = tmp_path / "dup.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(InstanceFormatError, match="duplicate edge"):
        read_instance(path)


def test_parse_errors_name_the_field(t1, tmp_path):
    doc = instance_to_dict(t1)
    doc["capacity"] = [10, "lots", 10]
    with pytest.raises(InstanceFormatError, match="capacity"):
        instance_from_dict(doc)
    del doc["capacity"]
    with pytest.raises(InstanceFormatError, match="capacity"):
        instance_from_dict(doc)
    path = tmp_path / "broken.json"
    path.write_text('{"nodes": 3,\n "edges": [}')
    with pytest.raises(InstanceFormatError, match=":2:"):
        read_instance(path)


def test_cardinality_below_fixed_open(t1):
    inst = t1.with_budget(0, fixed_open=[0])
    assert any("cardinality below fixed_open" in d for d in validate_instance(inst))


def test_negative_gamma_diagnostic(t1):
    assert "gamma must be positive or infinite" in validate_instance(t1.with_gamma(-1.0))


def test_check_design(t1):
    assert check_design(t1, np.ones(3)) == []
    assert check_design(t1, np.array([0.5, 0, 0]))
    assert check_design(t1.with_budget(1), np.ones(3))


def test_design_file_round_trip(t1, tmp_path):
    z = t1_design(t1, e1=1, e3=1)
    write_design(z, tmp_path / "d.json")
    assert np.array_equal(read_design(tmp_path / "d.json", t1), z)
    (tmp_path / "bad.json").write_text("[4]")
    with pytest.raises(InstanceFormatError):
        read_design(tmp_path / "bad.json", t1)


def test_generator_is_byte_deterministic(tmp_path):
    cfg = GenConfig(10, 2, 3, knn=6, seed=7)
    write_instance(generate_synthetic_instance(cfg), tmp_path / "a.json")
    write_instance(generate_synthetic_instance(cfg), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    other = generate_synthetic_instance(GenConfig(10, 2, 3, knn=6, seed=8))
    assert other != generate_synthetic_instance(cfg)


def test_generated_instance_shape():
    inst = generate_synthetic_instance(GenConfig(12, 3, 4, seed=2))
    assert validate_instance(inst) == []
    assert inst.demands.shape == (4, 3, 12)
    # both directions of every candidate pair
    pairs = set(inst.network.edges)
    assert all((j, i) in pairs for i, j in pairs)
    # pre-existing edges are free and their network alone is connected
    assert np.all(inst.fixed_cost[list(inst.fixed_open)] == 0)
    fixed_pairs = [inst.network.edges[e] for e in inst.fixed_open]
    assert _undirected_components(inst.n_nodes, fixed_pairs) == 1
    assert inst.cardinality == 2 * len(inst.fixed_open)
    d = inst.demands
    assert np.all(d[d > 0] >= 5) and np.all(d[d > 0] <= 20)


def test_rng_streams_are_independent_and_reproducible():
    a = make_rng(3, 1, 2).random(4)
    assert np.array_equal(a, make_rng(3, 1, 2).random(4))
    assert not np.array_equal(a, make_rng(3, 1, 3).random(4))
    assert not np.array_equal(a, make_rng(4, 1, 2).random(4))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 14), K=st.integers(1, 3), R=st.integers(1, 4),
       knn=st.integers(2, 6), seed=st.integers(0, 10_000))
def test_generated_instances_balance_and_connect(n, K, R, knn, seed):
    try:
        inst = generate_synthetic_instance(GenConfig(n, K, R, knn=knn, seed=seed))
    except GenerationError:
        assume(False)   # sparse k-NN graph came out disconnected; refused by design
    assert np.allclose(inst.demands.sum(axis=2), 0.0)
    assert _undirected_components(n, inst.network.edges) == 1
    assert validate_instance(inst) == []
