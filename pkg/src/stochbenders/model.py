"""Instances, scenarios, synthetic generation and the on-disk formats.

External indices (nodes, edges, commodities, scenarios) are 1-based in files,
error messages and design files; arrays in memory are 0-based.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.spatial import cKDTree

BALANCE_TOL = 1e-9


class InstanceFormatError(ValueError):
    """Malformed instance or scenario file."""


class InstanceValidationError(ValueError):
    """An instance violates one of its invariants."""

    def __init__(self, diagnostics: Sequence[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Network:
    """Directed graph on nodes 1..n_nodes.

    Column e of the incidence matrix has +1 at the tail and -1 at the head of
    edge e, so ``A @ x == d`` reads "net outflow equals supply".
    """

    n_nodes: int
    edges: tuple[tuple[int, int], ...]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def tail(self) -> np.ndarray:
        return np.array([i - 1 for i, _ in self.edges], dtype=np.int64)

    @cached_property
    def head(self) -> np.ndarray:
        return np.array([j - 1 for _, j in self.edges], dtype=np.int64)

    @cached_property
    def incidence(self) -> sp.csc_matrix:
        m = self.n_edges
        cols = np.concatenate([np.arange(m), np.arange(m)])
        rows = np.concatenate([self.tail, self.head])
        vals = np.concatenate([np.ones(m), -np.ones(m)])
        return sp.csc_matrix((vals, (rows, cols)), shape=(self.n_nodes, m))

    def edge_index(self) -> dict[tuple[int, int], int]:
        return {e: i for i, e in enumerate(self.edges)}

    def __eq__(self, other):
        return (isinstance(other, Network) and self.n_nodes == other.n_nodes
                and self.edges == other.edges)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """Demand tensor indexed ``[scenario, commodity, node]``."""

    demands: np.ndarray

    def __post_init__(self):
        d = np.array(self.demands, dtype=float)
        if d.ndim != 3:
            raise ValueError("demands must be a (scenario, commodity, node) array")
        d.setflags(write=False)
        object.__setattr__(self, "demands", d)

    @property
    def n_scenarios(self) -> int:
        return self.demands.shape[0]

    @property
    def n_commodities(self) -> int:
        return self.demands.shape[1]

    def __eq__(self, other):
        return isinstance(other, ScenarioSet) and np.array_equal(self.demands, other.demands)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Instance:
    network: Network
    fixed_cost: np.ndarray          # (E,)
    flow_cost: np.ndarray           # (E, K)
    capacity: np.ndarray            # (E,), np.inf allowed
    gamma: float                    # np.inf allowed
    cardinality: int
    fixed_open: tuple[int, ...]     # 0-based edge indices, sorted
    scenarios: ScenarioSet
    name: str = ""
    coordinates: np.ndarray | None = field(default=None)

    def __post_init__(self):
        for attr in ("fixed_cost", "flow_cost", "capacity"):
            a = np.array(getattr(self, attr), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, attr, a)
        if self.coordinates is not None:
            c = np.array(self.coordinates, dtype=float)
            c.setflags(write=False)
            object.__setattr__(self, "coordinates", c)
        object.__setattr__(self, "fixed_open", tuple(sorted(int(e) for e in self.fixed_open)))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "cardinality", int(self.cardinality))
        m = self.network.n_edges
        if self.fixed_cost.shape != (m,) or self.capacity.shape != (m,):
            raise ValueError("per-edge arrays must have one entry per edge")
        if self.flow_cost.shape != (m, self.scenarios.n_commodities):
            raise ValueError("flow_cost must be (edges, commodities)")
        if self.scenarios.demands.shape[2] != self.network.n_nodes:
            raise ValueError("demands must have one entry per node")

    # convenience views
    @property
    def n_nodes(self) -> int:
        return self.network.n_nodes

    @property
    def n_edges(self) -> int:
        return self.network.n_edges

    @property
    def n_commodities(self) -> int:
        return self.scenarios.n_commodities

    @property
    def n_scenarios(self) -> int:
        return self.scenarios.n_scenarios

    @property
    def demands(self) -> np.ndarray:
        return self.scenarios.demands

    @cached_property
    def fixed_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_edges, dtype=bool)
        mask[list(self.fixed_open)] = True
        return mask

    @cached_property
    def supply_bound(self) -> float:
        """Largest total supply over scenarios; no acyclic flow exceeds it on any edge."""
        pos = np.clip(self.demands, 0.0, None).sum(axis=(1, 2))
        return float(pos.max()) if pos.size else 0.0

    @cached_property
    def capacity_bound(self) -> np.ndarray:
        """Capacity with +inf replaced by the supply bound.

        Some optimal routing is acyclic, and an acyclic routing never puts more
        than the total supply on an edge, so the replacement leaves f(z; d)
        and the feasible designs unchanged.
        """
        u = np.where(np.isinf(self.capacity), max(self.supply_bound, 1.0), self.capacity)
        u.setflags(write=False)
        return u

    @cached_property
    def effective_capacity(self) -> np.ndarray:
        """Capacity with +inf replaced by the supply bound when that is needed.

        Only an infinite gamma needs the replacement: without the quadratic
        term an uncapacitated edge would otherwise have no finite dual.
        """
        if math.isinf(self.gamma):
            return self.capacity_bound
        return self.capacity

    def design(self, open_edges: Iterable[int] = ()) -> np.ndarray:
        """0/1 design with ``open_edges`` (0-based) and every fixed edge open."""
        z = self.fixed_mask.astype(float)
        for e in open_edges:
            z[int(e)] = 1.0
        return z

    def all_open(self) -> np.ndarray:
        return np.ones(self.n_edges)

    def with_gamma(self, gamma: float) -> "Instance":
        return Instance(self.network, self.fixed_cost, self.flow_cost, self.capacity,
                        gamma, self.cardinality, self.fixed_open, self.scenarios,
                        self.name, self.coordinates)

    def with_scenarios(self, demands: np.ndarray) -> "Instance":
        return Instance(self.network, self.fixed_cost, self.flow_cost, self.capacity,
                        self.gamma, self.cardinality, self.fixed_open,
                        ScenarioSet(demands), self.name, self.coordinates)

    def with_budget(self, cardinality: int, fixed_open: Iterable[int] | None = None) -> "Instance":
        fo = self.fixed_open if fixed_open is None else tuple(fixed_open)
        return Instance(self.network, self.fixed_cost, self.flow_cost, self.capacity,
                        self.gamma, cardinality, fo, self.scenarios, self.name,
                        self.coordinates)

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.network == other.network
                and np.array_equal(self.fixed_cost, other.fixed_cost)
                and np.array_equal(self.flow_cost, other.flow_cost)
                and np.array_equal(self.capacity, other.capacity)
                and self.gamma == other.gamma
                and self.cardinality == other.cardinality
                and self.fixed_open == other.fixed_open
                and self.scenarios == other.scenarios)

    __hash__ = None


def make_instance(n_nodes: int, edges: Sequence[Sequence[int]], *, fixed_cost, flow_cost,
                  capacity, demands, gamma: float = 1.0, cardinality: int | None = None,
                  fixed_open: Iterable[Sequence[int]] = (), name: str = "",
                  coordinates=None) -> Instance:
    """Build an instance with edges in canonical (lexicographic) order.

    ``fixed_open`` lists edges as ``(i, j)`` pairs. Per-edge arrays follow the
    order of ``edges`` as given and are permuted along with them.
    """
    pairs = [(int(i), int(j)) for i, j in edges]
    if len(set(pairs)) != len(pairs):
        dup = next(p for p in pairs if pairs.count(p) > 1)
        raise InstanceFormatError(f"duplicate edge {dup}")
    order = sorted(range(len(pairs)), key=lambda e: pairs[e])
    sorted_pairs = tuple(pairs[e] for e in order)
    flow = np.asarray(flow_cost, dtype=float)
    if flow.ndim == 1:
        flow = flow[:, None]
    index = {p: e for e, p in enumerate(sorted_pairs)}
    fo = []
    for p in fixed_open:
        key = (int(p[0]), int(p[1]))
        if key not in index:
            raise InstanceFormatError(f"fixed_open edge {key} is not an edge")
        fo.append(index[key])
    d = np.asarray(demands, dtype=float)
    if d.ndim == 1:
        d = d[None, None, :]
    elif d.ndim == 2:
        d = d[None, :, :]
    return Instance(
        network=Network(int(n_nodes), sorted_pairs),
        fixed_cost=np.asarray(fixed_cost, dtype=float)[order],
        flow_cost=flow[order],
        capacity=np.asarray(capacity, dtype=float)[order],
        gamma=gamma,
        cardinality=len(pairs) if cardinality is None else cardinality,
        fixed_open=fo,
        scenarios=ScenarioSet(d),
        name=name,
        coordinates=coordinates,
    )


def validate_instance(inst: Instance) -> list[str]:
    """Every violated invariant, one message each. Empty means valid."""
    out: list[str] = []
    net = inst.network
    seen = set()
    for e, (i, j) in enumerate(net.edges):
        if i == j:
            out.append(f"self-loop at edge {e + 1} ({i},{j})")
        if not (1 <= i <= net.n_nodes and 1 <= j <= net.n_nodes):
            out.append(f"node index out of range at edge {e + 1} ({i},{j})")
        if (i, j) in seen:
            out.append(f"duplicate edge ({i},{j})")
        seen.add((i, j))
    if list(net.edges) != sorted(net.edges):
        out.append("edge list not in canonical order")
    if not np.all(np.isfinite(inst.fixed_cost)) or np.any(inst.fixed_cost < 0):
        out.append("fixed_cost must be finite and nonnegative")
    if not np.all(np.isfinite(inst.flow_cost)) or np.any(inst.flow_cost < 0):
        out.append("flow_cost must be finite and nonnegative")
    if np.any(np.isnan(inst.capacity)) or np.any(inst.capacity <= 0):
        out.append("capacity must be positive (or inf)")
    if not (inst.gamma > 0):
        out.append("gamma must be positive or infinite")
    if inst.cardinality < 0:
        out.append("cardinality must be nonnegative")
    if len(inst.fixed_open) > inst.cardinality:
        out.append(f"cardinality below fixed_open ({inst.cardinality} < {len(inst.fixed_open)})")
    if any(e < 0 or e >= net.n_edges for e in inst.fixed_open):
        out.append("fixed_open references a missing edge")
    d = inst.demands
    if not np.all(np.isfinite(d)):
        out.append("demands must be finite")
    else:
        sums = d.sum(axis=2)
        for r, k in zip(*np.nonzero(np.abs(sums) > BALANCE_TOL * (1 + np.abs(d).sum(axis=2)))):
            out.append(f"unbalanced demand, commodity {k + 1}, scenario {r + 1}")
    if inst.n_scenarios < 1:
        out.append("at least one scenario required")
    return out


def check_design(inst: Instance, z) -> list[str]:
    z = np.asarray(z, dtype=float)
    out = []
    if z.shape != (inst.n_edges,):
        return [f"design has {z.size} entries, expected {inst.n_edges}"]
    if np.any((z != 0) & (z != 1)):
        out.append("design must be binary")
    if z.sum() > inst.cardinality:
        out.append(f"design opens {int(z.sum())} edges, cardinality is {inst.cardinality}")
    closed_fixed = [e + 1 for e in inst.fixed_open if z[e] != 1]
    if closed_fixed:
        out.append(f"fixed_open edges closed: {closed_fixed}")
    return out


# ---------------------------------------------------------------------------
# file formats

def _num_out(x: float):
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if x.is_integer() and abs(x) < 2**53:
        return int(x)
    return x


def _num_in(v, where: str) -> float:
    if isinstance(v, bool):
        raise InstanceFormatError(f"{where}: expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    raise InstanceFormatError(f"{where}: expected a number or \"inf\", got {v!r}")


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def instance_to_dict(inst: Instance, scenario_file: str | None = None) -> dict:
    doc = {
        "name": inst.name,
        "nodes": inst.n_nodes,
        "edges": [list(e) for e in inst.network.edges],
        "fixed_cost": [_num_out(v) for v in inst.fixed_cost],
        "capacity": [_num_out(v) for v in inst.capacity],
        "gamma": _num_out(inst.gamma),
        "cardinality": inst.cardinality,
        "fixed_open": [list(inst.network.edges[e]) for e in inst.fixed_open],
        "flow_cost": [[_num_out(v) for v in row] for row in inst.flow_cost],
        "commodities": inst.n_commodities,
        "scenarios": inst.n_scenarios,
    }
    if inst.coordinates is not None:
        doc["coordinates"] = [[_num_out(v) for v in xy] for xy in inst.coordinates]
    if scenario_file is None:
        doc["demands"] = [[[_num_out(v) for v in node_row] for node_row in comm]
                          for comm in inst.demands]
    else:
        doc["scenario_file"] = scenario_file
    return doc


def write_instance(inst: Instance, path: str | os.PathLike,
                   scenario_file: str | os.PathLike | None = None) -> None:
    """Write ``inst`` as JSON; demands go to a sidecar CSV when ``scenario_file`` is set."""
    path = Path(path)
    ref = None
    if scenario_file is not None:
        scen_path = Path(scenario_file)
        if not scen_path.is_absolute():
            scen_path = path.parent / scen_path
        write_scenario_csv(inst.demands, scen_path)
        ref = os.path.relpath(scen_path, path.parent)
    text = json.dumps(instance_to_dict(inst, ref), indent=1) + "\n"
    atomic_write_text(path, text)


def write_scenario_csv(demands: np.ndarray, path: str | os.PathLike) -> None:
    lines = ["scenario,commodity,node,demand"]
    for r, k, n in zip(*np.nonzero(demands)):
        lines.append(f"{r + 1},{k + 1},{n + 1},{_num_out(demands[r, k, n])!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_scenario_csv(path, n_scenarios: int, n_commodities: int, n_nodes: int) -> np.ndarray:
    d = np.zeros((n_scenarios, n_commodities, n_nodes))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["scenario", "commodity", "node", "demand"]:
            raise InstanceFormatError(f"{path}:1: expected header scenario,commodity,node,demand")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise InstanceFormatError(f"{path}:{lineno}: expected 4 fields")
            try:
                r, k, n = (int(v) for v in row[:3])
                val = float(row[3])
            except ValueError as exc:
                raise InstanceFormatError(f"{path}:{lineno}: {exc}") from None
            if not (1 <= r <= n_scenarios and 1 <= k <= n_commodities and 1 <= n <= n_nodes):
                raise InstanceFormatError(f"{path}:{lineno}: index out of range")
            d[r - 1, k - 1, n - 1] = val
    return d


def _field(doc: dict, key: str):
    if key not in doc:
        raise InstanceFormatError(f"missing field '{key}'")
    return doc[key]


def instance_from_dict(doc: dict, base_dir: str | os.PathLike = ".") -> Instance:
    nodes = _field(doc, "nodes")
    n_nodes = len(nodes) if isinstance(nodes, list) else int(nodes)
    edges_raw = _field(doc, "edges")
    edges = []
    for e, pair in enumerate(edges_raw):
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(v, int) for v in pair)):
            raise InstanceFormatError(f"field 'edges'[{e}]: expected [i, j] integers")
        edges.append(tuple(pair))
    m = len(edges)

    def per_edge(key):
        vals = _field(doc, key)
        if not isinstance(vals, list) or len(vals) != m:
            raise InstanceFormatError(f"field '{key}': expected {m} entries")
        return [_num_in(v, f"field '{key}'[{e}]") for e, v in enumerate(vals)]

    fixed_cost = per_edge("fixed_cost")
    capacity = per_edge("capacity")
    flow_raw = _field(doc, "flow_cost")
    if not isinstance(flow_raw, list) or len(flow_raw) != m:
        raise InstanceFormatError(f"field 'flow_cost': expected {m} rows")
    flow = []
    for e, row in enumerate(flow_raw):
        if not isinstance(row, list):
            row = [row]
        flow.append([_num_in(v, f"field 'flow_cost'[{e}]") for v in row])
    widths = {len(r) for r in flow}
    if len(widths) > 1:
        raise InstanceFormatError("field 'flow_cost': rows differ in length")
    n_comm = int(doc.get("commodities", widths.pop() if widths else 1))
    gamma = _num_in(_field(doc, "gamma"), "field 'gamma'")
    card_raw = _field(doc, "cardinality")
    if not isinstance(card_raw, int) or isinstance(card_raw, bool):
        raise InstanceFormatError("field 'cardinality': expected an integer")
    fixed_open = []
    for e, pair in enumerate(doc.get("fixed_open", [])):
        if not (isinstance(pair, list) and len(pair) == 2):
            raise InstanceFormatError(f"field 'fixed_open'[{e}]: expected [i, j]")
        fixed_open.append(tuple(pair))
    if "demands" in doc:
        try:
            demands = np.array(doc["demands"], dtype=float)
        except (TypeError, ValueError) as exc:
            raise InstanceFormatError(f"field 'demands': {exc}") from None
        if demands.ndim != 3 or demands.shape[1:] != (n_comm, n_nodes):
            raise InstanceFormatError(
                f"field 'demands': expected [scenario][commodity][node] with {n_comm} commodities "
                f"and {n_nodes} nodes")
    elif "scenario_file" in doc:
        n_scen = int(_field(doc, "scenarios"))
        demands = read_scenario_csv(Path(base_dir) / doc["scenario_file"], n_scen, n_comm, n_nodes)
    else:
        raise InstanceFormatError("missing field 'demands' (or 'scenario_file')")
    coords = doc.get("coordinates")
    try:
        inst = make_instance(
            n_nodes, edges, fixed_cost=fixed_cost, flow_cost=flow, capacity=capacity,
            demands=demands, gamma=gamma, cardinality=card_raw, fixed_open=fixed_open,
            name=str(doc.get("name", "")),
            coordinates=None if coords is None else np.array(coords, dtype=float))
    except InstanceFormatError:
        raise
    except ValueError as exc:
        raise InstanceFormatError(str(exc)) from None
    return inst


def read_instance(path: str | os.PathLike, validate: bool = True) -> Instance:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise InstanceFormatError(f"{path}: top level must be an object")
    inst = instance_from_dict(doc, base_dir=path.parent)
    if validate:
        diags = validate_instance(inst)
        if diags:
            raise InstanceValidationError(diags)
    return inst


def read_design(path: str | os.PathLike, inst: Instance) -> np.ndarray:
    """Design file: JSON array of 1-based open edge indices (fixed edges implied)."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list) or not all(isinstance(v, int) for v in raw):
        raise InstanceFormatError(f"{path}: expected a JSON array of edge indices")
    bad = [v for v in raw if not 1 <= v <= inst.n_edges]
    if bad:
        raise InstanceFormatError(f"{path}: edge indices out of range: {bad}")
    return inst.design(v - 1 for v in raw)


def write_design(z, path: str | os.PathLike) -> None:
    idx = [int(e) + 1 for e in np.flatnonzero(np.asarray(z) > 0.5)]
    atomic_write_text(path, json.dumps(idx) + "\n")


# ---------------------------------------------------------------------------
# synthetic generation

@dataclass(frozen=True)
class GenConfig:
    n_nodes: int
    n_commodities: int
    n_scenarios: int
    knn: int = 6
    seed: int = 0
    gamma: float = 1.0
    cardinality: int | None = None     # default 2 |E0|
    charge_existing: bool = False      # pre-existing edges keep their construction cost
    capacity_margin: float = 1.1

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError("n_nodes must be at least 2")
        if self.knn < 1:
            raise ValueError("knn must be at least 1")
        if self.n_commodities < 1 or self.n_scenarios < 1:
            raise ValueError("n_commodities and n_scenarios must be positive")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and an optional stream index path."""
    seq = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(seq))


def _knn_edges(xy: np.ndarray, k: int) -> list[tuple[int, int]]:
    n = len(xy)
    kk = min(k, n - 1)
    _, nbr = cKDTree(xy).query(xy, k=kk + 1)
    pairs = set()
    for i in range(n):
        for j in np.atleast_1d(nbr[i])[1:]:
            a, b = sorted((i, int(j)))
            pairs.add((a, b))
    return sorted(pairs)


def _min_capacity_scale(inst: Instance, edge_ids: np.ndarray, r: int) -> float:
    """Smallest uniform multiplier of capacity that lets scenario r route on ``edge_ids``."""
    net = inst.network
    K = inst.n_commodities
    m = len(edge_ids)
    A = net.incidence[:, edge_ids]
    # variables: x (edge-major, commodity-minor), then theta
    n_var = m * K + 1
    rows_eq = []
    b_eq = []
    for k in range(K):
        blk = sp.kron(A, sp.csr_matrix(np.eye(K)[k:k + 1]), format="csr")
        rows_eq.append(sp.hstack([blk, sp.csr_matrix((net.n_nodes, 1))]))
        b_eq.append(inst.demands[r, k])
    A_eq = sp.vstack(rows_eq).tocsr()
    S = sp.kron(sp.eye(m), np.ones((1, K)))
    A_ub = sp.hstack([S, -sp.csr_matrix(inst.capacity[edge_ids][:, None])]).tocsr()
    c = np.zeros(n_var)
    c[-1] = 1.0
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(m), A_eq=A_eq, b_eq=np.concatenate(b_eq),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise GenerationError(f"pre-existing network cannot route scenario {r + 1}: {res.message}")
    return float(res.x[-1])


def generate_synthetic_instance(config: GenConfig) -> Instance:
    """Random geometric instance with a connected pre-existing network.

    Nodes are uniform on the unit square. Undirected edges of the k-NN graph
    are drawn in random order until they connect all nodes; both directions
    of those edges form the pre-existing (fixed open) network E0 and every
    other k-NN edge, in both directions, is a candidate. Capacities are
    scaled up uniformly if E0 alone could not carry every scenario.
    """
    cfg = config
    rng = make_rng(cfg.seed)
    n = cfg.n_nodes
    xy = rng.uniform(0.0, 1.0, size=(n, 2))
    pool = _knn_edges(xy, cfg.knn)

    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    components = n
    existing = []
    for idx in rng.permutation(len(pool)):
        if components == 1:
            break
        a, b = pool[idx]
        existing.append((a, b))
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            components -= 1
    if components > 1:
        raise GenerationError(
            f"{cfg.knn}-NN graph on {n} nodes has {components} components; "
            "increase knn or change seed")

    und = pool
    directed = sorted({(a, b) for a, b in und} | {(b, a) for a, b in und})
    existing_dir = {(a, b) for a, b in existing} | {(b, a) for a, b in existing}
    m = len(directed)
    m0 = len(existing_dir)

    fixed_cost = rng.uniform(1.0, 4.0, size=m)
    if not cfg.charge_existing:
        fixed_cost = np.where([e in existing_dir for e in directed], 0.0, fixed_cost)
    length = np.array([np.linalg.norm(xy[a] - xy[b]) for a, b in directed])
    flow_cost = np.repeat(10.0 * length[:, None], cfg.n_commodities, axis=1)

    K, R = cfg.n_commodities, cfg.n_scenarios
    sinks = rng.integers(0, n, size=K)
    demands = np.zeros((R, K, n))
    for r in range(R):
        for k in range(K):
            row = rng.integers(5, 21, size=n).astype(float)
            row[sinks[k]] = 0.0
            row[sinks[k]] = -row.sum()
            demands[r, k] = row
    peak = np.clip(demands, 0, None).sum(axis=2).max(axis=0)   # per commodity, over scenarios
    budget_volume = float(peak.sum())
    capacity = rng.uniform(1.0, 4.0, size=m) * budget_volume / m0

    edges_1b = [(a + 1, b + 1) for a, b in directed]
    fixed_1b = sorted((a + 1, b + 1) for a, b in existing_dir)
    card = 2 * m0 if cfg.cardinality is None else cfg.cardinality
    inst = make_instance(
        n, edges_1b, fixed_cost=fixed_cost, flow_cost=flow_cost, capacity=capacity,
        demands=demands, gamma=cfg.gamma, cardinality=card, fixed_open=fixed_1b,
        name=f"syn-n{n}-k{K}-r{R}-s{cfg.seed}", coordinates=xy)

    fixed_ids = np.array(inst.fixed_open, dtype=np.int64)
    scale = max(_min_capacity_scale(inst, fixed_ids, r) for r in range(R))
    if scale * cfg.capacity_margin > 1.0:
        inst = make_instance(
            n, inst.network.edges, fixed_cost=inst.fixed_cost, flow_cost=inst.flow_cost,
            capacity=inst.capacity * scale * cfg.capacity_margin, demands=demands,
            gamma=cfg.gamma, cardinality=card,
            fixed_open=[inst.network.edges[e] for e in inst.fixed_open],
            name=inst.name, coordinates=xy)
    return inst


def t1_instance() -> Instance:
    """Three-node reference instance used throughout the tests and docs."""
    return make_instance(
        3, [(1, 2), (2, 3), (1, 3)],
        fixed_cost=[1, 1, 10], flow_cost=[[1], [1], [3]], capacity=[10, 10, 10],
        demands=[[[5, 0, -5]]], gamma=1.0, cardinality=3, name="T1")
