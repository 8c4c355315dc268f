"""Master problem over designs and epigraph variables, solved by best-first branch-and-cut.

Variables are the edge indicators z followed by one epigraph variable per
block of scenarios. Block b carries the summed routing cost of its scenarios,
so the objective is <c, z> + (1/|R|) Σ_b eta_b. Cuts live in two pools: the
regular pool and the lazy pool filled by the integer-point callback. Both are
enforced at every node; the distinction only matters to the outer loop,
which promotes lazy cuts to regular ones between trees.
"""
from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .cuts import Cut, CutKind, ScenarioPartition
from .model import Instance

INT_TOL = 1e-6


class MasterInfeasible(RuntimeError):
    pass


class UnboundedMaster(RuntimeError):
    pass


@dataclass(frozen=True)
class Layout:
    """Partition of the scenarios into epigraph blocks."""

    name: str
    blocks: tuple[tuple[int, ...], ...]

    @staticmethod
    def single(n_scenarios: int) -> "Layout":
        return Layout("single", (tuple(range(n_scenarios)),))

    @staticmethod
    def per_scenario(n_scenarios: int) -> "Layout":
        return Layout("multi", tuple((r,) for r in range(n_scenarios)))

    @staticmethod
    def clusters(partition: ScenarioPartition) -> "Layout":
        return Layout("cluster", tuple(partition.clusters()))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def blocks_for(self, members: Sequence[int]) -> list[int]:
        """Blocks whose union is exactly ``members``."""
        want = set(members)
        chosen = [b for b, blk in enumerate(self.blocks) if want.issuperset(blk)]
        covered = set(itertools.chain.from_iterable(self.blocks[b] for b in chosen))
        if covered != want:
            raise ValueError(f"cut target is not a union of {self.name} epigraph blocks")
        return chosen


@dataclass
class NodeRelaxation:
    lower: np.ndarray
    upper: np.ndarray
    z: np.ndarray | None
    eta: np.ndarray | None
    bound: float
    feasible: bool

    def is_integral(self, tol: float = INT_TOL) -> bool:
        return self.z is not None and bool(np.all(np.abs(self.z - np.round(self.z)) <= tol))


@dataclass
class Budget:
    max_nodes: int | None = None
    deadline: float | None = None        # time.monotonic() value

    def exhausted(self, nodes: int) -> bool:
        if self.max_nodes is not None and nodes >= self.max_nodes:
            return True
        return self.deadline is not None and time.monotonic() >= self.deadline


@dataclass
class TreeStats:
    nodes: int = 0
    lp_solves: int = 0
    callbacks: int = 0
    lazy_added: int = 0
    max_depth: int = 0


@dataclass
class BranchResult:
    z: np.ndarray | None
    value: float                 # master objective of the incumbent
    lower_bound: float
    truncated: bool
    stats: TreeStats
    visited: list = field(default_factory=list)


Callback = Callable[[np.ndarray, np.ndarray], Sequence[Cut]]


class Master:
    def __init__(self, inst: Instance, layout: Layout, cut_tol: float = 1e-6):
        self.inst = inst
        self.layout = layout
        self.cut_tol = cut_tol
        self.regular: list[Cut] = []
        self.lazy: list[Cut] = []
        self._keys: set = set()
        self._rows: list[np.ndarray] = []
        self._rhs: list[float] = []
        self._matrix = None
        E, B = inst.n_edges, layout.n_blocks
        self.n_var = E + B
        self.c = np.concatenate([inst.fixed_cost, np.full(B, 1.0 / inst.n_scenarios)])
        if inst.cardinality < len(inst.fixed_open):
            raise MasterInfeasible("cardinality below the number of fixed-open edges")
        self._card_row = np.concatenate([np.ones(E), np.zeros(B)])

    # -- pools --------------------------------------------------------------
    @property
    def cuts(self) -> list[Cut]:
        return self.regular + self.lazy

    def _row(self, cut: Cut):
        row = np.zeros(self.n_var)
        row[:self.inst.n_edges] = cut.slope
        if cut.kind is CutKind.OPTIMALITY:
            for b in self.layout.blocks_for(cut.target.members):
                row[self.inst.n_edges + b] = -1.0
        return row, -cut.offset

    def add_cuts(self, cuts: Iterable[Cut], lazy: bool = False) -> int:
        added = 0
        for cut in cuts:
            key = cut.key()
            if key in self._keys:
                continue
            row, rhs = self._row(cut)
            self._keys.add(key)
            self._rows.append(row)
            self._rhs.append(rhs)
            (self.lazy if lazy else self.regular).append(cut)
            added += 1
        if added:
            self._matrix = None
        return added

    def promote_lazy(self) -> int:
        """Move every lazy cut to the regular pool and empty the lazy pool."""
        n = len(self.lazy)
        self.regular.extend(self.lazy)
        self.lazy = []
        return n

    def violation(self, cut: Cut, z: np.ndarray, eta: np.ndarray) -> float:
        row, rhs = self._row(cut)
        return float(row @ np.concatenate([z, eta]) - rhs)

    # -- LP -----------------------------------------------------------------
    def root_bounds(self):
        E = self.inst.n_edges
        lo = np.zeros(E)
        hi = np.ones(E)
        lo[list(self.inst.fixed_open)] = 1.0
        return lo, hi

    def _constraints(self):
        if self._matrix is None:
            rows = [self._card_row] + self._rows
            self._matrix = sp.csr_matrix(np.vstack(rows))
            self._b = np.array([float(self.inst.cardinality)] + self._rhs)
        return self._matrix, self._b

    def solve_lp_relaxation(self, lower=None, upper=None) -> NodeRelaxation:
        if lower is None:
            lower, upper = self.root_bounds()
        A, b = self._constraints()
        B = self.layout.n_blocks
        bounds = np.column_stack([np.concatenate([lower, np.zeros(B)]),
                                  np.concatenate([upper, np.full(B, np.inf)])])
        res = linprog(self.c, A_ub=A, b_ub=b, bounds=bounds, method="highs-ds")
        if res.status == 2:
            return NodeRelaxation(lower, upper, None, None, math.inf, False)
        if res.status == 3:
            raise UnboundedMaster("master LP unbounded; an epigraph variable lacks a lower bound")
        if res.status != 0:
            raise RuntimeError(f"master LP failed: {res.message}")
        E = self.inst.n_edges
        z = np.clip(res.x[:E], lower, upper)
        eta = np.maximum(res.x[E:], 0.0)
        return NodeRelaxation(lower, upper, z, eta, float(res.fun), True)

    # -- tree ---------------------------------------------------------------
    def branch_and_cut(self, callback: Callback, budget: Budget | None = None,
                       warm_starts: Sequence[np.ndarray] = ()) -> BranchResult:
        """Best-first branch-and-cut; ``callback(z, eta)`` returns cuts for an integer z.

        A point is accepted when none of the returned cuts is violated at the
        node solution by more than the relative cut tolerance. Integer points
        met again in the same tree are accepted without a callback.
        """
        budget = budget or Budget()
        stats = TreeStats()
        visited: dict[bytes, bool] = {}
        order: list[bytes] = []
        best_z, best_val = None, math.inf
        counter = itertools.count()
        lo0, hi0 = self.root_bounds()
        heap: list = []
        truncated = False

        def separate(node: NodeRelaxation):
            """Run the callback loop at an integral node; returns accepted (z, value) or None."""
            while True:
                if not node.feasible:
                    return None, node
                if not node.is_integral():
                    return None, node
                z = np.round(node.z)
                key = z.tobytes()
                if key in visited:
                    return (z, node.bound), node
                visited[key] = True
                order.append(z.copy())
                stats.callbacks += 1
                cuts = list(callback(z, node.eta))
                violated = False
                for cut in cuts:
                    row, rhs = self._row(cut)
                    lhs = float(row @ np.concatenate([z, node.eta]))
                    if lhs - rhs > self.cut_tol * (1.0 + abs(rhs)):
                        violated = True
                stats.lazy_added += self.add_cuts(cuts, lazy=True)
                if not violated:
                    return (z, node.bound), node
                # if the re-solve lands on the same z it is accepted as revisited
                node = self.solve_lp_relaxation(node.lower, node.upper)
                stats.lp_solves += 1

        for z0 in warm_starts:
            z0 = np.asarray(z0, dtype=float)
            if budget.exhausted(stats.nodes):
                break
            if z0.sum() > self.inst.cardinality or np.any(z0 < lo0):
                continue
            node = self.solve_lp_relaxation(z0.copy(), z0.copy())
            stats.lp_solves += 1
            acc, _ = separate(node)
            if acc is not None and acc[1] < best_val:
                best_z, best_val = acc

        heapq.heappush(heap, (-math.inf, next(counter), lo0, hi0, 0))
        while heap:
            bound, _, lo, hi, depth = heap[0]
            if bound >= best_val - self._prune_tol(best_val):
                heap.clear()
                break
            if budget.exhausted(stats.nodes):
                truncated = True
                break
            heapq.heappop(heap)
            stats.nodes += 1
            stats.max_depth = max(stats.max_depth, depth)
            node = self.solve_lp_relaxation(lo, hi)
            stats.lp_solves += 1
            if not node.feasible or node.bound >= best_val - self._prune_tol(best_val):
                continue
            acc, node = separate(node)
            if acc is not None:
                if acc[1] < best_val:
                    best_z, best_val = acc
                continue
            if not node.feasible or node.bound >= best_val - self._prune_tol(best_val):
                continue
            j = self._branch_var(node)
            for val in (1.0, 0.0) if node.z[j] >= 0.5 else (0.0, 1.0):
                lo_c, hi_c = lo.copy(), hi.copy()
                lo_c[j] = hi_c[j] = val
                if lo_c.sum() > self.inst.cardinality + 1e-9:
                    continue
                heapq.heappush(heap, (node.bound, next(counter), lo_c, hi_c, depth + 1))

        open_bounds = [b for b, *_ in heap]
        lb = min(open_bounds + [best_val]) if (open_bounds or best_val < math.inf) else math.inf
        if truncated and heap and not math.isfinite(lb):
            lb = -math.inf
        return BranchResult(best_z, best_val, lb, truncated, stats, order)

    @staticmethod
    def _prune_tol(val: float) -> float:
        return 1e-9 * max(1.0, abs(val)) if math.isfinite(val) else 0.0

    def _branch_var(self, node: NodeRelaxation) -> int:
        frac = np.abs(node.z - np.round(node.z))
        best = frac.max()
        cand = np.flatnonzero(frac >= best - 1e-12)
        # ties: larger fixed cost, then lower index
        return int(cand[np.lexsort((cand, -self.inst.fixed_cost[cand]))][0])

    # -- helpers ------------------------------------------------------------
    def objective(self, z: np.ndarray, eta: np.ndarray) -> float:
        return float(self.c @ np.concatenate([z, eta]))
