"""Second-stage routing problem: primal flows, optimal duals, infeasibility certificates.

For a design z and one scenario d the routing cost is

    f(z; d) = min  sum_k <f^k, x^k> + sum_e (Σ_k x_e^k)^2 / (2 gamma z_e)
              s.t. A x^k = d^k,  Σ_k x_e^k <= u_e z_e,  x >= 0,

with closed edges removed. For binary z this is the usual regularized
problem; for fractional z (root relaxation) it is its perspective.

Its dual (used for every cut) is

    q(z, alpha, beta, p; d) = Σ_k <p^k, d^k> - Σ_e z_e [u_e beta_e + gamma/2 (alpha_e + beta_e)^2]
    s.t. (A^T p^k)_e <= f_e^k - alpha_e,  beta >= 0.

Given node potentials p the best (alpha, beta) is available edge by edge in
closed form, which is how duals are recovered from the QP solver: only p is
taken from the solver, alpha and beta are recomputed so that the returned
dual is feasible to machine precision and strong duality can be checked.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import clarabel
import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.sparse.csgraph import connected_components

from .model import Instance

OPEN_TOL = 1e-9


@dataclass(frozen=True)
class Tolerances:
    feas: float = 1e-7
    dual: float = 1e-7
    gap: float = 1e-6
    solver: float = 1e-10


DEFAULT_TOL = Tolerances()


class NumericalError(RuntimeError):
    def __init__(self, message: str, residuals: dict | None = None):
        super().__init__(message)
        self.residuals = residuals or {}


class InfeasibleScenario(ValueError):
    def __init__(self, scenarios):
        self.scenarios = list(scenarios)
        super().__init__("infeasible scenario(s) " + ", ".join(str(r + 1) for r in self.scenarios))


class Status(Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"


@dataclass
class FlowSolution:
    x: np.ndarray          # (E, K)
    objective: float


@dataclass
class DualSolution:
    alpha: np.ndarray      # (E,)
    beta: np.ndarray       # (E,)
    p: np.ndarray          # (N, K)


@dataclass
class FarkasCertificate:
    beta: np.ndarray
    p: np.ndarray
    violation: float


@dataclass
class SubproblemResult:
    status: Status
    flow: FlowSolution | None = None
    dual: DualSolution | None = None
    farkas: FarkasCertificate | None = None
    dual_objective: float = math.nan
    residuals: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status is Status.OPTIMAL

    @property
    def objective(self) -> float:
        return self.flow.objective if self.flow is not None else math.inf


# ---------------------------------------------------------------------------
# dual algebra shared with the cut engine

def potential_differences(inst: Instance, p: np.ndarray) -> np.ndarray:
    """(A^T p^k)_e = p_tail - p_head, shape (E, K)."""
    net = inst.network
    return p[net.tail] - p[net.head]


def edge_penalty(inst: Instance, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """u_e beta_e + gamma/2 (alpha_e + beta_e)^2 with the conventions for infinite u or gamma."""
    u = inst.effective_capacity
    cap_term = np.multiply(u, beta, out=np.zeros_like(beta, dtype=float), where=beta != 0)
    if math.isinf(inst.gamma):
        return cap_term
    return cap_term + 0.5 * inst.gamma * (alpha + beta) ** 2


def tighten_alpha(inst: Instance, p: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Lower alpha by a few ulps where f - alpha rounds below A^T p, so the check holds exactly."""
    diffs = potential_differences(inst, p)
    for _ in range(4):
        excess = (diffs - (inst.flow_cost - alpha[:, None])).max(axis=1)
        if not np.any(excess > 0):
            break
        alpha = np.where(excess > 0, np.nextafter(alpha - excess, -np.inf), alpha)
    return alpha


def repair_dual(inst: Instance, p: np.ndarray) -> DualSolution:
    """Best (alpha, beta) for fixed potentials p; the result is exactly dual feasible."""
    slack = (inst.flow_cost - potential_differences(inst, p)).min(axis=1)
    alpha = tighten_alpha(inst, p, np.minimum(0.0, slack))
    if math.isinf(inst.gamma):
        beta = -alpha
    else:
        beta = np.maximum(0.0, -alpha - inst.capacity / inst.gamma)
    return DualSolution(alpha=alpha, beta=beta + 0.0, p=np.array(p, dtype=float))


def dual_cut_coefficients(inst: Instance, dual: DualSolution, d: np.ndarray):
    """(offset, slope) with q(z, dual; d) = offset + <slope, z>.

    ``d`` is the (K, N) demand of one scenario.
    """
    offset = float(np.sum(dual.p.T * d))
    slope = -edge_penalty(inst, dual.alpha, dual.beta)
    return offset, slope


def dual_bound_value(z, dual: DualSolution, d: np.ndarray, inst: Instance) -> float:
    offset, slope = dual_cut_coefficients(inst, dual, d)
    return offset + float(np.dot(slope, np.asarray(z, dtype=float)))


def dual_violations(inst: Instance, dual: DualSolution, tol: float = DEFAULT_TOL.dual) -> list[str]:
    """Constraint violations of a dual solution beyond ``tol`` (empty when feasible)."""
    out = []
    lhs = potential_differences(inst, dual.p) - (inst.flow_cost - dual.alpha[:, None])
    worst = float(lhs.max()) if lhs.size else 0.0
    if worst > tol:
        e, k = np.unravel_index(int(np.argmax(lhs)), lhs.shape)
        out.append(f"potential constraint violated by {worst:.3g} at edge {e + 1}, commodity {k + 1}")
    if np.any(dual.beta < -tol):
        out.append("beta must be nonnegative")
    if not math.isinf(inst.gamma):
        inf_cap = np.isinf(inst.capacity)
        if np.any(np.abs(dual.beta[inf_cap]) > tol):
            out.append("beta must vanish on uncapacitated edges")
    elif np.any(np.abs(dual.alpha + dual.beta) > tol):
        out.append("alpha + beta must vanish when gamma is infinite")
    return out


def farkas_violations(inst: Instance, cert: FarkasCertificate, z, d: np.ndarray,
                      tol: float = DEFAULT_TOL.dual) -> list[str]:
    out = []
    lhs = potential_differences(inst, cert.p) - cert.beta[:, None]
    if lhs.size and lhs.max() > tol:
        out.append(f"A^T p - beta exceeds 0 by {lhs.max():.3g}")
    if np.any(cert.beta < -tol):
        out.append("beta must be nonnegative")
    value = farkas_value(inst, cert, z, d)
    if not value > 0:
        out.append(f"certificate value {value:.3g} is not positive")
    elif abs(value - cert.violation) > tol * (1 + abs(value)):
        out.append(f"stated violation {cert.violation} differs from value {value}")
    return out


def farkas_value(inst: Instance, cert: FarkasCertificate, z, d: np.ndarray) -> float:
    z = np.asarray(z, dtype=float)
    u = inst.capacity_bound
    beta = cert.beta
    used = np.multiply(z * u, beta, out=np.zeros_like(beta, dtype=float), where=beta != 0)
    return float(np.sum(cert.p.T * d) - used.sum())


def primal_objective(inst: Instance, z, x: np.ndarray) -> float:
    z = np.asarray(z, dtype=float)
    lin = float(np.sum(inst.flow_cost * x))
    if math.isinf(inst.gamma):
        return lin
    agg = x.sum(axis=1)
    used = agg > 0
    return lin + float(np.sum(agg[used] ** 2 / (2.0 * inst.gamma * z[used])))


# ---------------------------------------------------------------------------
# solver

def _pinned_nodes(inst: Instance, open_edges: np.ndarray, d: np.ndarray):
    """Components of the open subgraph and one reference node per (component, commodity).

    Returns (labels, pinned) where pinned[k] is the list of reference nodes of
    commodity k, or None if some component has unbalanced demand.
    """
    net = inst.network
    n = net.n_nodes
    adj = sp.csr_matrix((np.ones(len(open_edges)), (net.tail[open_edges], net.head[open_edges])),
                        shape=(n, n))
    n_comp, labels = connected_components(adj, directed=True, connection="weak")
    scale = 1.0 + np.abs(d).sum()
    pinned = []
    balanced = True
    for k in range(d.shape[0]):
        sink = int(np.argmin(d[k]))
        net_by_comp = np.bincount(labels, weights=d[k], minlength=n_comp)
        if np.any(np.abs(net_by_comp) > 1e-9 * scale):
            balanced = False
        refs = []
        for c in range(n_comp):
            members = np.flatnonzero(labels == c)
            refs.append(sink if labels[sink] == c else int(members[0]))
        pinned.append(refs)
    return labels, pinned, balanced


def _settings(tol: Tolerances):
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.tol_gap_abs = tol.solver
    s.tol_gap_rel = tol.solver
    s.tol_feas = tol.solver
    s.tol_ktratio = 1e-8
    s.max_iter = 400
    s.max_threads = 1
    return s


def _solve_qp(inst: Instance, z: np.ndarray, d: np.ndarray, open_edges: np.ndarray,
              pinned, tol: Tolerances):
    net = inst.network
    K = inst.n_commodities
    m = len(open_edges)
    n_var = m * K
    A_open = net.incidence[:, open_edges]
    eq_blocks, rhs, kept_rows = [], [], []
    for k in range(K):
        keep = np.setdiff1d(np.arange(net.n_nodes), pinned[k])
        sel = np.zeros((1, K))
        sel[0, k] = 1.0
        eq_blocks.append(sp.kron(A_open[keep], sp.csr_matrix(sel), format="csc"))
        rhs.append(d[k, keep])
        kept_rows.append(keep)
    blocks = [sp.vstack(eq_blocks, format="csc")] if eq_blocks else []
    b = [np.concatenate(rhs)]
    n_eq = blocks[0].shape[0]
    blocks.append(-sp.identity(n_var, format="csc"))
    b.append(np.zeros(n_var))
    S = sp.kron(sp.identity(m), sp.csr_matrix(np.ones((1, K))), format="csc")
    u = inst.capacity[open_edges]
    finite = np.isfinite(u)
    if np.any(finite):
        blocks.append(S[finite])
        b.append(u[finite] * z[open_edges][finite])
    A = sp.vstack(blocks, format="csc")
    bvec = np.concatenate(b)
    cones = [clarabel.ZeroConeT(n_eq), clarabel.NonnegativeConeT(A.shape[0] - n_eq)]
    if math.isinf(inst.gamma):
        P = sp.csc_matrix((n_var, n_var))
    else:
        w = 1.0 / (inst.gamma * z[open_edges])
        P = sp.triu(S.T @ sp.diags(w) @ S, format="csc")
    q = np.asarray(inst.flow_cost[open_edges], dtype=float).ravel()
    solver = clarabel.DefaultSolver(P, q, A, bvec, cones, _settings(tol))
    sol = solver.solve()
    status = str(sol.status)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return None, None, status
    if status not in ("Solved", "AlmostSolved"):
        return False, None, status
    x = np.maximum(np.asarray(sol.x).reshape(m, K), 0.0)
    y = np.asarray(sol.z)[:n_eq]
    p = np.zeros((net.n_nodes, K))
    pos = 0
    for k in range(K):
        rows = kept_rows[k]
        p[rows, k] = -y[pos:pos + len(rows)]
        pos += len(rows)
    return x, p, status


def _farkas(inst: Instance, z: np.ndarray, d: np.ndarray, pinned) -> FarkasCertificate:
    """Normalized certificate: max Σ<p,d> - Σ z u beta over A^T p^k <= beta, |p| <= 1."""
    net = inst.network
    N, K, E = net.n_nodes, inst.n_commodities, net.n_edges
    u = inst.capacity_bound
    n_p = N * K
    c = np.concatenate([-d.T.ravel(), z * u])       # p is node-major, commodity-minor
    rows, cols, vals = [], [], []
    r = 0
    for e in range(E):
        i, j = net.tail[e], net.head[e]
        for k in range(K):
            rows += [r, r, r]
            cols += [i * K + k, j * K + k, n_p + e]
            vals += [1.0, -1.0, -1.0]
            r += 1
    A_ub = sp.csr_matrix((vals, (rows, cols)), shape=(r, n_p + E))
    bounds = [(-1.0, 1.0)] * n_p + [(0.0, 2.0)] * E
    for k in range(K):
        sink = int(np.argmin(d[k]))
        bounds[sink * K + k] = (0.0, 0.0)
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(r), bounds=bounds, method="highs")
    if res.status != 0:
        raise NumericalError(f"certificate LP failed: {res.message}")
    p = res.x[:n_p].reshape(N, K)
    beta = np.maximum(0.0, potential_differences(inst, p).max(axis=1))
    cert = FarkasCertificate(beta=beta, p=p, violation=0.0)
    cert.violation = farkas_value(inst, cert, z, d)
    return cert


def solve_subproblem(inst: Instance, z, r: int, tol: Tolerances = DEFAULT_TOL,
                     demand: np.ndarray | None = None) -> SubproblemResult:
    """Solve scenario ``r`` (0-based) at design ``z``; ``demand`` overrides the scenario's (K, N) demand."""
    z = np.asarray(z, dtype=float)
    d = inst.demands[r] if demand is None else np.asarray(demand, dtype=float)
    open_edges = np.flatnonzero(z > OPEN_TOL)
    _, pinned, balanced = _pinned_nodes(inst, open_edges, d)
    if balanced:
        x_open, p, status = _solve_qp(inst, z, d, open_edges, pinned, tol)
        if x_open is False:
            raise NumericalError(f"QP solver stopped with status {status}", {"status": status})
    if not balanced or x_open is None:
        cert = _farkas(inst, z, d, pinned)
        if cert.violation <= tol.feas * (1.0 + np.abs(d).sum()):
            raise NumericalError("infeasibility reported but no separating certificate found",
                                 {"violation": cert.violation})
        return SubproblemResult(Status.INFEASIBLE, farkas=cert)

    x = np.zeros((inst.n_edges, inst.n_commodities))
    x[open_edges] = x_open
    dual = repair_dual(inst, p)
    primal = primal_objective(inst, z, x)
    dual_obj = dual_bound_value(z, dual, d, inst)
    A = inst.network.incidence
    flow_res = float(np.abs(A @ x - d.T).max()) if x.size else 0.0
    finite = np.isfinite(inst.capacity)
    cap_res = float(np.max(x.sum(axis=1)[finite] - inst.capacity[finite] * z[finite], initial=0.0))
    gap = abs(primal - dual_obj)
    residuals = {"flow": flow_res, "capacity": cap_res, "gap": gap, "status": status}
    scale = 1.0 + float(np.abs(d).max(initial=0.0))
    if flow_res > tol.feas * scale or cap_res > tol.feas * scale or gap > tol.gap * (1 + abs(primal)):
        raise NumericalError("subproblem solution failed verification", residuals)
    return SubproblemResult(Status.OPTIMAL, flow=FlowSolution(x=x, objective=primal), dual=dual,
                            dual_objective=dual_obj, residuals=residuals)


class SubproblemOracle:
    """Memoizing front end to :func:`solve_subproblem` for one instance."""

    def __init__(self, inst: Instance, tol: Tolerances = DEFAULT_TOL, workers: int = 1):
        self.inst = inst
        self.tol = tol
        self.workers = workers
        self._cache: dict[tuple[bytes, int], SubproblemResult] = {}
        self.n_solves = 0

    def solve(self, z, r: int) -> SubproblemResult:
        z = np.ascontiguousarray(z, dtype=float)
        key = (z.tobytes(), int(r))
        hit = self._cache.get(key)
        if hit is None:
            hit = solve_subproblem(self.inst, z, r, self.tol)
            self.n_solves += 1
            self._cache[key] = hit
        return hit

    def solve_many(self, z, scenarios) -> dict[int, SubproblemResult]:
        """Results keyed by scenario, filled in ascending scenario order."""
        order = sorted(int(r) for r in scenarios)
        z = np.ascontiguousarray(z, dtype=float)
        if self.workers > 1 and len(order) > 1:
            todo = [r for r in order if (z.tobytes(), r) not in self._cache]
            with ThreadPoolExecutor(self.workers) as pool:
                solved = list(pool.map(lambda r: solve_subproblem(self.inst, z, r, self.tol), todo))
            for r, res in zip(todo, solved):
                self._cache[(z.tobytes(), r)] = res
                self.n_solves += 1
        return {r: self.solve(z, r) for r in order}

    def clear(self):
        self._cache.clear()


def true_cost(inst: Instance, z, scenarios=None, oracle: SubproblemOracle | None = None):
    """Fixed cost plus mean routing cost over ``scenarios`` (default: all), and per-scenario costs."""
    z = np.asarray(z, dtype=float)
    oracle = oracle or SubproblemOracle(inst)
    W = range(inst.n_scenarios) if scenarios is None else sorted(int(r) for r in scenarios)
    res = oracle.solve_many(z, W)
    bad = [r for r, s in res.items() if not s.feasible]
    if bad:
        raise InfeasibleScenario(bad)
    costs = np.array([res[r].objective for r in W])
    return float(np.dot(inst.fixed_cost, z) + costs.mean()), costs


def robust_equivalence_value(x: np.ndarray, lam: float, inst: Instance) -> float:
    """Nominal routing cost plus lam times the Euclidean norm of all aggregate edge flows.

    ``x`` has shape (R, E, K). This is the closed-form worst case of a
    ball-uncertain linear cost, the counterpart of the quadratic regularizer.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    x = np.asarray(x, dtype=float)
    nominal = float(np.einsum("rek,ek->", x, inst.flow_cost))
    agg = x.sum(axis=2)
    return nominal + lam * math.sqrt(float(np.sum(agg ** 2)))
