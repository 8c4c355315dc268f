"""Sampling, root cuts, the per-method callback, termination statistics and the outer loop."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .cuts import (Cut, CutKind, ScenarioPartition, Target, accelerated_multicut_extra,
                   average_duals, feasibility_cut, kcut_cuts, kcut_partition, multi_cut,
                   single_cut, static_valid_inequalities)
from .master import Budget, Layout, Master, MasterInfeasible
from .model import Instance, atomic_write_text, make_rng
from .subproblem import DEFAULT_TOL, SubproblemOracle, Tolerances, true_cost

METHODS = ("det-single", "det-multi", "det-kcut",
           "stoch-single", "stoch-multi", "stoch-acc-multi", "stoch-kcut")
DETERMINISTIC_TWIN = {"stoch-single": "det-single", "stoch-multi": "det-multi",
                      "stoch-acc-multi": "det-multi", "stoch-kcut": "det-kcut"}

# rng stream tags, so scenario draws, evaluation draws and clustering never share a stream
_STREAM_CUTS, _STREAM_EVAL, _STREAM_CLUSTER = 1, 2, 3


def thread_cap() -> int:
    """Worker count: SB_THREADS when set, otherwise every core."""
    env = os.environ.get("SB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class SolveOptions:
    method: str = "stoch-single"
    sample_rate: float = 0.10
    epsilon: float = 0.01
    alpha_level: float = 0.10
    time_limit: float = 7200.0
    root_cuts: str = "single"
    root_cap: int = 20
    k: int | None = None
    seed: int = 0
    w_size: int | None = None
    sample_growth: float = 0.0          # added to sample_rate at every new outer iteration
    cut_improve_tol: float = 1e-6
    max_outer: int | None = None
    max_nodes: int | None = None        # per tree
    workers: int | None = None
    feas_tol: float = DEFAULT_TOL.feas
    dual_tol: float = DEFAULT_TOL.dual
    gap_tol: float = DEFAULT_TOL.gap

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not 0 < self.sample_rate <= 1:
            raise ValueError("sample_rate must lie in (0, 1]")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.alpha_level < 1:
            raise ValueError("alpha_level must lie in (0, 1)")
        if self.root_cuts not in ("none", "single", "multi"):
            raise ValueError("root_cuts must be none, single or multi")
        if self.root_cap < 0:
            raise ValueError("root_cap must be nonnegative")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be positive")

    @property
    def stochastic(self) -> bool:
        return self.method.startswith("stoch")

    @property
    def family(self) -> str:
        return self.method.split("-", 1)[1]

    @property
    def tolerances(self) -> Tolerances:
        return Tolerances(feas=self.feas_tol, dual=self.dual_tol, gap=self.gap_tol)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SampleSet:
    indices: tuple[int, ...]
    draw: tuple = ()


@dataclass(frozen=True)
class TerminationStat:
    mean: float
    std: float
    n: int
    q: float
    upper: float
    degenerate: bool = False
    exact: bool = False


@dataclass
class OuterStep:
    outer_iter: int
    time_s: float
    lower: float
    upper: float
    gap: float
    cuts_total: int
    cuts_feas: int
    tree_lower: float = math.nan
    z: list = field(default_factory=list)
    truncated: bool = False


@dataclass
class SolveRecord:
    method: str
    status: str
    z: list | None
    lower_bound: float
    upper_bound: float
    gap: float
    true_cost: float
    true_gap: float
    converged: bool
    outer_iterations: int
    time_s: float
    eval_time_s: float
    cuts_total: int
    cuts_feas: int
    root_cuts: int
    subproblem_solves: int
    nodes: int
    trace: list[OuterStep]
    options: dict
    instance: str = ""
    gap_clamped: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, val in d.items():
            if isinstance(val, float) and not math.isfinite(val):
                d[key] = repr(val)
        for step in d["trace"]:
            for key, val in step.items():
                if isinstance(val, float) and not math.isfinite(val):
                    step[key] = repr(val)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def write(self, path) -> None:
        atomic_write_text(path, self.to_json() + "\n")

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["outer_iter", "time_s", "lower", "upper", "gap", "cuts_total", "cuts_feas"])
        for s in self.trace:
            w.writerow([s.outer_iter, repr(s.time_s), repr(s.lower), repr(s.upper), repr(s.gap),
                        s.cuts_total, s.cuts_feas])
        return buf.getvalue()

    def write_trace(self, path) -> None:
        atomic_write_text(path, self.trace_csv())


# ---------------------------------------------------------------------------
# statistics

def sample_size(n: int, rate: float) -> int:
    return max(1, min(n, int(math.floor(rate * n + 0.5))))


def sample_scenarios(n_scenarios: int, rate: float, rng: np.random.Generator,
                     draw: tuple = ()) -> SampleSet:
    if not 0 < rate <= 1:
        raise ValueError("rate must lie in (0, 1]")
    size = sample_size(n_scenarios, rate)
    if size == n_scenarios:
        return SampleSet(tuple(range(n_scenarios)), draw)
    idx = rng.choice(n_scenarios, size=size, replace=False)
    return SampleSet(tuple(sorted(int(i) for i in idx)), draw)


def normal_quantile(alpha_level: float) -> float:
    """Upper alpha_level/2 quantile of the standard normal."""
    return float(norm.isf(alpha_level / 2.0))


def termination_stat(costs: Sequence[float], fixed: float, alpha_level: float = 0.10,
                     exact: bool = False) -> TerminationStat:
    costs = np.asarray(costs, dtype=float)
    n = len(costs)
    if n < 1:
        raise ValueError("need at least one cost")
    mean = fixed + float(costs.mean())
    if exact:
        return TerminationStat(mean, 0.0, n, 0.0, mean, exact=True)
    if n == 1:
        return TerminationStat(mean, 0.0, 1, normal_quantile(alpha_level), mean, degenerate=True)
    std = float(costs.std(ddof=1))
    q = normal_quantile(alpha_level)
    return TerminationStat(mean, std, n, q, mean + q * std / math.sqrt(n))


def compute_gap(upper: float, lower: float, tol: float = 1e-9) -> tuple[float, bool]:
    """Relative gap (upper - lower) / upper, clamped at zero; the flag marks a clamp."""
    if not math.isfinite(upper):
        return math.inf, False
    if upper <= 0:
        raise ValueError("gap undefined for a non-positive upper bound")
    if lower > upper:
        return 0.0, True
    return (upper - lower) / upper, False


def _gap(upper: float, lower: float) -> tuple[float, bool]:
    # a zero-cost instance has nothing left to close
    if 0 >= upper > -math.inf:
        return (0.0, False) if lower >= upper - 1e-9 else (math.inf, False)
    return compute_gap(upper, lower)


# ---------------------------------------------------------------------------
# solver

class BendersSolver:
    """State of one solve: oracle cache, pools, draw counters and the partition for k-cut."""

    def __init__(self, inst: Instance, options: SolveOptions):
        self.inst = inst
        self.opt = options
        self.R = inst.n_scenarios
        workers = options.workers
        if workers is None:
            workers = thread_cap()
        self.oracle = SubproblemOracle(inst, options.tolerances, workers=max(1, workers))
        self.outer = 0
        self.draws = 0
        self.partition: ScenarioPartition | None = None
        self.root_cut_count = 0
        self._clock0 = time.monotonic()
        self.deadline = self._clock0 + options.time_limit

    # -- layout ---------------------------------------------------------------
    def k_clusters(self) -> int:
        k = self.opt.k if self.opt.k is not None else int(math.floor(math.sqrt(self.R) + 0.5))
        return max(1, min(self.R, k))

    def layout(self) -> Layout:
        fam = self.opt.family
        if fam == "single":
            return Layout.single(self.R)
        if fam in ("multi", "acc-multi"):
            return Layout.per_scenario(self.R)
        return Layout.clusters(self.partition)

    def current_rate(self) -> float:
        if not self.opt.stochastic:
            return 1.0
        return min(1.0, self.opt.sample_rate + self.opt.sample_growth * max(0, self.outer - 1))

    def _rng(self, *stream) -> np.random.Generator:
        return make_rng(self.opt.seed, *stream)

    # -- cut generation -------------------------------------------------------
    def _draw(self, members: Sequence[int], rate: float, tag: tuple) -> tuple[int, ...]:
        if rate >= 1.0:
            return tuple(members)
        s = sample_scenarios(len(members), rate, self._rng(*tag))
        return tuple(members[i] for i in s.indices)

    def generate_cuts(self, z: np.ndarray, family: str | None = None) -> list[Cut]:
        """Cuts at design z (binary or fractional) for the method's cut family."""
        fam = family or self.opt.family
        rate = self.current_rate()
        self.draws += 1
        tag = (_STREAM_CUTS, self.outer, self.draws)
        prov = (self.outer, self.draws)
        if fam == "kcut":
            clusters = self.partition.clusters()
            sample = tuple(sorted(r for c, mem in enumerate(clusters)
                                  for r in self._draw(mem, rate, tag + (c,))))
        else:
            sample = self._draw(tuple(range(self.R)), rate, tag)
        results = self.oracle.solve_many(z, sample)
        cuts = []
        duals = {}
        for r in sample:
            res = results[r]
            if res.feasible:
                duals[r] = res.dual
            else:
                cuts.append(feasibility_cut(self.inst, res.farkas, self.inst.demands[r], prov))
        infeasible = len(duals) < len(sample)
        mode = "dual_averaged" if rate < 1.0 else "deterministic"
        if fam == "single":
            if not infeasible:
                cuts.append(single_cut(self.inst, duals, mode, provenance=prov))
        elif fam == "kcut":
            if not infeasible:
                cuts.extend(kcut_cuts(self.inst, self.partition, duals, mode, provenance=prov))
        elif fam in ("multi", "acc-multi"):
            cuts.extend(multi_cut(self.inst, duals, provenance=prov))
            if fam == "acc-multi" and duals:
                avg = average_duals([duals[r] for r in sorted(duals)], self.inst)
                extra = accelerated_multicut_extra(self.inst, sample, avg, prov)
                if extra is not None:
                    cuts.append(extra)
        return cuts

    def callback(self, z: np.ndarray, eta: np.ndarray) -> list[Cut]:
        return self.generate_cuts(z)

    # -- root phase -----------------------------------------------------------
    def run_root_phase(self) -> list[Cut]:
        """Cutting planes on the continuous relaxation; at most ``root_cap`` cuts.

        Cuts target the root layout (one block, or one per scenario); use
        ``_project`` to restate them over the main layout.
        """
        opt = self.opt
        if opt.root_cuts == "none" or opt.root_cap == 0:
            return []
        fam = "single" if opt.root_cuts == "single" else "multi"
        root_layout = Layout.single(self.R) if fam == "single" else Layout.per_scenario(self.R)
        master = Master(self.inst, root_layout, opt.cut_improve_tol)
        master.add_cuts(static_valid_inequalities(self.inst))
        collected: list[Cut] = []
        self.last_root_point = None
        while len(collected) < opt.root_cap and time.monotonic() < self.deadline:
            node = master.solve_lp_relaxation()
            if not node.feasible:
                break
            self.last_root_point = node.z
            cuts = self.generate_cuts(node.z, fam)
            cuts = cuts[:opt.root_cap - len(collected)]
            violated = [c for c in cuts if master.violation(c, node.z, node.eta)
                        > opt.cut_improve_tol * (1.0 + abs(c.offset))]
            if not violated:
                break
            master.add_cuts(cuts)
            collected.extend(cuts)
        return collected

    def _project(self, cuts: list[Cut]) -> list[Cut]:
        """Re-express root cuts over the main layout's epigraph blocks."""
        layout = self.layout()
        out = []
        by_round: dict[tuple, dict[int, Cut]] = {}
        for c in cuts:
            if c.kind is CutKind.FEASIBILITY:
                out.append(c)
                continue
            try:
                layout.blocks_for(c.target.members)
                out.append(c)
            except ValueError:
                by_round.setdefault(c.provenance, {})[c.target.members[0]] = c
        for prov, per in by_round.items():
            for blk in layout.blocks:
                if all(r in per for r in blk):
                    off = sum(per[r].offset for r in blk)
                    slope = np.sum([per[r].slope for r in blk], axis=0)
                    tgt = Target("single", blk) if len(blk) == self.R else Target("aggregate", blk)
                    out.append(Cut(CutKind.OPTIMALITY, tgt, off, slope, prov))
        return out

    def _cluster(self, root_point: np.ndarray | None) -> ScenarioPartition:
        k = self.k_clusters()
        if k == 1:
            return ScenarioPartition.trivial(self.R)
        if k == self.R:
            return ScenarioPartition.singletons(self.R)
        alphas = None
        for z0 in ([root_point] if root_point is not None else []) + [self.inst.all_open()]:
            res = self.oracle.solve_many(z0, range(self.R))
            if all(r.feasible for r in res.values()):
                alphas = np.array([res[r].dual.alpha for r in range(self.R)])
                break
        if alphas is None:
            return ScenarioPartition.trivial(self.R) if k == 1 else ScenarioPartition.singletons(self.R)
        seed = int(self._rng(_STREAM_CLUSTER).integers(0, 2**31 - 1))
        return kcut_partition(alphas, k, seed)

    # -- upper bound ----------------------------------------------------------
    def exact_upper(self) -> bool:
        return (not self.opt.stochastic or self.opt.sample_rate >= 1.0
                or self.w_size() >= self.R)

    def w_size(self) -> int:
        if self.opt.w_size is not None:
            return self.opt.w_size
        return max(2, int(math.floor(0.2 * self.R + 0.5)))

    def evaluate(self, z: np.ndarray):
        """(TerminationStat or None, infeasible results) for candidate z."""
        if self.exact_upper():
            W = tuple(range(self.R))
        else:
            W = sample_scenarios(self.R, self.w_size() / self.R,
                                 self._rng(_STREAM_EVAL, self.outer)).indices
        res = self.oracle.solve_many(z, W)
        bad = {r: s for r, s in res.items() if not s.feasible}
        if bad:
            return None, bad
        costs = [res[r].objective for r in W]
        stat = termination_stat(costs, float(self.inst.fixed_cost @ z), self.opt.alpha_level,
                                exact=self.exact_upper())
        return stat, {}

    # -- outer loop -----------------------------------------------------------
    def solve(self) -> SolveRecord:
        inst, opt = self.inst, self.opt
        t0 = self._clock0
        status = "unsolved"
        if inst.cardinality < len(inst.fixed_open):
            raise MasterInfeasible("cardinality below the number of fixed-open edges")
        self.outer = 0
        self.last_root_point = None
        root_cuts = self.run_root_phase()
        if opt.family == "kcut":
            self.partition = self._cluster(self.last_root_point)
        root_cuts = self._project(root_cuts)
        self.root_cut_count = len(root_cuts)
        master = Master(inst, self.layout(), opt.cut_improve_tol)
        master.add_cuts(static_valid_inequalities(inst))
        master.add_cuts(root_cuts)

        starts = []
        fixed_design = inst.design()
        starts.append(fixed_design)
        if inst.n_edges <= inst.cardinality:
            starts.append(inst.all_open())
        candidates: list[tuple[float, int, np.ndarray]] = []
        trace: list[OuterStep] = []
        lb = -math.inf
        nodes = 0
        while True:
            self.outer += 1
            self.draws = 0
            warm = list(starts)
            if candidates:
                warm.append(min(candidates, key=lambda c: (c[0], c[1]))[2])
            res = master.branch_and_cut(self.callback, Budget(opt.max_nodes, self.deadline), warm)
            nodes += res.stats.nodes
            master.promote_lazy()
            lb = max(lb, res.lower_bound)
            upper_t = math.inf
            if res.z is not None:
                stat, bad = self.evaluate(res.z)
                if stat is None:
                    for r, s in bad.items():
                        master.add_cuts([feasibility_cut(inst, s.farkas, inst.demands[r],
                                                         (self.outer, "eval"))])
                else:
                    upper_t = stat.upper
                    candidates.append((stat.upper, self.outer, res.z.copy()))
            best_upper = min((c[0] for c in candidates), default=math.inf)
            gap, _ = _gap(best_upper, lb)
            feas = sum(1 for c in master.cuts if c.kind is CutKind.FEASIBILITY)
            trace.append(OuterStep(self.outer, time.monotonic() - t0, lb, upper_t, gap,
                                   len(master.cuts), feas, res.lower_bound,
                                   [] if res.z is None else [int(e) + 1 for e in np.flatnonzero(res.z)],
                                   res.truncated))
            if res.z is None and not res.truncated and not candidates:
                status = "infeasible"
                break
            if gap <= opt.epsilon:
                status = "converged"
                break
            if time.monotonic() >= self.deadline:
                status = "time_limit"
                break
            if opt.max_outer is not None and self.outer >= opt.max_outer:
                status = "iteration_limit"
                break
        solve_time = time.monotonic() - t0

        t_eval = time.monotonic()
        if candidates:
            best = min(candidates, key=lambda c: (c[0], c[1]))
            z_best = best[2]
            true, _ = true_cost(inst, z_best, oracle=self.oracle)
            best_upper = best[0]
            gap, clamped = _gap(best_upper, lb)
            true_gap, _ = _gap(true, lb)
            z_out = [int(v) for v in np.round(z_best)]
        else:
            true, best_upper, gap, true_gap, clamped, z_out = (math.inf, math.inf, math.inf,
                                                               math.inf, False, None)
        eval_time = time.monotonic() - t_eval
        feas = sum(1 for c in master.cuts if c.kind is CutKind.FEASIBILITY)
        return SolveRecord(
            method=opt.method, status=status, z=z_out, lower_bound=lb, upper_bound=best_upper,
            gap=gap, true_cost=true, true_gap=true_gap, converged=status == "converged",
            outer_iterations=self.outer, time_s=solve_time, eval_time_s=eval_time,
            cuts_total=len(master.cuts), cuts_feas=feas, root_cuts=self.root_cut_count,
            subproblem_solves=self.oracle.n_solves, nodes=nodes, trace=trace,
            options=opt.to_dict(), instance=inst.name, gap_clamped=clamped)


def solve(inst: Instance, options: SolveOptions | None = None, **kwargs) -> SolveRecord:
    """Run the outer loop for ``inst``; keyword arguments override fields of ``options``."""
    if options is None:
        options = SolveOptions(**kwargs)
    elif kwargs:
        options = SolveOptions(**{**options.to_dict(), **kwargs})
    return BendersSolver(inst, options).solve()
