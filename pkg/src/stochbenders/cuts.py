"""Benders cuts built from subproblem duals, plus scenario clustering and cut-pool I/O.

An optimality cut states ``Σ_{r in target} f(z; d^r) >= offset + <slope, z>``;
a feasibility cut states ``offset + <slope, z> <= 0``. Both hold at every
design with feasible recourse, whatever design generated them, because any
dual-feasible point gives a lower bound on every scenario's routing cost.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import Instance, atomic_write_text
from .subproblem import (DualSolution, FarkasCertificate, SubproblemResult, dual_cut_coefficients,
                         dual_violations, edge_penalty, tighten_alpha)


class CutKind(Enum):
    OPTIMALITY = "opt"
    FEASIBILITY = "feas"


@dataclass(frozen=True)
class Target:
    """Which scenarios' routing costs an optimality cut bounds (as a sum)."""

    kind: str                        # single | scenario | cluster | aggregate | none
    members: tuple[int, ...] = ()
    index: int | None = None

    @staticmethod
    def single(n_scenarios: int) -> "Target":
        return Target("single", tuple(range(n_scenarios)))

    @staticmethod
    def scenario(r: int) -> "Target":
        return Target("scenario", (int(r),), int(r))

    @staticmethod
    def cluster(c: int, members: Iterable[int]) -> "Target":
        return Target("cluster", tuple(sorted(int(r) for r in members)), int(c))

    @staticmethod
    def aggregate(members: Iterable[int]) -> "Target":
        return Target("aggregate", tuple(sorted(int(r) for r in members)))

    def encode(self) -> str:
        ids = ";".join(str(r + 1) for r in self.members)
        if self.kind == "single":
            return f"single:{ids}"
        if self.kind == "scenario":
            return f"scenario:{self.index + 1}"
        if self.kind == "cluster":
            return f"cluster:{self.index + 1}:{ids}"
        if self.kind == "aggregate":
            return f"aggregate:{ids}"
        return "none"

    @staticmethod
    def decode(text: str) -> "Target":
        parts = text.split(":")
        ids = lambda s: tuple(int(v) - 1 for v in s.split(";") if v)  # noqa: E731
        if parts[0] == "none":
            return NO_TARGET
        if parts[0] == "single":
            return Target("single", ids(parts[1]))
        if parts[0] == "scenario":
            return Target.scenario(int(parts[1]) - 1)
        if parts[0] == "cluster":
            return Target("cluster", ids(parts[2]), int(parts[1]) - 1)
        if parts[0] == "aggregate":
            return Target("aggregate", ids(parts[1]))
        raise ValueError(f"unknown cut target {text!r}")


NO_TARGET = Target("none")


@dataclass(frozen=True, eq=False)
class Cut:
    kind: CutKind
    target: Target
    offset: float
    slope: np.ndarray
    provenance: tuple = ()

    def value(self, z) -> float:
        return self.offset + float(np.dot(self.slope, np.asarray(z, dtype=float)))

    def key(self) -> tuple:
        coeffs = np.round(np.concatenate([[self.offset], self.slope]) / 1e-9).astype(np.int64)
        return (self.kind, self.target, coeffs.tobytes())

    def same_as(self, other: "Cut") -> bool:
        return (self.kind == other.kind and self.target == other.target
                and self.offset == other.offset and np.array_equal(self.slope, other.slope))


@dataclass(frozen=True)
class ScenarioPartition:
    k: int
    assignment: tuple[int, ...]      # scenario -> cluster, 0-based

    def members(self, c: int) -> tuple[int, ...]:
        return tuple(r for r, a in enumerate(self.assignment) if a == c)

    def clusters(self) -> list[tuple[int, ...]]:
        return [self.members(c) for c in range(self.k)]

    @staticmethod
    def trivial(n_scenarios: int) -> "ScenarioPartition":
        return ScenarioPartition(1, (0,) * n_scenarios)

    @staticmethod
    def singletons(n_scenarios: int) -> "ScenarioPartition":
        return ScenarioPartition(n_scenarios, tuple(range(n_scenarios)))


# ---------------------------------------------------------------------------
# dual combination

def average_duals(duals: Sequence[DualSolution], inst: Instance | None = None) -> DualSolution:
    """Componentwise mean. With ``inst`` the mean is made exactly feasible despite rounding."""
    if not duals:
        raise ValueError("cannot average an empty list of duals")
    if len(duals) == 1:
        return duals[0]
    alpha = np.mean([d.alpha for d in duals], axis=0)
    beta = np.mean([d.beta for d in duals], axis=0)
    p = np.mean([d.p for d in duals], axis=0)
    if inst is not None:
        alpha = tighten_alpha(inst, p, alpha)
        if math.isinf(inst.gamma):
            beta = -alpha
    return DualSolution(alpha=alpha, beta=beta, p=p)


def _check(inst: Instance, dual: DualSolution, r, tol: float):
    problems = dual_violations(inst, dual, tol)
    if problems:
        raise ValueError(f"dual for scenario {r + 1} rejected: {problems[0]}")


def _assemble(inst: Instance, members: Sequence[int], duals: Mapping[int, DualSolution],
              fill: DualSolution | None):
    """Sum of q(., dual_r; d^r) over members; members without a dual use ``fill``."""
    offset = 0.0
    slope = np.zeros(inst.n_edges)
    rest = []
    for r in members:
        dual = duals.get(r)
        if dual is None:
            rest.append(r)
            continue
        o, s = dual_cut_coefficients(inst, dual, inst.demands[r])
        offset += o
        slope += s
    if rest:
        if fill is None:
            raise ValueError(f"no dual for scenario {rest[0] + 1}")
        d_sum = inst.demands[rest].sum(axis=0)
        offset += float(np.sum(fill.p.T * d_sum))
        slope += -len(rest) * edge_penalty(inst, fill.alpha, fill.beta)
    return offset, slope


# ---------------------------------------------------------------------------
# optimality cuts

def multi_cut(inst: Instance, duals: Mapping[int, DualSolution], provenance: tuple = (),
              tol: float = 1e-7) -> list[Cut]:
    """One per-scenario cut for every scenario with a dual."""
    cuts = []
    for r in sorted(duals):
        _check(inst, duals[r], r, tol)
        off, slope = dual_cut_coefficients(inst, duals[r], inst.demands[r])
        cuts.append(Cut(CutKind.OPTIMALITY, Target.scenario(r), off, slope, provenance))
    return cuts


def single_cut(inst: Instance, duals: Mapping[int, DualSolution], mode: str = "deterministic",
               members: Sequence[int] | None = None, target: Target | None = None,
               provenance: tuple = (), tol: float = 1e-7) -> Cut:
    """Cut on the summed cost of ``members`` (default all scenarios).

    ``mode="deterministic"`` needs a dual for every member; ``"dual_averaged"``
    uses the mean of the supplied duals for members without one.
    """
    members = tuple(range(inst.n_scenarios)) if members is None else tuple(members)
    sampled = {r: duals[r] for r in members if r in duals}
    if not sampled:
        raise ValueError("single cut needs at least one sampled dual")
    for r, dual in sampled.items():
        _check(inst, dual, r, tol)
    if mode == "deterministic":
        missing = [r for r in members if r not in sampled]
        if missing:
            raise ValueError(f"deterministic cut is missing the dual of scenario {missing[0] + 1}")
        fill = None
    elif mode == "dual_averaged":
        fill = average_duals([sampled[r] for r in sorted(sampled)], inst)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    offset, slope = _assemble(inst, members, sampled, fill)
    tgt = target if target is not None else Target("single", members)
    return Cut(CutKind.OPTIMALITY, tgt, offset, slope, provenance)


def accelerated_multicut_extra(inst: Instance, sampled: Iterable[int], avg_dual: DualSolution,
                               provenance: tuple = ()) -> Cut | None:
    """Aggregate cut on the scenarios outside ``sampled`` using the averaged dual."""
    sampled = set(int(r) for r in sampled)
    rest = [r for r in range(inst.n_scenarios) if r not in sampled]
    if not rest:
        return None
    offset, slope = _assemble(inst, rest, {}, avg_dual)
    return Cut(CutKind.OPTIMALITY, Target.aggregate(rest), offset, slope, provenance)


def kcut_cuts(inst: Instance, partition: ScenarioPartition, duals: Mapping[int, DualSolution],
              mode: str = "dual_averaged", provenance: tuple = (), tol: float = 1e-7) -> list[Cut]:
    """One cut per cluster, averaging within the cluster.

    With one cluster this is exactly :func:`single_cut`; with singleton
    clusters and full sampling the cuts equal :func:`multi_cut`'s.
    """
    cuts = []
    for c, members in enumerate(partition.clusters()):
        if partition.k == 1:
            target = Target("single", members)
        elif len(members) == 1 and partition.k == inst.n_scenarios:
            target = Target.scenario(members[0])
        else:
            target = Target.cluster(c, members)
        cuts.append(single_cut(inst, duals, mode, members, target, provenance, tol))
    return cuts


# ---------------------------------------------------------------------------
# feasibility cuts

def feasibility_cut(inst: Instance, cert: FarkasCertificate, d: np.ndarray,
                    provenance: tuple = ()) -> Cut:
    if not cert.violation > 0:
        raise ValueError("certificate with non-positive violation cannot separate")
    offset = float(np.sum(cert.p.T * d))
    slope = -inst.capacity_bound * cert.beta
    return Cut(CutKind.FEASIBILITY, NO_TARGET, offset, slope, provenance)


def static_valid_inequalities(inst: Instance) -> list[Cut]:
    """Every node that ever supplies needs an open out-edge; every node that ever demands needs an in-edge.

    Returned as feasibility cuts ``1 - Σ z_e <= 0``; nodes already served by
    a fixed-open edge produce nothing.
    """
    net = inst.network
    d = inst.demands
    fixed = inst.fixed_mask
    cuts = []
    seen = set()
    for node in range(net.n_nodes):
        for sign, incident in ((1, net.tail == node), (-1, net.head == node)):
            if not np.any(sign * d[:, :, node] > 0):
                continue
            if np.any(fixed & incident):
                continue
            key = tuple(np.flatnonzero(incident))
            if key in seen:
                continue
            seen.add(key)
            slope = -incident.astype(float)
            cuts.append(Cut(CutKind.FEASIBILITY, NO_TARGET, 1.0, slope, ("static", node + 1)))
    return cuts


# ---------------------------------------------------------------------------
# clustering

def kcut_partition(root_duals: Mapping[int, DualSolution] | np.ndarray, k: int,
                   seed: int = 0) -> ScenarioPartition:
    """k-means on each scenario's alpha vector at the root design.

    Clusters are relabelled by first appearance in scenario order; clusters
    left empty by k-means are dropped, so the result may have fewer than k.
    """
    from sklearn.cluster import KMeans
    from sklearn.exceptions import ConvergenceWarning

    if isinstance(root_duals, Mapping):
        X = np.array([root_duals[r].alpha for r in sorted(root_duals)])
    else:
        X = np.asarray(root_duals, dtype=float)
    n = len(X)
    if k < 1 or k > n:
        raise ValueError(f"k must be in 1..{n}, got {k}")
    if k == 1:
        return ScenarioPartition.trivial(n)
    if k == n:
        return ScenarioPartition.singletons(n)
    n_distinct = len(np.unique(X, axis=0))
    if n_distinct < k:
        raw = np.unique(X, axis=0, return_inverse=True)[1].ravel()
    else:
        km = KMeans(n_clusters=k, n_init=20, random_state=seed % (2**32))
        with warnings.catch_warnings():
            # near-duplicate alpha vectors can leave fewer distinct clusters; handled below
            warnings.simplefilter("ignore", ConvergenceWarning)
            raw = km.fit_predict(X)
    relabel: dict[int, int] = {}
    assignment = []
    for label in raw:
        relabel.setdefault(int(label), len(relabel))
        assignment.append(relabel[int(label)])
    return ScenarioPartition(len(relabel), tuple(assignment))


# ---------------------------------------------------------------------------
# diagnostics

@dataclass
class AveragingReport:
    error_sum: float
    nu: float
    n_unsampled: int
    ratio: float


def averaging_diagnostic(inst: Instance, z, sampled: Iterable[int],
                         results: Mapping[int, SubproblemResult]) -> AveragingReport:
    """Error of dual averaging on unsampled scenarios against their exact costs.

    ``results`` must hold optimal solves at ``z`` for every scenario. ``nu``
    is the root-mean-square distance of the scenario duals to their mean.
    """
    z = np.asarray(z, dtype=float)
    sampled = sorted(set(int(r) for r in sampled))
    R = inst.n_scenarios
    rest = [r for r in range(R) if r not in set(sampled)]
    vecs = np.array([np.concatenate([results[r].dual.alpha, results[r].dual.beta,
                                     results[r].dual.p.ravel()]) for r in range(R)])
    nu = float(np.sqrt(np.mean(np.sum((vecs - vecs.mean(axis=0)) ** 2, axis=1))))
    if not rest or not sampled:
        return AveragingReport(0.0, nu, len(rest), 0.0)
    avg = average_duals([results[r].dual for r in sampled], inst)
    err = 0.0
    for r in rest:
        off, slope = dual_cut_coefficients(inst, avg, inst.demands[r])
        err += abs(off + float(slope @ z) - results[r].objective)
    denom = nu * math.sqrt(len(rest))
    return AveragingReport(err, nu, len(rest), err / denom if denom > 0 else 0.0)


# ---------------------------------------------------------------------------
# cut pool CSV

def cuts_to_csv(cuts: Sequence[Cut], n_edges: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "target", "offset"] + [f"slope_e{e + 1}" for e in range(n_edges)])
    for c in cuts:
        w.writerow([c.kind.value, c.target.encode(), repr(float(c.offset))]
                   + [repr(float(v)) for v in c.slope])
    return buf.getvalue()


def write_cut_pool(cuts: Sequence[Cut], n_edges: int, path) -> None:
    atomic_write_text(path, cuts_to_csv(cuts, n_edges))


def read_cut_pool(path, n_edges: int) -> list[Cut]:
    cuts = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["kind", "target", "offset"] or len(header) != 3 + n_edges:
            raise ValueError(f"{path}:1: cut pool header does not match {n_edges} edges")
        for lineno, row in enumerate(reader, start=2):
            try:
                cuts.append(Cut(CutKind(row[0]), Target.decode(row[1]), float(row[2]),
                                np.array([float(v) for v in row[3:]])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return cuts

