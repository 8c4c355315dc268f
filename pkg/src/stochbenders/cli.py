"""Command line: generate, solve, evaluate, bench and report."""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .driver import METHODS, SolveOptions, solve
from .master import MasterInfeasible
from .model import (GenConfig, GenerationError, InstanceFormatError, InstanceValidationError,
                    atomic_write_text, generate_synthetic_instance, read_design, read_instance,
                    write_design, write_instance)
from .subproblem import InfeasibleScenario, NumericalError, true_cost

EXIT_USAGE, EXIT_VALIDATION, EXIT_SOLVE = 2, 3, 4

BENCH_FIELDS = ["instance_id", "n_nodes", "n_commodities", "n_scenarios", "method", "seed",
                "runtime_s", "gap", "lower", "upper", "converged"]


class ValidationFailure(Exception):
    pass


class SolveFailure(Exception):
    pass


def _write_run_config(path: Path, command: str, argv, args: argparse.Namespace, extra=None):
    doc = {"command": command, "argv": list(argv), "version": __version__,
           "options": {k: v for k, v in vars(args).items() if k != "func"}}
    if extra:
        doc.update(extra)
    atomic_write_text(path, json.dumps(doc, indent=1, default=str) + "\n")


def _load(path, gamma_override=None):
    try:
        inst = read_instance(path)
    except (InstanceFormatError, InstanceValidationError, OSError) as exc:
        raise ValidationFailure(f"{path}: {exc}") from None
    if gamma_override is not None:
        if not gamma_override > 0:
            raise ValidationFailure("gamma must be positive or infinite")
        inst = inst.with_gamma(gamma_override)
    return inst


def _options(args) -> SolveOptions:
    try:
        return SolveOptions(method=args.method, sample_rate=args.sample_rate, epsilon=args.epsilon,
                            alpha_level=args.alpha_level, time_limit=args.time_limit,
                            root_cuts=args.root_cuts, root_cap=args.root_cap, k=args.k,
                            seed=args.seed)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args, argv) -> int:
    try:
        cfg = GenConfig(n_nodes=args.nodes, n_commodities=args.commodities,
                        n_scenarios=args.scenarios, knn=args.knn, seed=args.seed,
                        gamma=args.gamma, cardinality=args.cardinality,
                        charge_existing=args.charge_existing)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    try:
        inst = generate_synthetic_instance(cfg)
    except GenerationError as exc:
        raise ValidationFailure(str(exc)) from None
    out = Path(args.out)
    write_instance(inst, out, scenario_file=args.scenario_file)
    _write_run_config(out.with_name(out.stem + ".run-config.json"), "generate", argv, args)
    print(f"wrote {out} ({inst.n_nodes} nodes, {inst.n_edges} edges, "
          f"{len(inst.fixed_open)} pre-existing)")
    return 0


def cmd_solve(args, argv) -> int:
    inst = _load(args.instance, args.gamma_override)
    opts = _options(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_config(out / "run-config.json", "solve", argv, args,
                      {"solve_options": opts.to_dict()})
    try:
        record = solve(inst, opts)
    except (NumericalError, MasterInfeasible) as exc:
        raise SolveFailure(str(exc)) from None
    record.write(out / "record.json")
    record.write_trace(out / "trace.csv")
    if record.z is not None:
        write_design(np.array(record.z), out / "design.json")
    print(f"{opts.method}: status={record.status} lower={record.lower_bound:.6g} "
          f"upper={record.upper_bound:.6g} gap={record.gap:.4%} true_cost={record.true_cost:.6g} "
          f"outer={record.outer_iterations} time={record.time_s:.2f}s")
    if record.status in ("infeasible", "unsolved"):
        print(f"no feasible design found ({record.status})", file=sys.stderr)
        return EXIT_SOLVE
    return 0


def cmd_evaluate(args, argv) -> int:
    inst = _load(args.instance, args.gamma_override)
    try:
        z = read_design(args.design, inst)
    except (InstanceFormatError, OSError, json.JSONDecodeError) as exc:
        raise ValidationFailure(f"{args.design}: {exc}") from None
    try:
        total, costs = true_cost(inst, z)
    except InfeasibleScenario as exc:
        print(f"design is infeasible: {exc}", file=sys.stderr)
        return EXIT_SOLVE
    except NumericalError as exc:
        raise SolveFailure(str(exc)) from None
    doc = {"true_cost": total, "fixed_cost": float(inst.fixed_cost @ z),
           "scenario_costs": costs.tolist(),
           "open_edges": [int(e) + 1 for e in np.flatnonzero(z)]}
    if args.out:
        out = Path(args.out)
        atomic_write_text(out, json.dumps(doc, indent=1) + "\n")
        _write_run_config(out.with_name(out.stem + ".run-config.json"), "evaluate", argv, args)
    print(json.dumps({"true_cost": total}))
    return 0


@dataclass
class BenchPlan:
    cells: list[tuple[int, int, int]]
    methods: list[str]
    replicates: int = 1
    time_limit: float = 120.0
    seed: int = 0
    root_cap: int = 20
    sample_rate: float = 0.10
    epsilon: float = 0.01
    out_dir: Path = field(default_factory=lambda: Path("bench"))

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        for label in self.methods:
            parse_method_label(label)
        for cell in self.cells:
            GenConfig(*cell)


def parse_method_label(label: str) -> tuple[str, str | None]:
    """``det-single`` or ``det-single/root-none``: method and optional root-cut mode."""
    method, _, variant = label.partition("/")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if not variant:
        return method, None
    if not variant.startswith("root-") or variant[5:] not in ("none", "single", "multi"):
        raise ValueError(f"unknown method variant {variant!r}")
    return method, variant[5:]


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def run_bench(plan: BenchPlan, log=print) -> list[dict]:
    out = Path(plan.out_dir)
    (out / "instances").mkdir(parents=True, exist_ok=True)
    (out / "records").mkdir(parents=True, exist_ok=True)
    rows = []
    for n, K, R in plan.cells:
        for rep in range(plan.replicates):
            inst_seed = plan.seed * 1000 + rep
            iid = f"n{n}-k{K}-r{R}-i{rep}"
            inst = generate_synthetic_instance(GenConfig(n, K, R, seed=inst_seed))
            write_instance(inst, out / "instances" / f"{iid}.json")
            for label in plan.methods:
                method, root = parse_method_label(label)
                opts = SolveOptions(method=method, time_limit=plan.time_limit, seed=plan.seed,
                                    root_cuts=root or "single", root_cap=plan.root_cap,
                                    sample_rate=plan.sample_rate, epsilon=plan.epsilon)
                rec = solve(inst, opts)
                rec.write(out / "records" / f"{iid}--{label.replace('/', '_')}.json")
                row = {"instance_id": iid, "n_nodes": n, "n_commodities": K, "n_scenarios": R,
                       "method": label, "seed": plan.seed, "runtime_s": repr(rec.time_s),
                       "gap": repr(rec.true_gap), "lower": repr(rec.lower_bound),
                       "upper": repr(rec.true_cost), "converged": str(rec.converged).lower()}
                rows.append(row)
                atomic_write_text(out / "results.csv", _csv_text(rows))
                log(f"{iid} {label}: gap={rec.true_gap:.4%} lower={rec.lower_bound:.6g} "
                    f"upper={rec.true_cost:.6g} time={rec.time_s:.1f}s")
    return rows


def cmd_bench(args, argv) -> int:
    cells = [(n, k, r) for n in args.nodes for k in args.commodities for r in args.scenarios]
    try:
        plan = BenchPlan(cells=cells, methods=args.methods, replicates=args.replicates,
                         time_limit=args.time_limit, seed=args.seed, root_cap=args.root_cap,
                         sample_rate=args.sample_rate, epsilon=args.epsilon,
                         out_dir=Path(args.out))
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    plan.out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_config(plan.out_dir / "run-config.json", "bench", argv, args)
    try:
        run_bench(plan)
    except (NumericalError, MasterInfeasible) as exc:
        raise SolveFailure(str(exc)) from None
    return 0


# ---------------------------------------------------------------------------
# report

def read_results(paths) -> list[dict]:
    rows = []
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != BENCH_FIELDS:
                raise ValueError(f"{path}: columns {reader.fieldnames} do not match the results schema")
            rows.extend(reader)
    return rows


def _method_order(label: str):
    method, root = parse_method_label(label) if "/" in label or label in METHODS else (label, None)
    base = METHODS.index(method) if method in METHODS else len(METHODS)
    return (base, root or "", label)


def write_report(paths) -> tuple[list[str], list[list]]:
    """Mean runtime and gap per (|N|, method): header and rows ordered by |N|."""
    rows = read_results(paths)
    if not rows:
        raise ValueError("no result rows")
    methods = sorted({r["method"] for r in rows}, key=_method_order)
    sizes = sorted({int(r["n_nodes"]) for r in rows})
    header = ["n_nodes"] + [f"{m}:{col}" for m in methods for col in ("runtime_s", "gap")]
    table = []
    for n in sizes:
        line: list = [n]
        for m in methods:
            sel = [r for r in rows if int(r["n_nodes"]) == n and r["method"] == m]
            if sel:
                line.append(float(np.mean([float(r["runtime_s"]) for r in sel])))
                line.append(float(np.mean([float(r["gap"]) for r in sel])))
            else:
                line.extend([math.nan, math.nan])
        table.append(line)
    return header, table


def format_table(header, table) -> str:
    cells = [header] + [[str(line[0])] + [f"{v:.4f}" for v in line[1:]] for line in table]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)


def cmd_report(args, argv) -> int:
    try:
        header, table = write_report(args.results)
    except (ValueError, OSError) as exc:
        raise ValidationFailure(str(exc)) from None
    print(format_table(header, table))
    if args.out:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for line in table:
            w.writerow([line[0]] + [repr(v) for v in line[1:]])
        out = Path(args.out)
        atomic_write_text(out, buf.getvalue())
        _write_run_config(out.with_name(out.stem + ".run-config.json"), "report", argv, args)
    return 0


# ---------------------------------------------------------------------------
# parser

def _gamma(text: str) -> float:
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    return float(text)


def _add_solve_flags(p, time_limit: float):
    p.add_argument("--method", choices=METHODS, default="stoch-single")
    p.add_argument("--sample-rate", type=float, default=0.10)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--alpha-level", type=float, default=0.10,
                   help="significance level of the upper confidence bound")
    p.add_argument("--time-limit", type=float, default=time_limit)
    p.add_argument("--root-cuts", choices=("none", "single", "multi"), default="single")
    p.add_argument("--root-cap", type=int, default=20)
    p.add_argument("--k", type=int, default=None, help="cluster count for k-cut methods")
    p.add_argument("--gamma-override", type=_gamma, default=None)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochbenders",
                                     description="Stochastic Benders decomposition for network design")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic instance")
    g.add_argument("--nodes", type=int, required=True)
    g.add_argument("--commodities", type=int, required=True)
    g.add_argument("--scenarios", type=int, required=True)
    g.add_argument("--knn", type=int, default=6)
    g.add_argument("--gamma", type=_gamma, default=1.0)
    g.add_argument("--cardinality", type=int, default=None)
    g.add_argument("--charge-existing", action="store_true",
                   help="keep construction costs on pre-existing edges")
    g.add_argument("--scenario-file", default=None, help="write demands to this CSV instead")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="solve an instance")
    s.add_argument("--instance", required=True)
    _add_solve_flags(s, 7200.0)
    s.add_argument("-o", "--out", default="run")
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("evaluate", help="true cost of a design over all scenarios")
    e.add_argument("--instance", required=True)
    e.add_argument("--design", required=True, help="JSON array of open edge indices (1-based)")
    e.add_argument("--gamma-override", type=_gamma, default=None)
    e.add_argument("-o", "--out", default=None)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="method comparison on generated instances")
    b.add_argument("--nodes", type=int, nargs="+", required=True)
    b.add_argument("--commodities", type=int, nargs="+", default=[5])
    b.add_argument("--scenarios", type=int, nargs="+", default=[30])
    b.add_argument("--methods", nargs="+", default=["det-single", "stoch-single"],
                   help="method names, optionally suffixed /root-none|/root-single|/root-multi")
    b.add_argument("--replicates", type=int, default=1)
    b.add_argument("--time-limit", type=float, default=120.0)
    b.add_argument("--sample-rate", type=float, default=0.10)
    b.add_argument("--epsilon", type=float, default=0.01)
    b.add_argument("--root-cap", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("-o", "--out", default="bench")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="aggregate bench results by network size")
    r.add_argument("results", nargs="+")
    r.add_argument("-o", "--out", default=None)
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    env_threads = os.environ.get("SB_THREADS")
    if env_threads is not None and (not env_threads.isdigit() or int(env_threads) < 1):
        print(f"SB_THREADS must be a positive integer, got {env_threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, argv)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolveFailure as exc:
        print(f"solve failed: {exc}", file=sys.stderr)
        return EXIT_SOLVE


if __name__ == "__main__":
    sys.exit(main())
