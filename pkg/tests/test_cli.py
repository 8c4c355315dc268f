import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from stochbenders.cli import BENCH_FIELDS, main, write_report
from stochbenders.model import write_instance

from conftest import t1_design


@pytest.fixture
def t1_file(t1, tmp_path):
    path = tmp_path / "t1.json"
    write_instance(t1, path)
    return path


def _record(out):
    return json.loads((out / "record.json").read_text())


def test_generate_is_reproducible(tmp_path):
    args = ["generate", "--nodes", "10", "--commodities", "5", "--scenarios", "10", "--seed", "1"]
    assert main(args + ["-o", str(tmp_path / "a.json")]) == 0
    assert main(args + ["-o", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    cfg = json.loads((tmp_path / "a.run-config.json").read_text())
    assert cfg["command"] == "generate" and cfg["options"]["seed"] == 1


def test_solve_t1(t1, t1_file, tmp_path):
    out = tmp_path / "run"
    rc = main(["solve", "--method", "det-multi", "--instance", str(t1_file), "--epsilon", "0.01",
               "--out", str(out)])
    assert rc == 0
    rec = _record(out)
    assert rec["gap"] <= 0.01
    assert np.array_equal(np.array(rec["z"], float), t1_design(t1, 1, 1, 1))
    assert (out / "trace.csv").read_text().startswith("outer_iter,time_s,lower,upper,gap")
    assert json.loads((out / "design.json").read_text()) == [1, 2, 3]


def test_full_rate_stochastic_matches_deterministic(t1_file, tmp_path):
    common = ["--instance", str(t1_file), "--seed", "7"]
    assert main(["solve", "--method", "stoch-single", "--sample-rate", "1.0", *common,
                 "--out", str(tmp_path / "s")]) == 0
    assert main(["solve", "--method", "det-single", *common, "--out", str(tmp_path / "d")]) == 0
    s, d = _record(tmp_path / "s"), _record(tmp_path / "d")
    for key in ("z", "lower_bound", "upper_bound", "gap"):
        assert s[key] == d[key]


def test_evaluate_reproduces_true_cost(tmp_path, capsys):
    inst = tmp_path / "g.json"
    assert main(["generate", "--nodes", "6", "--commodities", "2", "--scenarios", "4",
                 "--seed", "3", "-o", str(inst)]) == 0
    out = tmp_path / "run"
    assert main(["solve", "--instance", str(inst), "--method", "stoch-single", "--seed", "2",
                 "--time-limit", "60", "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--instance", str(inst), "--design", str(out / "design.json"),
                 "-o", str(tmp_path / "eval.json")]) == 0
    shown = json.loads(capsys.readouterr().out)
    rec = _record(out)
    assert shown["true_cost"] == pytest.approx(rec["true_cost"], rel=1e-9)
    doc = json.loads((tmp_path / "eval.json").read_text())
    assert len(doc["scenario_costs"]) == 4


def test_run_config_replays(tmp_path, t1_file):
    out = tmp_path / "a"
    assert main(["solve", "--instance", str(t1_file), "--method", "stoch-kcut", "--seed", "5",
                 "--sample-rate", "0.5", "--out", str(out)]) == 0
    cfg = json.loads((out / "run-config.json").read_text())
    assert cfg["solve_options"]["seed"] == 5 and cfg["solve_options"]["method"] == "stoch-kcut"
    argv = list(cfg["argv"])
    argv[argv.index("--out") + 1] = str(tmp_path / "b")
    assert main(argv) == 0
    a, b = _record(out), _record(tmp_path / "b")
    for key in ("z", "lower_bound", "upper_bound", "true_cost", "outer_iterations"):
        assert a[key] == b[key]


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["solve"]) == 2
    assert main(["solve", "--instance", "x.json", "--method", "bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_thread_cap_is_a_usage_error(t1_file, tmp_path, monkeypatch):
    monkeypatch.setenv("SB_THREADS", "zero")
    assert main(["solve", "--instance", str(t1_file), "--out", str(tmp_path / "o")]) == 2
    monkeypatch.setenv("SB_THREADS", "2")
    assert main(["solve", "--instance", str(t1_file), "--method", "det-single",
                 "--out", str(tmp_path / "o")]) == 0


def test_validation_errors_exit_3(t1_file, tmp_path, capsys):
    assert main(["solve", "--instance", str(tmp_path / "missing.json")]) == 3
    doc = json.loads(t1_file.read_text())
    doc["demands"] = [[[5, 0, -4]]]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["solve", "--instance", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert "unbalanced demand, commodity 1, scenario 1" in capsys.readouterr().err
    assert main(["solve", "--instance", str(t1_file), "--sample-rate", "2",
                 "--out", str(tmp_path / "o")]) == 3
    assert main(["solve", "--instance", str(t1_file), "--gamma-override", "-1",
                 "--out", str(tmp_path / "o")]) == 3


def test_solve_failures_exit_4(t1, t1_file, tmp_path, capsys):
    design = tmp_path / "closed.json"
    design.write_text("[]")
    assert main(["evaluate", "--instance", str(t1_file), "--design", str(design)]) == 4
    overload = t1.with_scenarios(np.array([[[50.0, 0.0, -50.0]]]))
    path = tmp_path / "over.json"
    write_instance(overload, path)
    assert main(["solve", "--instance", str(path), "--method", "det-single",
                 "--out", str(tmp_path / "o")]) == 4
    assert "infeasible" in capsys.readouterr().err


def test_gamma_override(t1_file, tmp_path):
    out = tmp_path / "inf"
    assert main(["solve", "--instance", str(t1_file), "--method", "det-single",
                 "--gamma-override", "inf", "--out", str(out)]) == 0
    # pure linear costs: the direct edge at 15 plus fixed 10 beats 10 + 12 on the two-hop path
    assert _record(out)["true_cost"] == pytest.approx(min(10 + 15, 2 + 10), abs=1e-6)


def _write_rows(path, rows, fields=BENCH_FIELDS):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _row(n, method, gap, runtime, iid="x"):
    return {"instance_id": iid, "n_nodes": n, "n_commodities": 2, "n_scenarios": 3,
            "method": method, "seed": 0, "runtime_s": runtime, "gap": gap, "lower": 1.0,
            "upper": 1.0, "converged": "true"}


def test_report_single_row(tmp_path):
    _write_rows(tmp_path / "r.csv", [_row(10, "det-single", 0.03, 12.5)])
    header, table = write_report([tmp_path / "r.csv"])
    assert header == ["n_nodes", "det-single:runtime_s", "det-single:gap"]
    assert table == [[10, 12.5, 0.03]]


def test_report_means_and_order(tmp_path):
    _write_rows(tmp_path / "a.csv", [_row(30, "stoch-single", 0.04, 10), _row(10, "det-single", 0.0, 1)])
    _write_rows(tmp_path / "b.csv", [_row(30, "stoch-single", 0.06, 20),
                                     _row(30, "det-single/root-none", 0.1, 5)])
    header, table = write_report([tmp_path / "a.csv", tmp_path / "b.csv"])
    assert header[1:] == ["det-single:runtime_s", "det-single:gap",
                          "det-single/root-none:runtime_s", "det-single/root-none:gap",
                          "stoch-single:runtime_s", "stoch-single:gap"]
    assert [line[0] for line in table] == [10, 30]
    assert table[1][5] == pytest.approx(15.0) and table[1][6] == pytest.approx(0.05)
    assert np.isnan(table[0][5])


def test_report_rejects_mixed_schema(tmp_path, capsys):
    _write_rows(tmp_path / "good.csv", [_row(10, "det-single", 0.0, 1)])
    _write_rows(tmp_path / "odd.csv", [{"a": 1}], fields=["a"])
    assert main(["report", str(tmp_path / "good.csv"), str(tmp_path / "odd.csv")]) == 3
    assert "odd.csv" in capsys.readouterr().err


def test_bench_and_report_end_to_end(tmp_path, capsys):
    out = tmp_path / "bench"
    rc = main(["bench", "--nodes", "5", "--commodities", "1", "--scenarios", "3",
               "--methods", "det-single", "stoch-single", "det-single/root-none",
               "--replicates", "2", "--time-limit", "20", "--out", str(out)])
    assert rc == 0
    with open(out / "results.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == BENCH_FIELDS
        rows = list(reader)
    assert len(rows) == 6
    assert {r["instance_id"] for r in rows} == {"n5-k1-r3-i0", "n5-k1-r3-i1"}
    assert (out / "run-config.json").exists()
    assert main(["report", str(out / "results.csv"), "-o", str(tmp_path / "table.csv")]) == 0
    printed = capsys.readouterr().out
    assert "det-single/root-none:gap" in printed
    assert (tmp_path / "table.csv").read_text().startswith("n_nodes,")


def test_bench_rejects_unknown_method(tmp_path):
    assert main(["bench", "--nodes", "5", "--methods", "det-fancy", "--out", str(tmp_path)]) == 3
    assert main(["bench", "--nodes", "5", "--replicates", "0", "--out", str(tmp_path)]) == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stochbenders", "generate", "--nodes", "4",
                           "--commodities", "1", "--scenarios", "2", "-o", str(tmp_path / "g.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "g.json").exists()
