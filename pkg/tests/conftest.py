import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from stochbenders.model import t1_instance  # noqa: E402

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def report_criterion(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def t1():
    return t1_instance()


def pair_design(inst, open_pairs):
    """0/1 design opening the edges named by (tail, head) pairs."""
    idx = inst.network.edge_index()
    z = np.zeros(inst.n_edges)
    for pair in open_pairs:
        z[idx[tuple(pair)]] = 1.0
    return z


# T1 edges by name: e1 = (1,2), e2 = (2,3), e3 = (1,3)
T1_EDGES = {"e1": (1, 2), "e2": (2, 3), "e3": (1, 3)}


def t1_design(inst, e1=0, e2=0, e3=0):
    flags = {"e1": e1, "e2": e2, "e3": e3}
    return pair_design(inst, [T1_EDGES[k] for k, v in flags.items() if v])


def t1_vector(inst, values):
    """Per-edge values listed as (e1, e2, e3), reordered to the instance's edge order."""
    idx = inst.network.edge_index()
    out = np.zeros(inst.n_edges)
    for name, v in zip(("e1", "e2", "e3"), values):
        out[idx[T1_EDGES[name]]] = v
    return out
