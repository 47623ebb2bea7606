import numpy as np
import pytest

from hatesage.graph import NodeTable, from_edges


@pytest.fixture
def diamond():
    # 0 -> 1, 0 -> 2, 1 -> 3, 2 -> 3, 3 -> 0
    return from_edges([(0, 1), (0, 2), (1, 3), (2, 3), (3, 0)], 4)


def random_graph(rng, n, p):
    adj = rng.random((n, n)) < p
    np.fill_diagonal(adj, False)
    src, dst = np.nonzero(adj)
    return from_edges(np.column_stack([src, dst]), n), adj


def make_table(x, labels, groups=None, kinds=None):
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    groups = np.array(groups if groups is not None else [""] * n, dtype=object)
    return NodeTable(x, labels, groups, [f"f{i}" for i in range(d)], kinds or ["text"] * d)


# acceptance bookkeeping: one PASS/FAIL/SKIP line per criterion
ACCEPTANCE: list[tuple[str, str, str]] = []


def record(criterion, ok, detail="", status=None):
    status = status or ("PASS" if ok else "FAIL")
    ACCEPTANCE.append((criterion, status, detail))
    print(f"[{status}] {criterion}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{status:4}  {name}  {detail}")
