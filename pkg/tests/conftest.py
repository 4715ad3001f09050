import os
from pathlib import Path

import numpy as np
import pytest

from graphprompt.graph import Graph, GraphCollection, SyntheticSpec, generate_synthetic

DATA_ENV = "GRAPHPROMPT_DATA"

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    num = getattr(report, "criterion", None)
    if num is None:
        return
    entry = _CRITERIA.setdefault(num[0], {"title": num[1], "ok": True, "detail": []})
    if report.outcome != "passed":
        entry["ok"] = False
        crash = getattr(report.longrepr, "reprcrash", None)
        msg = crash.message if crash is not None else str(report.longrepr)
        entry["detail"].append(msg.strip().splitlines()[0] if msg.strip() else report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        rep.criterion = (marker.args[0], marker.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        line = f"{'PASS' if e['ok'] else 'FAIL'} criterion {num}: {e['title']}"
        if not e["ok"] and e["detail"]:
            line += f"  [{e['detail'][0][:160]}]"
        terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# shared fixtures
# ---------------------------------------------------------------------------

def path_graph(n: int = 3, dim: int = 1) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)], features=np.ones((n, dim)))


def complete_graph(n: int = 4, dim: int = 1) -> Graph:
    return Graph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)], features=np.ones((n, dim)))


def random_graph(n: int, p: float, rng, dim: int = 3) -> Graph:
    iu = np.triu_indices(n, 1)
    keep = rng.random(iu[0].shape[0]) < p
    edges = np.column_stack([iu[0][keep], iu[1][keep]])
    return Graph.from_edges(n, edges, features=rng.standard_normal((n, dim)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synthetic() -> GraphCollection:
    spec = SyntheticSpec(num_graphs=24, nodes_per_graph=(52, 60), edge_prob=0.15, feature_dim=5,
                         node_class_count=3, graph_class_count=2)
    return generate_synthetic(spec, 7, name="smallsyn")


def data_dir() -> Path | None:
    d = os.environ.get(DATA_ENV)
    return Path(d) if d else None
