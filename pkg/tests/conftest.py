import numpy as np
import pytest

from ddifuse.graph import TripleSet
from ddifuse.synth import WorldSpec, generate


def random_triples(n_drugs, n_rel, n_edges, seed=0):
    """Distinct, loop-free random triples."""
    rng = np.random.default_rng(seed)
    seen, rows = set(), []
    while len(rows) < n_edges:
        h, t = rng.integers(0, n_drugs, 2)
        r = int(rng.integers(0, n_rel))
        if h == t or (h, r, t) in seen:
            continue
        seen.add((h, r, t))
        rows.append((int(h), r, int(t)))
    return TripleSet(np.asarray(rows), n_drugs, n_rel)


@pytest.fixture(scope="session")
def small_world():
    return generate(WorldSpec(num_drugs=60, num_relations=4, latent_dim=4, feature_dim=8,
                              edge_threshold=2.0, seed=3))


@pytest.fixture(scope="session")
def kg50():
    return random_triples(50, 3, 150, seed=1)


# -- acceptance verdict lines ------------------------------------------------

VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def measured(request):
    """Dict of measured values shown on the criterion's verdict line."""
    request.node.measured = {}
    return request.node.measured


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker and call.when == "call":
        number, title = marker.args
        detail = ", ".join(f"{k}={v}" for k, v in getattr(item, "measured", {}).items())
        status = "PASS" if report.passed else "FAIL"
        item.config.stash[VERDICTS][number] = f"{status}  criterion {number:>2}: {title}" + (
            f"  [{detail}]" if detail else "")
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
