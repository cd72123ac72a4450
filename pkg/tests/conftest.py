import random
from collections import OrderedDict

import pytest

from nothink_rerank.backend import MockBackend, fixture_from_qrels
from nothink_rerank.core import Candidate, Document, Query

_CRITERIA: "OrderedDict[str, list]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    name = getattr(report, "criterion", None)
    if name is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        outcome = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _CRITERIA.setdefault(name, []).append(outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _CRITERIA.items():
        if "FAIL" in outcomes:
            verdict = "FAIL"
        elif "PASS" in outcomes:
            verdict = "PASS"
        else:
            verdict = "SKIP"
        terminalreporter.write_line(f"{verdict}  {name}")


def make_benchmark(n_queries=50, n_docs=20, max_grade=3, seed=0):
    """Synthetic graded benchmark: queries, corpus, qrels and a shuffled first-stage run."""
    rng = random.Random(seed)
    queries, corpus, qrels, candidates = {}, {}, {}, {}
    for q in range(n_queries):
        qid = f"q{q}"
        queries[qid] = Query(qid, f"synthetic query {q}")
        grades = [rng.randint(0, max_grade) for _ in range(n_docs)]
        if max(grades) == 0:
            grades[rng.randrange(n_docs)] = max_grade
        dids = [f"{qid}d{i}" for i in range(n_docs)]
        for did in dids:
            corpus[did] = Document(did, f"text of {did}")
        qrels[qid] = dict(zip(dids, grades))
        order = dids[:]
        rng.shuffle(order)
        candidates[qid] = [Candidate(qid, did, r, float(n_docs - r)) for r, did in enumerate(order, 1)]
    return queries, corpus, qrels, candidates


@pytest.fixture
def benchmark():
    return make_benchmark()


@pytest.fixture
def small_benchmark():
    return make_benchmark(n_queries=5, n_docs=8, seed=3)


@pytest.fixture
def oracle_backend(benchmark):
    _, _, qrels, _ = benchmark
    return MockBackend(fixture_from_qrels(qrels))
