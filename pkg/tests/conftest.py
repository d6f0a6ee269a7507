import os
import sys
import time

import pytest

sys.path.insert(0, os.path.dirname(__file__))

CRITERIA = {
    1: "gradient suite",
    2: "ODE oracle",
    3: "reduction chain",
    4: "FLOP accounting",
    5: "training comparison",
    6: "influence suite",
    7: "distillation suite",
    8: "persistence and determinism",
}

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = report.user_properties
    n = dict(props).get("criterion")
    if n:
        details = [v for k, v in props if k == "detail"]
        _outcomes.setdefault(n, []).append((report.nodeid.split("::")[-1], report.outcome, details))


@pytest.fixture(autouse=True)
def _tag_criterion(request):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        request.node.user_properties.append(("criterion", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            terminalreporter.write_line(f"criterion {n} ({title}): NOT RUN")
            continue
        failed = [name for name, outcome, _ in results if outcome != "passed"]
        status = "PASS" if not failed else "FAIL"
        detail = f"{len(results) - len(failed)}/{len(results)} checks" + (f"; failed: {', '.join(failed)}" if failed else "")
        terminalreporter.write_line(f"criterion {n} ({title}): {status} [{detail}]")
        for _, _, details in results:
            for line in details:
                terminalreporter.write_line(f"    {line}")


class MicroRuns:
    """Micro-config pre-training runs shared across tests, trained once per session."""

    def __init__(self):
        from iiet.experiments import micro_corpus

        self.corpus = micro_corpus()
        self.results = {}
        self.seconds = {}

    def get(self, solver: str, seed: int):
        from iiet.experiments import pretrain

        key = solver, seed
        if key not in self.results:
            t0 = time.perf_counter()
            self.results[key] = pretrain(solver, seed, self.corpus)
            self.seconds[key] = time.perf_counter() - t0
        return self.results[key]


@pytest.fixture(scope="session")
def micro_runs():
    return MicroRuns()
