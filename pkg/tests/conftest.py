import numpy as np
import pytest
from hypothesis import settings

from pydmobilenet.tensor import make_rng

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def rand(rng):
    def draw(*shape, dtype=np.float64):
        return rng.standard_normal(shape).astype(dtype)
    return draw


# -- acceptance summary ------------------------------------------------------------

_CRITERIA: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        cid, title = marks
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = ""
        if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2].removeprefix("Skipped: ")
        _CRITERIA.setdefault(cid, []).append((outcome, title, detail))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: (int("".join(ch for ch in c if ch.isdigit())), c)):
        for outcome, title, detail in _CRITERIA[cid]:
            line = f"criterion {cid:<4} {outcome}  {title}"
            terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
