import re

import pytest

from cxrbench.synthetic import generate_synthetic

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        # setup errors count as failures too
        prev = _CRITERIA.get(n, ("", "passed"))[1]
        outcome = "failed" if "failed" in (prev, report.outcome) else report.outcome
        _CRITERIA[n] = (getattr(report, "criterion_title", ""), outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    doc = (item.function.__doc__ or "").strip().splitlines()
    rep.criterion_title = doc[0] if doc else item.name


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcome = _CRITERIA[n]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}")


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """16 images per class (4 of them test), 32 px, easy."""
    out = tmp_path_factory.mktemp("tiny")
    entries = generate_synthetic(out, 16, 32, seed=3, difficulty=0.0, n_test_per_class=4)
    return out, entries
