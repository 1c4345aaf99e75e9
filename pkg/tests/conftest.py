import os
import sys
import time

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from masklab.experiment import corpus_from_manifest, desk_manifest, train_policy  # noqa: E402

# criterion number -> (title, [outcomes])
CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = CRITERIA.setdefault(n, (title, []))
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry[1].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, results = CRITERIA[n]
        verdict = "PASS" if results and all(results) else "FAIL"
        tr.write_line(f"criterion {n:2d} {verdict}  {title}")


@pytest.fixture(scope="session")
def desk():
    m = desk_manifest()
    return m, corpus_from_manifest(m)


@pytest.fixture(scope="session")
def meta_phi(desk):
    """Meta policy trained with the desk recipe, plus its wall time."""
    m, c = desk
    t0 = time.time()
    phi = train_policy("meta", c, m, int(m.get("seed", 0)))
    return phi, time.time() - t0


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The desk manifest run end to end: ``(out_dir, reports, seconds)``."""
    from masklab.experiment import run_experiment
    out = tmp_path_factory.mktemp("desk")
    t0 = time.time()
    reports = run_experiment(desk_manifest(), str(out))
    return out, reports, time.time() - t0
