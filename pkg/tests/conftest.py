import re
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fflogo.synth import CorpusSpec, write_corpus  # noqa: E402

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_outcomes: dict[int, tuple[str, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 4-pair corpus on disk, shared by CLI and benchmark tests."""
    out = tmp_path_factory.mktemp("corpus")
    write_corpus(CorpusSpec(pairs=4, base_points=8000, seed=3), out)
    return out


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes[n] = (m.group(2).replace("_", " "), "PASS" if report.outcome == "passed" else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        name, status = _outcomes[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {name}")
