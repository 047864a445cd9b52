import re

import numpy as np
import pytest

from motioncorr.phantom import PhantomSpec, make_phantom


@pytest.fixture(scope="session")
def phantom64():
    return make_phantom(PhantomSpec(seed=7, dims=(64, 64, 16)))


@pytest.fixture(scope="session")
def phantom_slice(phantom64):
    return phantom64.data[8].astype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._acceptance_lines = {}


@pytest.fixture
def record_acceptance(request):
    """Record one pass/fail line for an acceptance criterion."""

    def record(number, title, ok, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        request.config._acceptance_lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    ran = set()
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m:
                ran.add(int(m.group(1)))
    if not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ran):
        terminalreporter.write_line(lines.get(n, f"criterion {n:2d} FAIL  did not complete (see errors above)"))
