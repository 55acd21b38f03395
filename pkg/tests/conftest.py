import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def default_grid():
    """Full 9x11 grid identified on the default surrogate (a few seconds)."""
    from airpath_mpc.identification import build_grid

    return build_grid()


@pytest.fixture(scope="session")
def default_fb_grids(default_grid):
    from airpath_mpc.fb_mpc import FbGrids, FbMpcConfig

    return FbGrids(default_grid, FbMpcConfig())


_ACCEPTANCE = pytest.StashKey()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
