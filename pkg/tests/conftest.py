import numpy as np
import pytest

from riverda.river_model import BoundaryForcing, build_geometry, normal_rating_curve


@pytest.fixture(scope="session")
def small_geometry():
    """10 km prismatic reach, 50 cells of 200 m, three zones, no bank undulation."""
    return build_geometry(length=10_000.0, cell_count=50, upstream_bed=10.0, slope=5e-4,
                          main_width=100.0, bank_height=3.0, floodplain_width=600.0,
                          zone_edges=[0.0, 3000.0, 7000.0, 10_000.0],
                          zone_ks=[40.0, 40.0, 40.0], dt=10.0)


@pytest.fixture(scope="session")
def small_forcing(small_geometry):
    qs, ws = normal_rating_curve(small_geometry, 3000.0)
    t = np.array([0.0, 6 * 3600.0, 12 * 3600.0, 48 * 3600.0])
    q = np.array([200.0, 800.0, 300.0, 300.0])
    return BoundaryForcing(tuple(t), tuple(q), qs, ws)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request):
    """Record one summary line per acceptance criterion, printed at session end."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
