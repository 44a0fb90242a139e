import pytest

from rough_flow.heat import eigendecompose
from rough_flow.mesh import build_box_surface, build_icosphere, build_polar_grid
from rough_flow.metric import pullback_embedding, witch_hat_metric


def _geometry(mesh, g):
    return mesh, g, eigendecompose(mesh, g)


@pytest.fixture(scope="session")
def ico2():
    m = build_icosphere(2)
    return _geometry(m, pullback_embedding(m))


@pytest.fixture(scope="session")
def ico3():
    m = build_icosphere(3)
    return _geometry(m, pullback_embedding(m))


@pytest.fixture(scope="session")
def box4():
    m = build_box_surface(4)
    return _geometry(m, pullback_embedding(m))


@pytest.fixture(scope="session")
def box6():
    m = build_box_surface(6)
    return _geometry(m, pullback_embedding(m))


@pytest.fixture(scope="session")
def witch():
    m = build_polar_grid(16, 32)
    return _geometry(m, witch_hat_metric(m))


@pytest.fixture(scope="session")
def ico4():
    m = build_icosphere(4)
    return _geometry(m, pullback_embedding(m))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
