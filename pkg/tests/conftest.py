import pytest
from hypothesis import HealthCheck, settings

from bhplab.forms import assemble, drift, laplacian
from bhplab.geometry import box, build_grid, preset

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile(
    "stress", deadline=None, max_examples=400, suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def slit16():
    return build_grid(preset("slit_square"), 1 / 16)


@pytest.fixture(scope="session")
def slit32():
    return build_grid(preset("slit_square"), 1 / 32)


@pytest.fixture(scope="session")
def square32():
    return build_grid(preset("square"), 1 / 32)


@pytest.fixture(scope="session")
def lap_slit32(slit32):
    return assemble(slit32, laplacian())


@pytest.fixture(scope="session")
def drift_slit32(slit32):
    return assemble(slit32, drift(0.5))


@pytest.fixture(scope="session")
def lap_square32(square32):
    return assemble(square32, laplacian())


@pytest.fixture(scope="session")
def disk_grid():
    return build_grid(box(-1.0, -1.0, 1.0, 1.0), 1 / 32)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """``check(number, ok, detail)`` records a PASS/FAIL line and asserts ``ok``."""

    def check(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
