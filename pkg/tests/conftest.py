import numpy as np
import pytest

from quanta_burst.core_model import SensorSpec


@pytest.fixture
def spad():
    """SPAD with tau = 10 us, eta = 0.23, 7.5 cps dark counts."""
    return SensorSpec(kind="spad", frame_exposure_s=1e-5, pde=0.23, dcr_cps=7.5)


@pytest.fixture
def spad_ideal():
    return SensorSpec(kind="spad", frame_exposure_s=1e-5, pde=0.23, dcr_cps=0.0)


@pytest.fixture
def conv():
    return SensorSpec(kind="conventional", frame_exposure_s=1e-3, pde=0.64, dark_current_eps=1.0,
                      read_noise_e=2.4, bit_depth=10, full_well_e=10_000)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def _report(number: int, name: str, ok: bool, detail: str):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[k])
