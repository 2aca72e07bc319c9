import pytest
from hypothesis import HealthCheck, settings

from stvs.netmodel import RESIDUAL_TOL, residual_log
from stvs.optimizer import optimize
from stvs.scenario import load_bundled
from stvs.simulator import BASELINE, baseline_tunings, run_simulation

# derandomized so that repeated suite runs are identical
settings.register_profile("stvs", deadline=None, derandomize=True, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("stvs")

ACCEPTANCE = []


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> str:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append((number, line))
    return line


@pytest.fixture(scope="session")
def two_device():
    return load_bundled("two_device")


@pytest.fixture(scope="session")
def ieee14():
    return load_bundled("ieee14_ibr")


@pytest.fixture(scope="session")
def two_device_opt(two_device):
    return optimize(two_device)


@pytest.fixture(scope="session")
def ieee14_opt(ieee14):
    return optimize(ieee14)


@pytest.fixture(scope="session")
def two_device_proposed(two_device, two_device_opt):
    tun = two_device_opt.tunings
    f = two_device.faults[0]
    return run_simulation(two_device, tun.virtual, tun.presets_for(f.id), f)


@pytest.fixture(scope="session")
def two_device_baseline(two_device):
    f = two_device.faults[0]
    return run_simulation(two_device, baseline_tunings(two_device), None, f, control=BASELINE)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
    terminalreporter.write_line(
        f"network solves: {residual_log.count}, worst residual {residual_log.worst:.3e} (limit {RESIDUAL_TOL:g})")


def pytest_sessionfinish(session, exitstatus):
    if residual_log.worst > RESIDUAL_TOL:
        session.exitstatus = 1
