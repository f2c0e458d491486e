import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from proxor import SelectedSample

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")

_ACCEPTANCE = {}


def random_binary_sample(rng, n=400, d=0):
    """Binary A, Y, Z, W sample with every stratum populated."""
    while True:
        u = (rng.random(n) < 0.5).astype(float)
        a = (rng.random(n) < 0.3 + 0.4 * u).astype(float)
        y = (rng.random(n) < 0.2 + 0.1 * a + 0.2 * u).astype(float)
        z = (rng.random(n) < 0.15 + 0.1 * a + 0.6 * u).astype(float)
        w = (rng.random(n) < 0.15 + 0.1 * y + 0.6 * u).astype(float)
        x = rng.integers(0, 2, (n, d)).astype(float) if d else None
        s = SelectedSample(a, y, z, w, x)
        cells = [np.sum((a == i) & (y == j)) for i in (0, 1) for j in (0, 1)]
        if min(cells) >= 5:
            return s


def well_posed_sample(rng, n=400):
    """Random binary sample on which both saturated bridges fit and every
    plug-in ratio has positive components."""
    from proxor import SaturatedBinary, estimate_pdr, estimate_pipw, estimate_por, solve_h, solve_q
    from proxor.errors import ProxorError

    while True:
        s = random_binary_sample(rng, n)
        try:
            q, h = solve_q(s, SaturatedBinary()), solve_h(s, SaturatedBinary())
            estimate_pipw(s, q), estimate_por(s, h), estimate_pdr(s, q, h)
        except ProxorError:
            continue
        return s, q, h


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        _ACCEPTANCE[props["criterion"]] = (report.outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[k]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {k:>2}: {status}  {detail}")
