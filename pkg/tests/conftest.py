import math

import numpy as np
import pytest
from scipy import integrate


def lorentzian_fermi_convolution(eps, gamma, kT):
    """Direct quadrature of a Lorentzian level (HWHM gamma/2) against the Fermi function.

    Independent of the digamma route: the integral runs over the level
    energy with the Lorentzian as an explicit weight.
    """
    hwhm = 0.5 * gamma

    def integrand(u):
        # substitute x = eps + hwhm * tan(u) so the Lorentzian weight becomes du/pi
        x = eps + hwhm * math.tan(u)
        return 0.5 * (1.0 - math.tanh(0.5 * x / kT)) / math.pi

    value, _ = integrate.quad(integrand, -math.pi / 2, math.pi / 2, epsabs=1e-13, epsrel=1e-12, limit=400)
    return value


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


# -- acceptance reporting -----------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _criteria[number] = (title, rep.outcome.upper(), rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcome, seconds, detail = _criteria[number]
        line = f"{outcome:6s} {number:2d}  {title} ({seconds:.1f} s)"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
