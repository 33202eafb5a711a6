import numpy as np
import pytest

from rqle.sim import Scheme, SimSpec, generate_instance


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def scheme_gene():
    def make(scheme, b=100.0, phi=0.0, side="none", rep=0, seed=11):
        return generate_instance(SimSpec(Scheme(scheme), b, phi, side, 0.0, 1, seed), rep)
    return make


def pytest_terminal_summary(terminalreporter):
    import sys
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "REPORT", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
