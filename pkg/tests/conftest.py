import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from parametrix_spde import coeff_fields as cf

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion id -> (name, passed, detail), filled by the acceptance tests
ACCEPTANCE = {}


def record(cid, name, passed, detail=""):
    ACCEPTANCE[cid] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid:2d}: {'PASS' if ok else 'FAIL'}  {name}"
                                    + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def tanh_field():
    prof = cf.random_breakpoints(4, 0.25, 1.0, 1.3, seed=7)
    return cf.piecewise_field(prof, cf.TanhDiagonal(0.25), lam=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
