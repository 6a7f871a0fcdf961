"""Acceptance checks 1-11 at the shipped configuration.

Run with ``pytest tests/test_acceptance.py`` (or ``python3 tests/test_acceptance.py``);
the terminal summary prints one PASS/FAIL line per criterion.
"""
import subprocess
import sys
import time

import pytest

from conftest import record
from parametrix_spde import suites
from parametrix_spde.config import TAG_H1, ExperimentConfig, loads
from parametrix_spde.errors import ConfigError
from parametrix_spde.mild_solution import TAG_ALPHA, TAG_D3

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def ctx():
    return suites.Context(ExperimentConfig())


@pytest.fixture(scope="module")
def fits(ctx):
    return suites.aronson_fits(ctx)


@pytest.fixture(scope="module")
def mild(ctx):
    return suites.MildSetup(ctx)


def _check(res, detail):
    record(res.id, res.name, res.passed, detail)
    assert res.passed, f"criterion {res.id} ({res.name}): {res.metrics} {res.note}"


def test_criterion_01_parametrix_exactness(ctx):
    r = suites.criterion_1(ctx)
    _check(r, f"rel={r.metrics['value_rel']:.2e} mass={r.metrics['mass_err']:.2e}")


def test_criterion_02_oracle_agreement(ctx):
    t0 = time.perf_counter()
    r = suites.criterion_2(ctx)
    dt = time.perf_counter() - t0
    r.passed = r.passed and dt <= 60.0
    _check(r, f"rel={r.metrics['rel_linf']:.2e} in {dt:.0f}s")


def test_criterion_03_aronson_envelopes(ctx, fits):
    r = suites.criterion_3(ctx, fits)
    drift = max(f["refinement_ratio"] for f in r.metrics["fits"].values()) - 1
    _check(r, f"max drift={drift:.3%}")


def test_criterion_04_time_roughness(ctx, fits):
    r = suites.criterion_4(ctx, fits)
    _check(r, f"max ratio={r.metrics['max_ratio']:.3f}")


def test_criterion_05_series_control(ctx):
    r = suites.criterion_5(ctx)
    _check(r, f"max m_stop={r.metrics['max_m_stop']}")


def test_criterion_06_singular_quadrature(ctx):
    r = suites.criterion_6(ctx)
    _check(r, f"quad={r.metrics['quadrature_abs']:.1e} interp={r.metrics['interpolation_rel']:.1e}")


def test_criterion_07_malliavin_layer(ctx):
    r = suites.criterion_7(ctx)
    _check(r, f"first variation rel={r.metrics['first_variation_rel']:.1e}")


def test_criterion_08_mild_cross_validation(ctx, mild):
    r = suites.criterion_8(ctx, mild)
    _check(r, f"max z={max(r.metrics['z_mean'] + r.metrics['z_second']):.1e}")


def test_criterion_09_weak_residual(ctx, mild):
    r = suites.criterion_9(ctx, mild)
    m = r.metrics
    _check(r, f"det ratio={m['deterministic']['ratio']:.3g} random z={m['random']['z']:.3g}")


def test_criterion_10_small_time_decay(ctx, mild):
    r = suites.criterion_10(ctx, mild)
    _check(r, f"eta={r.metrics['slope']:.3f}")


GATES = [
    ("[deterministic]\nkappas = [0.25, 0.6]\n", TAG_H1),
    ("[mild]\ncoef_amp = 0.5\nkappa = 0.5\n", TAG_H1),
    ("[mild]\np = 14.0\nq = 6.0\n", TAG_D3),
    ("[mild]\np = 7.0\nq = 7.0\n", TAG_D3),
    ("[mild]\nalpha = 0.65\n", TAG_ALPHA),
    ("[mild]\nalpha = 0.86\n", TAG_ALPHA),
]

SMALL_RUN = """[run]
suite = "malliavin"
seed = 11

[malliavin]
n_paths = 4
step = 0.004
n_levels = 12
"""


def _gate_tag(text):
    try:
        loads(text)
    except ConfigError as exc:
        return exc.tag
    return None


def test_criterion_11_gates_and_determinism(tmp_path):
    tags = [_gate_tag(text) for text, _ in GATES]
    gates_ok = tags == [tag for _, tag in GATES] and _gate_tag("") is None
    cfg = tmp_path / "small.toml"
    cfg.write_text(SMALL_RUN)
    blobs = []
    for name, workers in (("a", "0"), ("b", "2")):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "parametrix_spde", "run", "--config", str(cfg),
                               "--out", str(out), "--workers", workers],
                              capture_output=True, text=True)
        assert proc.returncode in (0, 1), proc.stderr
        blobs.append((out / "report.json").read_bytes())
    same = blobs[0] == blobs[1]
    record(11, "gate correctness and determinism", gates_ok and same,
           f"tags={'ok' if gates_ok else tags} identical={same}")
    assert gates_ok, tags
    assert same


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
