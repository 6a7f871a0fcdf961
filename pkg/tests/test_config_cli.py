import json

import pytest
from hypothesis import given, strategies as st

from parametrix_spde import config as config_mod
from parametrix_spde.cli import (EXIT_CONFIG, EXIT_PASS, STANDARD_PLOTS, Report, emit_plot_data,
                                 main)
from parametrix_spde.config import TAG_H1, ExperimentConfig, dumps, loads
from parametrix_spde.errors import ConfigError
from parametrix_spde.mild_solution import TAG_ALPHA, TAG_D3


@given(seed=st.integers(0, 2 ** 32 - 1), n_paths=st.integers(2, 5000),
       q=st.floats(6.5, 20), dp=st.floats(0.1, 20), suite=st.sampled_from(config_mod.SUITES),
       kappas=st.lists(st.floats(0.0, 0.5), min_size=1, max_size=4))
def test_toml_round_trip(seed, n_paths, q, dp, suite, kappas):
    cfg = config_mod.from_dict({
        "run": {"seed": seed, "suite": suite},
        "deterministic": {"kappas": kappas},
        "mild": {"n_paths": n_paths, "q": q, "p": q + dp},
    })
    back = loads(dumps(cfg))
    assert back == cfg and back.digest() == cfg.digest()


def test_digest_ignores_output_location():
    a = ExperimentConfig(out="a", workers=0)
    b = ExperimentConfig(out="b", workers=3)
    assert a.digest() == b.digest()
    assert a.digest() != ExperimentConfig(seed=1).digest()


def test_sub_seeds_are_stable_and_distinct():
    cfg = ExperimentConfig(seed=5)
    assert cfg.sub_seed("paths") == ExperimentConfig(seed=5).sub_seed("paths")
    assert cfg.sub_seed("paths") != cfg.sub_seed("fine")


@pytest.mark.parametrize("text, tag", [
    ("[deterministic]\nlam = 1.2\n", TAG_H1),
    ("[deterministic]\nkappas = [0.9]\n", TAG_H1),
    ("[mild]\nq = 5.0\n", TAG_D3),
    ("[mild]\np = 6.0\nq = 7.0\n", TAG_D3),
    ("[mild]\nalpha = 0.5\n", TAG_ALPHA),
])
def test_gates_name_the_violated_condition(text, tag):
    with pytest.raises(ConfigError) as exc:
        loads(text)
    assert exc.value.tag == tag
    assert str(exc.value).startswith(tag)


@pytest.mark.parametrize("text", ["[mild]\nn_paths = 'many'\n", "[bogus]\nx = 1\n",
                                  "[run]\nsuite = 'nope'\n", "not toml ="])
def test_malformed_configs_rejected(text):
    with pytest.raises(ConfigError):
        loads(text)


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["list-suites"]) == EXIT_PASS
    assert "mild-solution" in capsys.readouterr().out
    good = tmp_path / "good.toml"
    good.write_text(dumps(ExperimentConfig()))
    assert main(["validate", "--config", str(good)]) == EXIT_PASS
    bad = tmp_path / "bad.toml"
    bad.write_text("[mild]\nq = 5.0\n")
    assert main(["validate", "--config", str(bad)]) == EXIT_CONFIG
    assert "(D3)" in capsys.readouterr().err
    assert main(["validate", "--config", str(tmp_path / "missing.toml")]) == EXIT_CONFIG


def test_empty_report_still_has_headed_tables(tmp_path):
    rep = Report("mild-solution", ExperimentConfig().resolved())
    paths = emit_plot_data(rep, tmp_path)
    assert {p.stem for p in paths} == set(STANDARD_PLOTS)
    for name, header in STANDARD_PLOTS.items():
        assert (tmp_path / f"{name}.csv").read_text().strip() == ",".join(header)
    body = json.loads(rep.to_json())
    assert body["passed"] and "out" not in body["provenance"]["config"]["run"]
