"""Experiment configuration: TOML parsing, defaults and validation gates."""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

try:                                    # Python >= 3.11
    import tomllib as _toml_read
except ModuleNotFoundError:             # pragma: no cover
    import tomli as _toml_read
import tomli_w

from .errors import ConfigError
from .mild_solution import AlphaParams, NoiseField

SUITES = ("deterministic-kernel", "aronson-fit", "malliavin", "mild-solution", "full")
SDE_CATALOG = ("sine", "ou", "linear")
TAG_H1 = "(H1) lambda^{-1}|z|^2 <= <a z, z> <= lambda |z|^2"


@dataclass(frozen=True)
class DeterministicSection:
    T: float = 0.25
    lam: float = 2.0
    kappas: tuple = (0.1, 0.25, 0.5)
    pieces: tuple = (2, 64)
    m_lo: float = 1.0
    m_hi: float = 1.3
    breakpoint_seed: int = 7
    n_levels: int = 24
    tail_tol: float = 1e-8
    m_max: int = 20
    fdm_h: float = 0.01
    fdm_tau: float = 2e-4


@dataclass(frozen=True)
class MalliavinSection:
    T: float = 0.25
    step: float = 1e-3
    n_paths: int = 32
    kappa: float = 0.25
    link_amp: float = 0.3
    sde: str = "sine"
    lam: float = 2.0
    n_levels: int = 24


@dataclass(frozen=True)
class MildSection:
    T: float = 0.25
    kappa: float = 0.25
    coef_amp: float = 0.3
    noise_amp: float = 0.3
    N: float = 1.0
    p: float = 14.0
    q: float = 7.0
    d: int = 1
    alpha: Optional[float] = None
    n_paths: int = 1000
    n_cells: int = 16
    x_eval: tuple = (-1.0, -0.5, 0.0, 0.5, 1.0)
    test_radius: float = 1.5
    sde: str = "sine"
    lam: float = 2.0


@dataclass(frozen=True)
class ExperimentConfig:
    suite: str = "full"
    seed: int = 20240601
    workers: int = 0
    out: str = "results"
    deterministic: DeterministicSection = DeterministicSection()
    malliavin: MalliavinSection = MalliavinSection()
    mild: MildSection = MildSection()

    # -- derived -----------------------------------------------------------
    def alpha_params(self) -> AlphaParams:
        m = self.mild
        return AlphaParams(m.p, m.q, m.d, m.alpha)

    def sub_seed(self, name: str) -> int:
        """Seed for one experiment component, stable across runs and versions."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        return int(ss.generate_state(1, np.uint32)[0])

    def resolved(self) -> "ExperimentConfig":
        """Copy with alpha filled in, so reports are fully specified."""
        return replace(self, mild=replace(self.mild, alpha=self.alpha_params().value))

    def as_dict(self) -> dict:
        d = asdict(self)
        for sec in ("deterministic", "malliavin", "mild"):
            d[sec] = {k: list(v) if isinstance(v, tuple) else v
                      for k, v in d[sec].items() if v is not None}
        return d

    def digest(self) -> str:
        """Hash of everything that can change results (not out-dir or workers)."""
        d = self.as_dict()
        d.pop("out"), d.pop("workers")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {"deterministic": DeterministicSection, "malliavin": MalliavinSection,
             "mild": MildSection}


def _coerce(cls, raw: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    out = {}
    for k, v in raw.items():
        if k not in known:
            raise ConfigError(f"unknown key '{k}' in [{where}]", "config")
        default = known[k].default
        if isinstance(default, tuple):
            if not isinstance(v, list):
                raise ConfigError(f"[{where}] {k} must be an array", "config")
            v = tuple(v)
        elif isinstance(default, bool) or isinstance(default, str):
            if not isinstance(v, type(default)):
                raise ConfigError(f"[{where}] {k} must be {type(default).__name__}", "config")
        elif isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"[{where}] {k} must be an integer", "config")
        elif isinstance(default, float) or default is None:
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"[{where}] {k} must be a number", "config")
            v = float(v)
        out[k] = v
    return cls(**out)


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    run = raw.pop("run", {})
    secs = {}
    for name, cls in _SECTIONS.items():
        secs[name] = _coerce(cls, raw.pop(name, {}), name)
    if raw:
        raise ConfigError(f"unknown section(s) {sorted(raw)}", "config")
    top = _coerce(_RunSection, run, "run")
    cfg = ExperimentConfig(suite=top.suite, seed=top.seed, workers=top.workers, out=top.out,
                           **secs)
    validate(cfg)
    return cfg


@dataclass(frozen=True)
class _RunSection:
    suite: str = "full"
    seed: int = 20240601
    workers: int = 0
    out: str = "results"


def to_dict(cfg: ExperimentConfig) -> dict:
    d = cfg.as_dict()
    run = {k: d.pop(k) for k in ("suite", "seed", "workers", "out")}
    return {"run": run, **d}


def loads(text: str) -> ExperimentConfig:
    try:
        raw = _toml_read.loads(text)
    except _toml_read.TOMLDecodeError as exc:
        raise ConfigError(str(exc), "config") from exc
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        text = fh.read().decode()
    return loads(text)


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


# ---------------------------------------------------------------------------
# gates
# ---------------------------------------------------------------------------

def _h1(lo, hi, lam, what):
    if not (lam >= 1 and lo >= 1 / lam - 1e-12 and hi <= lam + 1e-12):
        raise ConfigError(f"{what}: values in [{lo:.6g}, {hi:.6g}] not within "
                          f"[1/lambda, lambda] for lambda={lam}", TAG_H1)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every structural inequality; raise ConfigError naming the first
    one violated."""
    if cfg.suite not in SUITES:
        raise ConfigError(f"unknown suite '{cfg.suite}', expected one of {SUITES}", "config")
    if cfg.workers < 0:
        raise ConfigError("workers must be >= 0", "config")
    d = cfg.deterministic
    if not d.T > 0 or not 0 < d.m_lo <= d.m_hi:
        raise ConfigError("need T > 0 and 0 < m_lo <= m_hi", "config")
    for k in d.kappas:
        if not 0 <= k < 1:
            raise ConfigError(f"kappa={k} must lie in [0, 1)", TAG_H1)
        _h1(d.m_lo * (1 - k), d.m_hi * (1 + k), d.lam, f"deterministic kappa={k}")
    if any(n < 1 for n in d.pieces):
        raise ConfigError("pieces must be positive", "config")
    m = cfg.malliavin
    if m.sde not in SDE_CATALOG or cfg.mild.sde not in SDE_CATALOG:
        raise ConfigError(f"sde must be one of {SDE_CATALOG}", "config")
    _h1((1 - m.link_amp) * (1 - m.kappa), (1 + m.link_amp) * (1 + m.kappa), m.lam, "malliavin")
    if m.step <= 0 or m.n_paths < 2:
        raise ConfigError("malliavin needs step > 0 and n_paths >= 2", "config")
    s = cfg.mild
    _h1((1 - s.coef_amp) * (1 - s.kappa), (1 + s.coef_amp) * (1 + s.kappa), s.lam, "mild")
    cfg.alpha_params()                  # (D3) and the alpha interval
    NoiseField(s.N, dim=s.d)            # (D1)
    if s.n_paths < 2 or s.n_cells < 2:
        raise ConfigError("mild needs n_paths >= 2 and n_cells >= 2", "config")
    return cfg
