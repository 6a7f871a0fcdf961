"""Command line entry point: ``run``, ``validate`` and ``list-suites``.

Exit status: 0 all criteria pass, 1 a criterion fails, 2 configuration
error, 3 numerical non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as config_mod
from .config import SUITES, ExperimentConfig
from .errors import ConfigError, NumericalError
from .suites import Context, Plot, run_criteria

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
ENV_OUT = "PARAMETRIX_OUT"
ENV_WORKERS = "PARAMETRIX_WORKERS"

# plot tables always written, so an empty report still yields headed files
STANDARD_PLOTS = {
    "collapse": ("scaled_distance", "scaled_value", "envelope"),
    "series_ratios": ("instance", "source", "m", "norm", "ratio"),
    "agreement": ("x", "t", "v_skorohod", "v_fractional", "combined_se"),
    "small_time_decay": ("h", "sup_moment", "log_h", "log_moment"),
}


@dataclass
class Report:
    """Suite outcome with provenance; ``timing`` is kept out of the JSON body
    so that identical inputs give identical bytes."""

    suite: str
    config: ExperimentConfig
    criteria: list = field(default_factory=list)
    plots: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    @property
    def failing(self) -> List[int]:
        return [c.id for c in self.criteria if not c.passed]

    def as_dict(self):
        return {"suite": self.suite, "passed": self.passed, "failing": self.failing,
                "provenance": {"config_digest": self.config.digest(), "seed": self.config.seed,
                               "config": _provenance_config(self.config)},
                "criteria": [c.as_dict() for c in self.criteria]}

    def to_json(self) -> str:
        return json.dumps(_clean(self.as_dict()), sort_keys=True, indent=2) + "\n"


def _provenance_config(cfg):
    d = config_mod.to_dict(cfg)
    for k in ("out", "workers"):
        d["run"].pop(k)
    return d


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def run_suite(cfg: ExperimentConfig) -> Report:
    cfg = config_mod.validate(cfg).resolved()
    ctx = Context(cfg)
    t0 = time.perf_counter()
    criteria = run_criteria(ctx)
    return Report(cfg.suite, cfg, criteria, ctx.plots,
                  {"seconds": time.perf_counter() - t0, "workers": ctx.workers})


def emit_plot_data(report: Report, out_dir) -> List[Path]:
    """Write one CSV per plot table; standard tables are always present."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = dict(report.plots)
    written = []
    for name, header in STANDARD_PLOTS.items():
        if not any(k.startswith(name) for k in tables):
            tables[name] = Plot(header)
    for name in sorted(tables):
        path = out / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(tables[name].header)
            for row in tables[name].rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                            for v in row])
        written.append(path)
    return written


def write_report(report: Report, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(report.to_json())
    (out / "timing.json").write_text(json.dumps(_clean(report.timing), sort_keys=True) + "\n")
    (out / "config.toml").write_text(config_mod.dumps(report.config))
    emit_plot_data(report, out)
    return path


def _summary(report: Report) -> str:
    lines = []
    for c in report.criteria:
        lines.append(f"criterion {c.id:2d} {c.name:34s} {'PASS' if c.passed else 'FAIL'}"
                     + (f"  ({c.note})" if c.note else ""))
    return "\n".join(lines)


def _load(args) -> ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else ExperimentConfig()
    over = {}
    if getattr(args, "suite", None):
        over["suite"] = args.suite
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    workers = getattr(args, "workers", None)
    if workers is None and os.environ.get(ENV_WORKERS):
        workers = int(os.environ[ENV_WORKERS])
    if workers is not None:
        over["workers"] = workers
    out = getattr(args, "out", None) or os.environ.get(ENV_OUT)
    if out:
        over["out"] = out
    return config_mod.validate(replace(cfg, **over))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parametrix-spde",
                                description="Parametrix kernels and anticipating SPDE checks")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a verification suite")
    r.add_argument("--config", help="TOML experiment file (defaults if omitted)")
    r.add_argument("--suite", choices=SUITES)
    r.add_argument("--out", help=f"output directory (env {ENV_OUT})")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int, help=f"worker processes (env {ENV_WORKERS})")
    v = sub.add_parser("validate", help="check a configuration file")
    v.add_argument("--config", required=True)
    sub.add_parser("list-suites", help="print suite names")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-suites":
        print("\n".join(SUITES))
        return EXIT_PASS
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(f"ok: {args.config} (digest {cfg.resolved().digest()})")
        return EXIT_PASS
    try:
        report = run_suite(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical non-convergence: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    path = write_report(report, cfg.out)
    print(_summary(report))
    print(f"report: {path}")
    if not report.passed:
        print("failing criteria: " + ", ".join(map(str, report.failing)), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_PASS


if __name__ == "__main__":      # pragma: no cover
    sys.exit(main())
