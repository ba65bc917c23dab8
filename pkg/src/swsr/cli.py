"""Command-line entry point.

Three modes:

``analyze``
    Read a CSV with columns ``y``, ``t``, ``a`` and print one row per method.
``simulate``
    Run Monte Carlo cells (scenario x theta) and write one row per method
    and cell.
``demo``
    Fit the sine-plus-bump spline example and write plot-ready curves.

Configuration is a YAML mapping; every key is optional and command-line
flags override it. ``swsr --print-config`` echoes the resolved config.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .errors import ConfigError, SWSRError
from .estimators import DEFAULT_CANDIDATES, CandidateGrid, FitResult, TrialData
from .simcore import (
    METHOD_NAMES,
    TABLE_METHODS,
    CellReport,
    MethodOptions,
    _run_methods,
    figure1_demo,
    paper_scenario,
    resolve_workers,
    run_cell,
)

REPORT_COLUMNS = (
    "method",
    "scenario",
    "variance_setting",
    "theta",
    "n_iter",
    "rejection_rate",
    "bias",
    "emp_se",
    "coverage",
    "failures",
    "seed",
)
ANALYSIS_COLUMNS = ("method", "theta_hat", "se", "p_one_sided", "ci_lo", "ci_hi", "note")
MODES = ("analyze", "simulate", "demo")
FORMATS = ("csv", "json-lines")
SCENARIO_NAMES = ("S1", "S2", "S3", "S4", "CS1", "CS2", "CS3")

N_PERM_SIMULATE = 1_000
N_PERM_ANALYZE = 10_000


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "simulate"
    data: str | None = None
    scenarios: tuple[str, ...] = ("S1-equal",)
    thetas: tuple[float, ...] = (0.0,)
    methods: tuple[str, ...] = TABLE_METHODS
    n_iter: int = 10_000
    alpha: float = 0.025
    master_seed: int = 20240101
    n_perm: int | None = None
    grid: tuple[tuple[int, int], ...] = DEFAULT_CANDIDATES
    folds: int = 5
    weights_scope: str = "full"
    rw_scale: str = "variance"
    threads: int | None = None
    out: str | None = None
    format: str = "csv"
    render_table: bool = False

    @property
    def resolved_n_perm(self) -> int:
        if self.n_perm is not None:
            return self.n_perm
        return N_PERM_SIMULATE if self.mode == "simulate" else N_PERM_ANALYZE

    def to_text(self) -> str:
        doc = asdict(self)
        doc["scenarios"] = list(self.scenarios)
        doc["thetas"] = list(self.thetas)
        doc["methods"] = list(self.methods)
        doc["grid"] = [list(c) for c in self.grid]
        return yaml.safe_dump(doc, sort_keys=False)


_FIELD_NAMES = {f.name for f in fields(ExperimentConfig)}


def _fail(name: str, constraint: str, value) -> ConfigError:
    return ConfigError(f"invalid {name}={value!r}: {constraint}")


def _parse_cell(label: str) -> tuple[str, str]:
    name, _, setting = str(label).partition("-")
    setting = setting or "equal"
    if name not in SCENARIO_NAMES or setting not in ("equal", "unequal"):
        raise _fail(
            "scenarios",
            f"entries look like 'S3-unequal' with a name in {SCENARIO_NAMES}",
            label,
        )
    return name, setting


def validate(cfg: ExperimentConfig, check_files: bool = True) -> ExperimentConfig:
    """Check every field; returns the config with list fields as tuples."""
    if cfg.mode not in MODES:
        raise _fail("mode", f"one of {MODES}", cfg.mode)
    scen = (cfg.scenarios,) if isinstance(cfg.scenarios, str) else tuple(cfg.scenarios)
    for s in scen:
        _parse_cell(s)
    try:
        thetas = tuple(float(x) for x in ([cfg.thetas] if np.isscalar(cfg.thetas) else cfg.thetas))
    except (TypeError, ValueError):
        raise _fail("thetas", "list of numbers", cfg.thetas) from None
    methods = (cfg.methods,) if isinstance(cfg.methods, str) else tuple(cfg.methods)
    bad = [m for m in methods if m not in METHOD_NAMES]
    if bad or not methods:
        raise _fail("methods", f"nonempty subset of {METHOD_NAMES}", list(methods))
    if not isinstance(cfg.n_iter, int) or cfg.n_iter < 1:
        raise _fail("n_iter", "integer >= 1", cfg.n_iter)
    if not isinstance(cfg.alpha, (int, float)) or not 0 < cfg.alpha < 0.5:
        raise _fail("alpha", "must lie in (0, 0.5)", cfg.alpha)
    if not isinstance(cfg.master_seed, int) or cfg.master_seed < 0:
        raise _fail("master_seed", "non-negative integer", cfg.master_seed)
    if cfg.n_perm is not None and (not isinstance(cfg.n_perm, int) or cfg.n_perm < 1):
        raise _fail("n_perm", "integer >= 1", cfg.n_perm)
    try:
        grid = tuple((int(k), int(d)) for k, d in cfg.grid)
        CandidateGrid(candidates=grid, folds=cfg.folds)
    except (TypeError, ValueError):
        raise _fail("grid", "nonempty list of [k, d] pairs with k, d >= 0 and folds >= 2", cfg.grid) from None
    if cfg.weights_scope not in ("full", "fold"):
        raise _fail("weights_scope", "'full' or 'fold'", cfg.weights_scope)
    if cfg.rw_scale not in ("variance", "sd"):
        raise _fail("rw_scale", "'variance' or 'sd'", cfg.rw_scale)
    if cfg.threads is not None and (not isinstance(cfg.threads, int) or cfg.threads < 1):
        raise _fail("threads", "integer >= 1", cfg.threads)
    if cfg.format not in FORMATS:
        raise _fail("format", f"one of {FORMATS}", cfg.format)
    if cfg.mode == "analyze":
        if not cfg.data:
            raise _fail("data", "analyze mode needs a CSV path", cfg.data)
        if check_files and not Path(cfg.data).is_file():
            raise _fail("data", "file does not exist", cfg.data)
    return replace(
        cfg,
        scenarios=scen,
        thetas=thetas,
        methods=methods,
        grid=grid,
        alpha=float(cfg.alpha),
        render_table=bool(cfg.render_table),
    )


def parse_config(text: str, check_files: bool = True) -> ExperimentConfig:
    """Parse a YAML document into a validated :class:`ExperimentConfig`.

    Missing keys take their defaults; unknown keys are an error.
    """
    try:
        doc = yaml.safe_load(text) if text and text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a key/value mapping")
    unknown = sorted(set(doc) - _FIELD_NAMES)
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(unknown))
    return validate(ExperimentConfig(**doc), check_files=check_files)


# ---------------------------------------------------------------------------
# data input


def read_trial_csv(path: str | os.PathLike) -> TrialData:
    """Read ``y``, ``t``, ``a`` columns (any order, header required)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        missing = [c for c in ("y", "t", "a") if c not in header]
        if missing:
            raise ConfigError(f"{path}: line 1: missing column(s) {', '.join(missing)}")
        pos = {c: header.index(c) for c in ("y", "t", "a")}
        y, t, a = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ConfigError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                yi, ti, ai = (float(row[pos[c]]) for c in ("y", "t", "a"))
            except ValueError:
                raise ConfigError(f"{path}: line {lineno}: non-numeric value") from None
            if not (math.isfinite(yi) and math.isfinite(ti)):
                raise ConfigError(f"{path}: line {lineno}: non-finite value")
            if ai not in (0.0, 1.0):
                raise ConfigError(f"{path}: line {lineno}: a must be 0 or 1, got {row[pos['a']]}")
            y.append(yi)
            t.append(ti)
            a.append(int(ai))
    try:
        return TrialData(y=np.array(y), t=np.array(t), a=np.array(a))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def write_trial_csv(data: TrialData, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "t", "a"])
        for yi, ti, ai in zip(data.y, data.t, data.a):
            w.writerow([repr(float(yi)), repr(float(ti)), int(ai)])


# ---------------------------------------------------------------------------
# output


def _write_rows(rows: list[dict], columns: Sequence[str], fmt: str, fh) -> None:
    if fmt == "csv":
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])
    else:
        for r in rows:
            fh.write(json.dumps({c: _json_value(r[c]) for c in columns}) + "\n")


def _cell(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _json_value(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    if isinstance(v, np.generic):
        return v.item()
    return v


def _emit(rows, columns, cfg: ExperimentConfig, stdout) -> None:
    if cfg.out:
        with open(cfg.out, "w", newline="", encoding="utf-8") as fh:
            _write_rows(rows, columns, cfg.format, fh)
    else:
        _write_rows(rows, columns, cfg.format, stdout)


def cell_rows(report: CellReport) -> list[dict]:
    return [
        {
            "method": s.method,
            "scenario": report.scenario,
            "variance_setting": report.variance_setting,
            "theta": report.theta,
            "n_iter": report.n_iter,
            "rejection_rate": s.rejection_rate,
            "bias": s.bias,
            "emp_se": s.emp_se,
            "coverage": s.coverage,
            "failures": s.failures,
            "seed": report.seed,
        }
        for s in report.rows.values()
    ]


def render_table(rows: list[dict]) -> str:
    """Percent-style table: rejection %, bias x1000 (SE x100), coverage %."""
    out = io.StringIO()
    head = f"{'scenario':<16}{'theta':>7}  {'method':<8}{'reject%':>9}  {'bias*1e3 (SE*100)':>19}{'CP%':>7}"
    out.write(head + "\n" + "-" * len(head) + "\n")
    for r in rows:
        if math.isnan(r["bias"]):
            est = "-"
            cp = "-"
        else:
            est = f"{1000 * r['bias']:.1f} ({100 * r['emp_se']:.1f})"
            cp = f"{100 * r['coverage']:.1f}"
        rej = "-" if math.isnan(r["rejection_rate"]) else f"{100 * r['rejection_rate']:.2f}"
        label = f"{r['scenario']}-{r['variance_setting']}"
        out.write(f"{label:<16}{r['theta']:>7g}  {r['method']:<8}{rej:>9}  {est:>19}{cp:>7}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# modes


def cell_seed(master_seed: int, index: int) -> int:
    """Seed of the ``index``-th simulation cell, derived from the master seed."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def simulate(cfg: ExperimentConfig, progress=None) -> list[dict]:
    rows: list[dict] = []
    grid = CandidateGrid(candidates=cfg.grid, folds=cfg.folds)
    index = 0
    for label in cfg.scenarios:
        name, setting = _parse_cell(label)
        for theta in cfg.thetas:
            spec = paper_scenario(name, setting, theta, rw_scale=cfg.rw_scale)
            report = run_cell(
                spec,
                cfg.methods,
                cfg.n_iter,
                cell_seed(cfg.master_seed, index),
                alpha=cfg.alpha,
                n_perm=cfg.resolved_n_perm,
                grid=grid,
                weights_scope=cfg.weights_scope,
                threads=cfg.threads,
            )
            if progress:
                progress(f"{label} theta={theta:g}: {report.wall_time:.1f}s")
            rows.extend(cell_rows(report))
            index += 1
    return rows


def analyze(cfg: ExperimentConfig) -> list[dict]:
    data = read_trial_csv(cfg.data)
    options = MethodOptions(
        n_perm=cfg.resolved_n_perm,
        grid=CandidateGrid(candidates=cfg.grid, folds=cfg.folds),
        weights_scope=cfg.weights_scope,
    )
    results = _run_methods(list(cfg.methods), data, np.random.SeedSequence(cfg.master_seed), options)
    rows = []
    for m in cfg.methods:
        res = results[m]
        if isinstance(res, Exception):
            nan = math.nan
            rows.append(dict(method=m, theta_hat=nan, se=nan, p_one_sided=nan,
                             ci_lo=nan, ci_hi=nan, note=f"error: {res}"))
            continue
        note = ""
        if "selected" in res.diagnostics:
            k, d = res.diagnostics["selected"]
            note = f"k={k} d={d}"
        rows.append(dict(method=m, theta_hat=res.theta_hat, se=res.se,
                         p_one_sided=res.p_one_sided, ci_lo=res.ci95[0],
                         ci_hi=res.ci95[1], note=note))
    return rows


def demo_rows(cfg: ExperimentConfig) -> tuple[list[dict], list[str], float]:
    fig = figure1_demo(seed=cfg.master_seed)
    basis_cols = [f"basis_{j + 1}" for j in range(fig.n_basis)]
    columns = ["t", "f_true", "f_hat", *basis_cols]
    rows = []
    for i, t in enumerate(fig.grid):
        row = {"t": float(t), "f_true": float(fig.f_true[i]), "f_hat": float(fig.f_hat[i])}
        row.update({c: float(fig.scaled_bases[i, j]) for j, c in enumerate(basis_cols)})
        rows.append(row)
    return rows, columns, fig.rmse


def run(cfg: ExperimentConfig, stdout=None, stderr=None) -> int:
    """Execute a validated config; returns the process exit status."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        if cfg.mode == "simulate":
            rows = simulate(cfg, progress=lambda msg: print(msg, file=stderr))
            if cfg.render_table:
                stdout.write(render_table(rows))
                if cfg.out:
                    _emit(rows, REPORT_COLUMNS, cfg, stdout)
            else:
                _emit(rows, REPORT_COLUMNS, cfg, stdout)
        elif cfg.mode == "analyze":
            rows = analyze(cfg)
            if cfg.out:
                _emit(rows, ANALYSIS_COLUMNS, cfg, stdout)
            _print_analysis(rows, stdout)
        else:
            rows, columns, rmse = demo_rows(cfg)
            _emit(rows, columns, cfg, stdout)
            print(f"spline demo: {len(columns) - 3} bases, RMSE vs true curve {rmse:.4f}", file=stderr)
    except (SWSRError, OSError) as exc:
        print(f"error: {exc}", file=stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


def _print_analysis(rows, fh) -> None:
    fh.write(f"{'method':<9}{'theta_hat':>11}{'se':>10}{'p(>0)':>10}{'95% CI':>22}  note\n")
    for r in rows:
        ci = f"[{r['ci_lo']:.4f}, {r['ci_hi']:.4f}]" if not math.isnan(r["ci_lo"]) else "-"
        th = f"{r['theta_hat']:.4f}" if not math.isnan(r["theta_hat"]) else "-"
        se = f"{r['se']:.4f}" if not math.isnan(r["se"]) else "-"
        p = f"{r['p_one_sided']:.4g}" if not math.isnan(r["p_one_sided"]) else "-"
        fh.write(f"{r['method']:<9}{th:>11}{se:>10}{p:>10}{ci:>22}  {r['note']}\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="swsr",
        description="Spline-adjusted treatment-effect tests under time drift.",
        epilog=(
            "Defaults: alpha=0.025, folds=5, grid=(1,1),(1,2),(5,2),(5,3), "
            "n_iter=10000, n_perm=1000 in simulate mode (10000 in analyze mode). "
            "SWSR_THREADS is used when --threads is not given."
        ),
    )
    p.add_argument("--config", metavar="PATH", help="YAML config file")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--data", metavar="PATH", help="CSV with columns y,t,a (analyze mode)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, help="worker processes for simulations")
    p.add_argument("--out", metavar="PATH", help="report file (default stdout)")
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--render-table", action="store_true", help="percent-style table on stdout")
    p.add_argument("--print-config", action="store_true", help="echo the resolved config and exit")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
        cfg = parse_config(text, check_files=False)
        overrides = {
            "mode": args.mode,
            "data": args.data,
            "master_seed": args.seed,
            "threads": args.threads,
            "out": args.out,
            "format": args.format,
        }
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
        if args.render_table:
            cfg = replace(cfg, render_table=True)
        if cfg.threads is None:
            cfg = replace(cfg, threads=resolve_workers(None))
        cfg = validate(cfg, check_files=not args.print_config)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return 0
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
