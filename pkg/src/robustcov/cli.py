"""Command-line front end: ``robustcov {estimate,backtest,tune}``.

Results go to files under ``--out``; progress goes to stderr. Failures print a
JSON error object on stderr and exit with 2 (configuration), 3 (data) or 4
(numerical).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .backtest import (
    BacktestConfig,
    BacktestReport,
    EstimatorSpec,
    benchmark_market_cap,
    cross_validate,
    default_grid,
    estimate_covariance,
    run_backtest,
)
from .errors import ConfigError, DataError, MissingCap, RobustCovError
from .estimators import EstimatorKind, cov_to_corr, gerber_counts, gerber_cov, gerber_matrix, gerber_thresholds
from .market_data import ReturnPanel, load_price_table, load_universe, to_weekly_returns
from .solver import CvarConstraint
from .spectral import condition_number, psd_repair, top_eigenvalues

log = logging.getLogger("robustcov")

# flat config-file keys -> attribute names on RunConfig
CONFIG_KEYS = {
    "data.prices": "prices",
    "data.universe": "universe",
    "estimator.kind": "estimator",
    "estimator.alpha": "alpha",
    "estimator.delta": "delta",
    "estimator.c": "c",
    "estimator.gerber_variant": "gerber_variant",
    "solver.lambda": "lam",
    "solver.cvar": "cvar",
    "backtest.window": "window",
    "backtest.cost": "cost",
    "backtest.split": "split",
    "backtest.nco": "nco",
    "tune.grid": "grid",
    "output.dir": "out",
    "output.charts": "emit_charts",
    "seed": "seed",
}


@dataclass
class RunConfig:
    command: str
    prices: Path | None = None
    universe: Path | None = None
    estimator: str = "sample"
    alpha: float | None = None
    delta: float | str | None = None
    c: float | None = None
    gerber_variant: str = "eq3"
    lam: float = 0.005
    cvar: list[str] = field(default_factory=list)
    window: int | None = None
    cost: float = 0.005
    split: float = 0.5
    nco: bool = False
    grid: list[float] | None = None
    out: Path = Path("out")
    emit_charts: bool = False
    seed: int = 0

    def spec(self) -> EstimatorSpec:
        kw: dict[str, Any] = {"kind": self.estimator, "gerber_variant": self.gerber_variant}
        for name in ("alpha", "delta", "c"):
            if getattr(self, name) is not None:
                kw[name] = getattr(self, name)
        return EstimatorSpec(**kw)

    def backtest_config(self) -> BacktestConfig:
        return BacktestConfig(
            estimator=self.spec(),
            window_length=self.window,
            cost_rate=self.cost,
            lam=self.lam,
            cvar_constraints=tuple(CvarConstraint.parse(t) for t in self.cvar),
            use_nco=self.nco,
            train_test_split=self.split,
            seed=self.seed,
        )


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _delta(text: str) -> float | str:
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected a number or 'auto'") from exc


def _grid(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from exc


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with flat namespaced keys")
    common.add_argument("--prices", type=Path)
    common.add_argument("--universe", type=Path)
    common.add_argument("--estimator", choices=[k.value for k in EstimatorKind])
    common.add_argument("--alpha", type=float)
    common.add_argument("--delta", type=_delta)
    common.add_argument("--c", type=float)
    common.add_argument("--gerber-variant", choices=["eq3", "eq5"])
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--window", type=int)
    common.add_argument("--cost", type=float)
    common.add_argument("--split", type=float)
    common.add_argument("--cvar", action="append", metavar="A:B")
    common.add_argument("--nco", action="store_true", default=None)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("--emit-charts", action="store_true", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="robustcov", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"robustcov {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("estimate", parents=[common], help="estimate one covariance matrix and its diagnostics")
    sub.add_parser("backtest", parents=[common], help="run a strategy and the market-cap benchmark")
    tune = sub.add_parser("tune", parents=[common], help="cross-validate the estimator parameter")
    tune.add_argument("--grid", type=_grid, help="comma-separated parameter values")
    return parser


def _load_config_file(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return {CONFIG_KEYS[k]: v for k, v in raw.items()}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, command-line flags on top; then validate."""
    values: dict[str, Any] = {}
    if args.config is not None:
        values.update(_load_config_file(args.config))
    for name in ("prices", "universe", "estimator", "alpha", "delta", "c", "gerber_variant", "lam", "cvar",
                 "window", "cost", "split", "nco", "out", "emit_charts", "seed", "grid"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        cfg = RunConfig(command=args.command, **values)
        for name in ("prices", "universe", "out"):
            if getattr(cfg, name) is not None:
                setattr(cfg, name, Path(getattr(cfg, name)))
        if isinstance(cfg.cvar, str):
            cfg.cvar = [cfg.cvar]
        cfg.window = None if cfg.window is None else int(cfg.window)
        cfg.seed = int(cfg.seed)
        for name in ("lam", "cost", "split"):
            setattr(cfg, name, float(getattr(cfg, name)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad configuration value: {exc}") from exc
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.prices is None:
        raise ConfigError("--prices is required")
    for name in ("prices", "universe"):
        p = getattr(cfg, name)
        if p is not None and not p.is_file():
            raise ConfigError(f"{name} file not found: {p}")
    if cfg.command == "backtest" and cfg.universe is None:
        raise ConfigError("backtest needs --universe for the market-cap benchmark")
    if cfg.window is not None and cfg.window < 2:
        raise ConfigError("--window must be >= 2")
    if cfg.cost < 0:
        raise ConfigError("--cost must be >= 0")
    if cfg.lam < 0:
        raise ConfigError("--lambda must be >= 0")
    if not 0.0 < cfg.split < 1.0:
        raise ConfigError("--split must lie in (0, 1)")
    if cfg.grid is not None and cfg.command == "tune" and len(cfg.grid) == 0:
        raise ConfigError("empty parameter grid")
    # constructing these runs every module-level parameter check up front
    cfg.backtest_config()


def load_returns(cfg: RunConfig) -> tuple[ReturnPanel, dict[str, float]]:
    prices = load_price_table(cfg.prices, drop_incomplete=False)
    caps: dict[str, float] = {}
    if cfg.universe is not None:
        sectors, caps = load_universe(cfg.universe)
        keep = [a for a in prices.asset_ids if a in sectors]
        if not keep:
            raise DataError("no price column appears in the universe file")
        prices = prices.subset(keep).with_universe(sectors, caps)
    panel = to_weekly_returns(prices)
    log.info("loaded %d weeks x %d assets", panel.T, panel.N)
    return panel, caps


# ---------------------------------------------------------------- output

def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, Path):
        return str(v)
    return v


def write_json(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    return path


def write_matrix(path: Path, ids: Sequence[str], m: np.ndarray) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(ids) + "\n")
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return path


def write_records(path: Path, report: BacktestReport) -> Path:
    ids = report.asset_ids
    rows = []
    for r in report.records:
        k = int(np.argmax(np.abs(r.post_weights)))
        rows.append({
            "date": r.date.strftime("%Y-%m-%d"),
            "turnover": r.turnover,
            "cost": r.cost_paid,
            "realized_return": r.realized_return,
            "top_weight_asset": ids[k],
            "max_abs_weight": float(abs(r.post_weights[k])),
            "status": r.diagnostics.get("status", ""),
            "n_clusters": r.diagnostics.get("n_clusters", ""),
            "liquidations": ";".join(r.liquidations),
        })
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def _report_doc(rep: BacktestReport) -> dict:
    doc = {"name": rep.name, "metrics": rep.metrics(), "config": rep.config,
           "n_rebalances": len(rep.records), "terminal_value": rep.terminal_value,
           "first_date": rep.records[0].date.strftime("%Y-%m-%d"),
           "last_date": rep.records[-1].date.strftime("%Y-%m-%d")}
    statuses: dict[str, int] = {}
    for r in rep.records:
        s = r.diagnostics.get("status")
        if s:
            statuses[s] = statuses.get(s, 0) + 1
    doc["solver_status_counts"] = statuses
    ks = [r.diagnostics["n_clusters"] for r in rep.records if "n_clusters" in r.diagnostics]
    if ks:
        doc["nco"] = {"k_per_week": ks, "k_range": [min(ks), max(ks)]}
    return doc


# ---------------------------------------------------------------- commands

def cmd_estimate(cfg: RunConfig) -> list[Path]:
    panel, _ = load_returns(cfg)
    if cfg.window is not None:
        if cfg.window > panel.T:
            raise DataError(f"--window {cfg.window} exceeds the {panel.T} available weeks")
        panel = panel.slice_rows(panel.T - cfg.window, panel.T)
    full = panel.available()
    if not full.all():
        log.info("dropping %d assets with missing weeks", int((~full).sum()))
        panel = panel.take_assets(full)
    spec = cfg.spec()
    est = estimate_covariance(panel, spec)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    files = [write_matrix(out / "covariance.csv", est.asset_ids, est.matrix),
             write_matrix(out / "correlation.csv", est.asset_ids, cov_to_corr(est.matrix))]
    files.append(write_json(out / "eigenvalues.json", {
        "estimator": spec.kind.value,
        "top_eigenvalues": top_eigenvalues(est.matrix, 10),
        "condition_number": condition_number(est.matrix),
    }))
    doc = {
        "estimator": spec.params(),
        "asset_ids": list(est.asset_ids),
        "n_weeks": panel.T,
        "first_week": panel.timestamps[0].strftime("%Y-%m-%d"),
        "last_week": panel.timestamps[-1].strftime("%Y-%m-%d"),
        "diagnostics": est.diagnostics,
        "condition_number": condition_number(est.matrix),
    }
    if spec.kind in (EstimatorKind.GERBER_MAD, EstimatorKind.GERBER_STD):
        doc["gerber"] = _gerber_variants(panel, spec, out, files)
    files.append(write_json(out / "estimate.json", doc))
    return files


def _gerber_variants(panel: ReturnPanel, spec: EstimatorSpec, out: Path, files: list) -> dict:
    """Both denominators, their repaired versions and the Frobenius distances."""
    kind = "mad" if spec.kind is EstimatorKind.GERBER_MAD else "std"
    counts = gerber_counts(panel, gerber_thresholds(panel, spec.c, kind))
    sigma = np.asarray(panel.returns).std(axis=0, ddof=1)
    info = {}
    for variant in ("eq3", "eq5"):
        raw = gerber_cov(gerber_matrix(counts, variant=variant), sigma, panel.asset_ids, spec.kind)
        fixed = psd_repair(raw.matrix, spec.kappa_max)
        files.append(write_matrix(out / f"gerber_{variant}.csv", panel.asset_ids, raw.matrix))
        files.append(write_matrix(out / f"gerber_{variant}_repaired.csv", panel.asset_ids, fixed))
        info[variant] = {
            "is_spd": raw.diagnostics["is_spd"],
            "min_eigenvalue": raw.diagnostics["min_eigenvalue"],
            "condition_number": condition_number(raw.matrix),
            "repaired_condition_number": condition_number(fixed),
            "repaired_is_spd": bool(np.linalg.eigvalsh(fixed)[0] > 0),
            "frobenius_to_repaired": float(np.linalg.norm(fixed - raw.matrix)),
        }
    m3 = np.loadtxt(out / "gerber_eq3.csv", delimiter=",", skiprows=1, ndmin=2)
    m5 = np.loadtxt(out / "gerber_eq5.csv", delimiter=",", skiprows=1, ndmin=2)
    info["frobenius_eq3_eq5"] = float(np.linalg.norm(m3 - m5))
    info["kappa_max"] = spec.kappa_max
    return info


def cmd_backtest(cfg: RunConfig) -> list[Path]:
    panel, caps = load_returns(cfg)
    bt = cfg.backtest_config()
    missing = [a for a in panel.asset_ids if a not in caps]
    if missing:
        raise MissingCap(f"no market cap for {missing[:5]}")
    log.info("backtesting %s on %d weeks (window %d)", bt.echo()["estimator"]["kind"], panel.T, bt.window)
    strategy = run_backtest(panel, bt)
    bench = benchmark_market_cap(panel, caps, bt)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    files = [write_records(out / "records.csv", strategy), write_records(out / "benchmark_records.csv", bench)]
    files.append(write_json(out / "report.json", {
        "strategy": _report_doc(strategy),
        "benchmark": _report_doc(bench),
        "cvar_constraints": strategy.config["cvar_constraints"],
    }))
    if cfg.emit_charts:
        from .plotting import write_charts
        files.extend(write_charts([strategy, bench], out))
    return files


def cmd_tune(cfg: RunConfig) -> list[Path]:
    panel, _ = load_returns(cfg)
    bt = cfg.backtest_config()
    spec = bt.estimator
    param = spec.tuned_param
    if param is None:
        raise ConfigError(f"estimator {spec.kind.value} has no tunable parameter")
    grid = cfg.grid if cfg.grid is not None else default_grid(spec.kind)
    if param == "delta" and not all(isinstance(v, (int, float)) for v in grid):
        raise ConfigError("delta grid must be numeric")
    log.info("tuning %s over %d values", param, len(grid))
    best, table = cross_validate(panel, grid, bt, param)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "fold_table.csv"
    table.to_csv(table_path, index=False)
    means = table.groupby("param", sort=True)["sharpe"].mean()
    best_path = write_json(out / "best.json", {
        "estimator": spec.kind.value,
        "param": param,
        "best": best,
        "grid": [float(v) for v in grid],
        "mean_sharpe": {repr(float(k)): float(v) for k, v in means.items()},
        "folds": int(table["fold"].nunique()),
    })
    return [table_path, best_path]


COMMANDS = {"estimate": cmd_estimate, "backtest": cmd_backtest, "tune": cmd_tune}


def _fail(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    verbose = argv is not None and ("-v" in argv or "--verbose" in argv)
    try:
        args = build_parser().parse_args(argv)
        verbose = args.verbose
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        files = COMMANDS[cfg.command](cfg)
    except RobustCovError as exc:
        return _fail(exc, exc.exit_code)
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to an exit code
        if verbose:
            raise
        return _fail(exc, 1)
    for f in files:
        sys.stdout.write(f"{f}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
