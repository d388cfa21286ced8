"""Rolling-window weekly rebalancing engine, market-cap benchmark, performance
metrics and k-fold tuning of estimator parameters."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .cluster import nco_allocate
from .errors import ConfigError, InsufficientHistory, InsufficientRecords, MissingCap, NotSpd
from .estimators import (
    CovEstimate,
    EstimatorKind,
    ewma_cov,
    gerber_counts,
    gerber_cov,
    gerber_matrix,
    gerber_thresholds,
    ledoit_cov,
    sample_mean_cov,
)
from .market_data import ReturnPanel
from .solver import CvarConstraint, MinVarProblem, Status, minvar_closed_form, solve_minvar_cvar
from .spectral import condition_number, psd_repair

__all__ = [
    "EstimatorSpec",
    "BacktestConfig",
    "RebalanceRecord",
    "BacktestReport",
    "estimate_covariance",
    "trade_cost",
    "run_backtest",
    "benchmark_market_cap",
    "compute_metrics",
    "value_path",
    "cross_validate",
    "default_grid",
    "PERIODS_PER_YEAR",
]

log = logging.getLogger(__name__)

PERIODS_PER_YEAR = 52
FOLDS = 5
FOLD_WEEKS = 25
# shipped defaults: cross-validated threshold fractions and shrinkage intensity
TUNED_C = {EstimatorKind.GERBER_MAD: 0.4, EstimatorKind.GERBER_STD: 0.6}
TUNED_DELTA = 0.4
DEFAULT_EWMA_ALPHA = 0.01


@dataclass(frozen=True)
class EstimatorSpec:
    kind: EstimatorKind = EstimatorKind.SAMPLE
    alpha: float = DEFAULT_EWMA_ALPHA
    delta: float | str = TUNED_DELTA
    c: float | None = None
    gerber_variant: str = "eq3"
    repair: bool = True
    kappa_max: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "kind", EstimatorKind(self.kind))
        if self.c is None and self.kind in TUNED_C:
            object.__setattr__(self, "c", TUNED_C[self.kind])

    @property
    def tuned_param(self) -> str | None:
        return {EstimatorKind.GERBER_MAD: "c", EstimatorKind.GERBER_STD: "c",
                EstimatorKind.LEDOIT: "delta", EstimatorKind.EWMA: "alpha"}.get(self.kind)

    def params(self) -> dict:
        out = {"kind": self.kind.value}
        if self.kind is EstimatorKind.EWMA:
            out["alpha"] = self.alpha
        elif self.kind is EstimatorKind.LEDOIT:
            out["delta"] = self.delta
        elif self.kind in TUNED_C:
            out.update(c=self.c, gerber_variant=self.gerber_variant, repair=self.repair, kappa_max=self.kappa_max)
        return out


def estimate_covariance(window: ReturnPanel, spec: EstimatorSpec) -> CovEstimate:
    kind = spec.kind
    if kind is EstimatorKind.SAMPLE:
        return sample_mean_cov(window)[1]
    if kind is EstimatorKind.EWMA:
        return ewma_cov(window, spec.alpha)
    if kind is EstimatorKind.LEDOIT:
        return ledoit_cov(window, spec.delta)
    threshold_kind = "mad" if kind is EstimatorKind.GERBER_MAD else "std"
    h = gerber_thresholds(window, spec.c, threshold_kind)
    g = gerber_matrix(gerber_counts(window, h), variant=spec.gerber_variant)
    sigma = np.asarray(window.returns).std(axis=0, ddof=1)
    est = gerber_cov(g, sigma, window.asset_ids, kind, spec.params())
    if not spec.repair:
        return est
    repaired = psd_repair(est.matrix, spec.kappa_max)
    return est.replace(repaired, is_spd=True, repair_distance=float(np.linalg.norm(repaired - est.matrix)))


@dataclass(frozen=True)
class BacktestConfig:
    estimator: EstimatorSpec | Callable[[ReturnPanel], CovEstimate | np.ndarray] = field(default_factory=EstimatorSpec)
    window_length: int | None = None
    cost_rate: float = 0.005
    lam: float = 0.005
    # covariance is annualised before solving so that lam reads as an annual cost
    cov_scale: float = PERIODS_PER_YEAR
    cvar_constraints: tuple[CvarConstraint, ...] = ()
    use_nco: bool = False
    train_test_split: float = 0.5
    seed: int = 0
    k_max: int = 4
    restarts: int = 10

    def __post_init__(self):
        object.__setattr__(self, "cvar_constraints", tuple(self.cvar_constraints))
        if self.window < 2:
            raise ConfigError("window_length must be >= 2")
        if self.cost_rate < 0:
            raise ConfigError("cost_rate must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not self.cov_scale > 0:
            raise ConfigError("cov_scale must be > 0")
        if not 0.0 < self.train_test_split < 1.0:
            raise ConfigError("train_test_split must lie in (0, 1)")
        if self.use_nco and self.cvar_constraints:
            raise ConfigError("NCO runs without CVaR constraints")

    @property
    def window(self) -> int:
        if self.window_length is not None:
            return self.window_length
        return 400 if self.cvar_constraints else 200

    def echo(self) -> dict:
        est = self.estimator.params() if isinstance(self.estimator, EstimatorSpec) else {"kind": "custom"}
        return {
            "estimator": est,
            "window_length": self.window,
            "cost_rate": self.cost_rate,
            "lambda": self.lam,
            "cov_scale": self.cov_scale,
            "cvar_constraints": [{"alpha": c.alpha, "beta": c.beta} for c in self.cvar_constraints],
            "use_nco": self.use_nco,
            "train_test_split": self.train_test_split,
            "seed": self.seed,
        }


@dataclass
class RebalanceRecord:
    date: pd.Timestamp
    pre_weights: np.ndarray
    post_weights: np.ndarray
    turnover: float
    cost_paid: float
    realized_return: float
    liquidations: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


@dataclass
class BacktestReport:
    name: str
    asset_ids: tuple[str, ...]
    records: list[RebalanceRecord]
    ann_return: float
    ann_vol: float
    sharpe: float
    sortino: float
    max_drawdown: float
    avg_turnover: float
    config: dict = field(default_factory=dict)

    @property
    def returns(self) -> np.ndarray:
        return np.array([r.realized_return for r in self.records])

    @property
    def terminal_value(self) -> float:
        return float(np.prod(1.0 + self.returns))

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in ("ann_return", "ann_vol", "sharpe", "sortino", "max_drawdown", "avg_turnover")}


def trade_cost(pre, post, cost_rate: float) -> tuple[float, float]:
    """(one-sided turnover, cost) for moving from ``pre`` to ``post``; cost is
    charged on buys plus sells."""
    traded = float(np.abs(np.asarray(post) - np.asarray(pre)).sum())
    return 0.5 * traded, cost_rate * traded


def value_path(returns) -> np.ndarray:
    return np.concatenate([[1.0], np.cumprod(1.0 + np.asarray(returns, dtype=float))])


def _ratio(num: float, den: float) -> float:
    if den > 0:
        return num / den
    if num > 0:
        return math.inf
    return -math.inf if num < 0 else 0.0


def compute_metrics(records: Sequence[RebalanceRecord] | Sequence[float]) -> dict:
    """Annualised return (geometric), volatility, Sharpe and Sortino (zero
    risk-free rate), maximum drawdown and mean one-sided turnover."""
    if len(records) < 2:
        raise InsufficientRecords("metrics need at least two records")
    if isinstance(records[0], RebalanceRecord):
        r = np.array([rec.realized_return for rec in records])
        turnover = float(np.mean([rec.turnover for rec in records]))
    else:
        r = np.asarray(records, dtype=float)
        turnover = float("nan")
    n = len(r)
    growth = np.prod(1.0 + r)
    ann_return = growth ** (PERIODS_PER_YEAR / n) - 1.0 if growth > 0 else -1.0
    sd = r.std(ddof=1)
    # equal returns carry floating noise in the std; treat it as exactly flat
    if sd <= 1e-15 * max(1.0, np.abs(r).max()):
        sd = 0.0
    ann_vol = sd * math.sqrt(PERIODS_PER_YEAR)
    ann_mean = r.mean() * PERIODS_PER_YEAR
    downside = np.minimum(r, 0.0).std(ddof=1) * math.sqrt(PERIODS_PER_YEAR)
    v = value_path(r)
    peak = np.maximum.accumulate(v)
    mdd = float(np.max(1.0 - v / peak))
    return {
        "ann_return": float(ann_return),
        "ann_vol": float(ann_vol),
        "sharpe": float(_ratio(ann_mean, ann_vol)),
        "sortino": float(_ratio(ann_mean, downside)),
        "max_drawdown": mdd,
        "avg_turnover": turnover,
    }


def _report(name, asset_ids, records, config) -> BacktestReport:
    return BacktestReport(name, tuple(asset_ids), records, **compute_metrics(records), config=config)


def _test_range(panel: ReturnPanel, config: BacktestConfig) -> tuple[int, int]:
    split = int(math.floor(panel.T * config.train_test_split))
    start = max(split, config.window)
    if start >= panel.T:
        raise InsufficientHistory(f"{panel.T} weeks cannot hold a {config.window}-week window plus a test week")
    return start, panel.T


def _liquidate(w_pre: np.ndarray, investable: np.ndarray, asset_ids, cost_rate: float):
    gone = (w_pre != 0) & ~investable
    if not gone.any():
        return w_pre, 0.0, []
    fee = cost_rate * float(np.abs(w_pre[gone]).sum())
    w = w_pre.copy()
    w[gone] = 0.0
    rest = w.sum()
    w = w / rest if abs(rest) > 1e-12 else np.zeros_like(w)
    return w, fee, [asset_ids[i] for i in np.flatnonzero(gone)]


def _intra_turnover(v: np.ndarray, w0: np.ndarray, config: BacktestConfig) -> np.ndarray:
    """Turnover-penalised minimum variance inside one cluster. The cluster's
    current holdings, rescaled to a unit budget, are the reference point;
    synthetic cluster funds carry no turnover so the outer stage is unpenalised."""
    budget = w0.sum()
    ref = w0 / budget if abs(budget) > 1e-8 else np.zeros_like(w0)
    sol = solve_minvar_cvar(MinVarProblem(config.cov_scale * v, ref, config.lam))
    return sol.weights if sol.ok else minvar_closed_form(v)


def _target_weights(window: ReturnPanel, w0: np.ndarray, config: BacktestConfig, diag: dict) -> np.ndarray | None:
    """Optimal weights on the window's assets, or None to hold."""
    est = config.estimator
    try:
        if isinstance(est, EstimatorSpec):
            cov = estimate_covariance(window, est)
        else:
            got = est(window)
            cov = got if isinstance(got, CovEstimate) else CovEstimate(got, window.asset_ids, EstimatorKind.SAMPLE)
        for key in ("delta_star", "kappa"):
            if key in cov.diagnostics:
                diag[key] = cov.diagnostics[key]
        diag["condition"] = condition_number(cov.matrix) if np.any(cov.matrix) else math.inf
        if config.use_nco:
            alloc = nco_allocate(cov, q=max(window.T / window.N, 1.0 + 1e-9), seed=config.seed,
                                 k_max=config.k_max, restarts=config.restarts,
                                 intra=lambda v, idx: _intra_turnover(v, w0[idx], config))
            diag["n_clusters"] = alloc.clustering.K
            diag["quality_z"] = alloc.clustering.quality_z
            return alloc.final
        problem = MinVarProblem(config.cov_scale * cov.matrix, w0, config.lam, config.cvar_constraints,
                                window.returns if config.cvar_constraints else None)
        sol = solve_minvar_cvar(problem)
    except NotSpd as exc:
        diag["status"] = "NotSpd"
        log.info("%s: %s; holding prior weights", window.timestamps[-1].date(), exc)
        return None
    diag["status"] = sol.status.value
    if sol.status is Status.INFEASIBLE:
        diag["min_cvar"] = sol.diagnostics.get("min_cvar")
        log.info("%s: CVaR cap infeasible; holding prior weights", window.timestamps[-1].date())
        # a cold start has nothing to hold: take the least-CVaR portfolio
        return sol.weights if not np.any(w0) else None
    if sol.status is not Status.OPTIMAL and sol.kkt_residual > 1e-6:
        return None
    return sol.weights


def _simulate(panel: ReturnPanel, config: BacktestConfig, start: int, stop: int,
              weight_rule: Callable | None = None) -> list[RebalanceRecord]:
    L = config.window
    if start - L < 0:
        raise InsufficientHistory(f"first rebalance at row {start} needs {L} weeks of history")
    R = panel.returns
    N = panel.N
    finite = np.isfinite(R)
    w_drift = np.zeros(N)
    records = []
    for tau in range(start, stop):
        investable = finite[tau - L:tau].all(axis=0) & finite[tau]
        w_pre, fee, gone = _liquidate(w_drift, investable, panel.asset_ids, config.cost_rate)
        idx = np.flatnonzero(investable)
        diag: dict = {}
        if weight_rule is not None:
            target = weight_rule(idx)
        else:
            window = ReturnPanel(panel.timestamps[tau - L:tau], [panel.asset_ids[i] for i in idx], R[tau - L:tau, idx])
            w0 = w_pre[idx]
            if np.any(w0) and abs(w0.sum() - 1.0) > 1e-9:
                w0 = np.zeros_like(w0)
            target = _target_weights(window, w0, config, diag)
        w_post = np.zeros(N)
        if target is None:
            w_post = w_pre.copy() if np.any(w_pre) else np.where(investable, 1.0 / max(len(idx), 1), 0.0)
            diag.setdefault("held", True)
        else:
            w_post[idx] = target
        turnover, cost = trade_cost(w_pre, w_post, config.cost_rate)
        cost += fee
        r = np.where(investable, R[tau], 0.0)
        gross = float(w_post @ r)
        realized = (1.0 - cost) * (1.0 + gross) - 1.0
        records.append(RebalanceRecord(panel.timestamps[tau], w_pre, w_post, turnover, cost, realized, gone, diag))
        w_drift = w_post * (1.0 + r) / (1.0 + gross) if 1.0 + gross > 0 else np.zeros(N)
    return records


def run_backtest(panel: ReturnPanel, config: BacktestConfig, name: str | None = None,
                 start: int | None = None, stop: int | None = None) -> BacktestReport:
    """Trade every test week: estimate on the trailing window, solve, pay costs
    from the drifted weights, realise the week's return."""
    s0, s1 = _test_range(panel, config)
    start = s0 if start is None else start
    stop = s1 if stop is None else stop
    records = _simulate(panel, config, start, stop)
    if name is None:
        name = config.echo()["estimator"]["kind"] + ("+nco" if config.use_nco else "")
        if config.cvar_constraints:
            name += f"+cvar{len(config.cvar_constraints)}"
    return _report(name, panel.asset_ids, records, config.echo())


def benchmark_market_cap(panel: ReturnPanel, caps: Mapping[str, float], config: BacktestConfig | None = None,
                         start: int | None = None, stop: int | None = None) -> BacktestReport:
    """Static-cap weighted portfolio over the investable assets, rebalanced
    weekly under the same cost model."""
    config = config or BacktestConfig()
    missing = [a for a in panel.asset_ids if a not in caps]
    if missing:
        raise MissingCap(f"no market cap for {missing[:5]}")
    cap = np.array([caps[a] for a in panel.asset_ids], dtype=float)
    s0, s1 = _test_range(panel, config)

    def rule(idx):
        return cap[idx] / cap[idx].sum()

    records = _simulate(panel, config, s0 if start is None else start, s1 if stop is None else stop, rule)
    echo = {"estimator": {"kind": "market-cap"}, "cost_rate": config.cost_rate, "window_length": config.window}
    return _report("market-cap", panel.asset_ids, records, echo)


def default_grid(kind: EstimatorKind | str) -> list[float]:
    kind = EstimatorKind(kind)
    if kind in TUNED_C:
        return [round(0.3 + 0.1 * i, 10) for i in range(8)]
    if kind is EstimatorKind.LEDOIT:
        return [round(0.1 * i, 10) for i in range(1, 11)]
    if kind is EstimatorKind.EWMA:
        return [0.005, 0.01, 0.02, 0.05, 0.1]
    raise ConfigError(f"{kind.value} has no tunable parameter")


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("ROBUSTCOV_THREADS", "1")))
    except ValueError:
        return 1


def cross_validate(panel: ReturnPanel, grid: Sequence[float], config: BacktestConfig,
                   param: str | None = None) -> tuple[float, pd.DataFrame]:
    """Pick the grid value with the best Sharpe averaged over five disjoint
    25-week validation folds at the end of the training segment.

    Returns ``(best, fold_table)``; ties go to the smaller value.
    """
    if not grid:
        raise ConfigError("empty parameter grid")
    if not isinstance(config.estimator, EstimatorSpec):
        raise ConfigError("cross-validation needs an EstimatorSpec")
    param = param or config.estimator.tuned_param
    if param is None:
        raise ConfigError(f"{config.estimator.kind.value} has no tunable parameter")
    split = int(math.floor(panel.T * config.train_test_split))
    first = split - FOLDS * FOLD_WEEKS
    if first - config.window < 0:
        raise InsufficientHistory(
            f"training segment of {split} weeks cannot hold {FOLDS}x{FOLD_WEEKS} validation weeks after a {config.window}-week window")
    jobs = [(float(v), f) for v in grid for f in range(FOLDS)]

    def run(job):
        value, fold = job
        cfg = replace(config, estimator=replace(config.estimator, **{param: value}))
        a = first + fold * FOLD_WEEKS
        recs = _simulate(panel, cfg, a, a + FOLD_WEEKS)
        return compute_metrics(recs)["sharpe"]

    workers = _workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            sharpes = list(pool.map(run, jobs))
    else:
        sharpes = [run(j) for j in jobs]
    table = pd.DataFrame({"param": [j[0] for j in jobs], "fold": [j[1] for j in jobs], "sharpe": sharpes})
    mean = table.groupby("param", sort=True)["sharpe"].mean()
    best = float(mean.index[int(np.argmax(mean.to_numpy()))])  # argmax keeps the first, i.e. smallest
    return best, table
