"""Synthetic block-correlated return panels with heavy tails and planted
outliers, used by the tests, the end-to-end experiment and the CLI demo data."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .market_data import PricePanel, ReturnPanel, write_price_table

__all__ = ["BlockMarket", "block_covariance", "simulate_returns", "write_fixture"]


@dataclass(frozen=True)
class BlockMarket:
    n_assets: int = 12
    n_blocks: int = 3
    within: float = 0.6
    across: float = 0.1
    vol_low: float = 0.02
    vol_high: float = 0.04
    drift: float = 0.0015
    df: float | None = 4.0  # Student-t tails; None for a Gaussian bulk
    outlier_prob: float = 0.05  # chance per week of one planted co-jump
    outlier_scale: float = 8.0  # in units of each asset's own vol
    outlier_sign: float = -1.0  # relative sign of the paired jumps
    crash_prob: float = 0.0  # weekly chance that a crash-prone block crashes
    crash_scale: float = 6.0  # crash size in units of each asset's own vol
    crash_blocks: tuple[int, ...] = (0,)

    def blocks(self) -> np.ndarray:
        return np.arange(self.n_assets) * self.n_blocks // self.n_assets


def block_covariance(market: BlockMarket) -> np.ndarray:
    b = market.blocks()
    corr = np.where(b[:, None] == b[None, :], market.within, market.across)
    np.fill_diagonal(corr, 1.0)
    vol = np.linspace(market.vol_low, market.vol_high, market.n_assets)
    return corr * np.outer(vol, vol)


def simulate_returns(weeks: int = 600, seed: int = 0, market: BlockMarket | None = None) -> ReturnPanel:
    """Multivariate Student-t returns with the block covariance, plus planted
    outliers.

    In an outlier week two assets drawn at random jump by ``outlier_scale`` of
    their own volatilities, the second with ``outlier_sign`` times the sign of
    the first. Each event plants a large spurious co-movement between one
    pair; because the pair is random it carries no information about the next
    week.
    """
    market = market or BlockMarket()
    rng = np.random.default_rng(seed)
    cov = block_covariance(market)
    chol = np.linalg.cholesky(cov)
    n = market.n_assets
    z = rng.standard_normal((weeks, n))
    if market.df is None:
        mix = np.ones((weeks, 1))
    else:
        # scale mixture keeps the covariance: t_df has variance df/(df-2)
        mix = np.sqrt(rng.chisquare(market.df, size=(weeks, 1)) / (market.df - 2.0))
    r = market.drift + (z / mix) @ chol.T
    vol = np.sqrt(np.diag(cov))
    for t in np.flatnonzero(rng.random(weeks) < market.outlier_prob):
        i, j = rng.choice(n, size=2, replace=False)
        sign = rng.choice([-1.0, 1.0])
        r[t, i] += sign * market.outlier_scale * vol[i]
        r[t, j] += market.outlier_sign * sign * market.outlier_scale * vol[j]
    if market.crash_prob > 0:
        # a crash hits every member of the block at once; the drift is raised
        # so the expected return is unchanged and only the left tail differs
        blocks = market.blocks()
        for k in market.crash_blocks:
            idx = np.flatnonzero(blocks == k)
            hit = rng.random(weeks) < market.crash_prob
            size = market.crash_scale * vol[idx]
            r[:, idx] += market.crash_prob * size - np.outer(hit, size)
    r = np.maximum(r, -0.9)
    ids = [f"S{k:02d}" for k in range(n)]
    return ReturnPanel(pd.date_range("2006-01-06", periods=weeks, freq="W-FRI"), ids, r)


def write_fixture(directory, weeks: int = 600, seed: int = 0, market: BlockMarket | None = None) -> tuple[Path, Path]:
    """Write ``prices.csv`` (weekly closes starting at 100) and
    ``universe.csv`` (sector = block, caps from a seeded lognormal)."""
    market = market or BlockMarket()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    panel = simulate_returns(weeks, seed, market)
    prices = 100.0 * np.vstack([np.ones(panel.N), np.cumprod(1.0 + panel.returns, axis=0)])
    stamps = panel.timestamps.insert(0, panel.timestamps[0] - pd.Timedelta(weeks=1))
    prices_path = directory / "prices.csv"
    write_price_table(PricePanel(stamps, panel.asset_ids, prices), prices_path)
    caps = np.random.default_rng([seed, 1]).lognormal(mean=4.0, sigma=1.0, size=panel.N)
    universe = pd.DataFrame({"ticker": panel.asset_ids,
                             "sector": [f"B{b}" for b in market.blocks()],
                             "market_cap": np.round(caps, 4)})
    universe_path = directory / "universe.csv"
    universe.to_csv(universe_path, index=False)
    return prices_path, universe_path
