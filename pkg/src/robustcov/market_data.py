"""Price/return panels: CSV ingestion, weekly resampling, universe selection and
rolling estimation windows."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DataError,
    DuplicateDate,
    EmptyPanel,
    InsufficientHistory,
    MalformedCsv,
    MissingCap,
)

__all__ = [
    "PricePanel",
    "ReturnPanel",
    "SectorTooSmall",
    "load_price_table",
    "load_universe",
    "to_weekly_returns",
    "select_universe",
    "rolling_window",
    "write_price_table",
]


class SectorTooSmall(UserWarning):
    """A sector holds fewer assets than requested; all of them were kept."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PricePanel:
    timestamps: pd.DatetimeIndex
    asset_ids: tuple[str, ...]
    prices: np.ndarray
    sector_of: Mapping[str, str] = field(default_factory=dict)
    market_cap_of: Mapping[str, float] | None = None
    dropped_rows: int = 0

    def __post_init__(self):
        object.__setattr__(self, "timestamps", pd.DatetimeIndex(self.timestamps))
        object.__setattr__(self, "asset_ids", tuple(self.asset_ids))
        object.__setattr__(self, "prices", _frozen(self.prices))
        if self.prices.ndim != 2 or self.prices.shape != (len(self.timestamps), len(self.asset_ids)):
            raise DataError("price matrix shape does not match timestamps x asset_ids")
        if len(set(self.asset_ids)) != len(self.asset_ids):
            raise DataError("asset ids must be unique")
        if self.timestamps.has_duplicates:
            raise DuplicateDate("timestamps must be unique")
        if not self.timestamps.is_monotonic_increasing:
            raise DataError("timestamps must be strictly increasing")
        finite = np.isfinite(self.prices)
        if np.any(self.prices[finite] <= 0):
            raise DataError("prices must be strictly positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.prices.shape

    def with_universe(self, sector_of: Mapping[str, str], market_cap_of: Mapping[str, float] | None = None) -> "PricePanel":
        return PricePanel(self.timestamps, self.asset_ids, self.prices, dict(sector_of),
                          None if market_cap_of is None else dict(market_cap_of), self.dropped_rows)

    def subset(self, asset_ids: Sequence[str]) -> "PricePanel":
        idx = [self.asset_ids.index(a) for a in asset_ids]
        caps = None if self.market_cap_of is None else {a: self.market_cap_of[a] for a in asset_ids if a in self.market_cap_of}
        return PricePanel(self.timestamps, asset_ids, self.prices[:, idx],
                          {a: self.sector_of[a] for a in asset_ids if a in self.sector_of}, caps, self.dropped_rows)


@dataclass(frozen=True)
class ReturnPanel:
    """T x N simple returns. NaN marks an asset without a quote in that week
    (not listed yet, or delisted)."""

    timestamps: pd.DatetimeIndex
    asset_ids: tuple[str, ...]
    returns: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "timestamps", pd.DatetimeIndex(self.timestamps))
        object.__setattr__(self, "asset_ids", tuple(self.asset_ids))
        object.__setattr__(self, "returns", _frozen(self.returns))
        if self.returns.ndim != 2 or self.returns.shape != (len(self.timestamps), len(self.asset_ids)):
            raise DataError("return matrix shape does not match timestamps x asset_ids")
        finite = np.isfinite(self.returns)
        if np.any(self.returns[finite] <= -1.0):
            raise DataError("simple returns must exceed -1")

    @classmethod
    def from_array(cls, returns, asset_ids: Sequence[str] | None = None, start: str = "2000-01-07") -> "ReturnPanel":
        """Wrap a bare array with weekly Friday timestamps and generic ids."""
        r = np.atleast_2d(np.asarray(returns, dtype=float))
        if asset_ids is None:
            asset_ids = [f"A{k}" for k in range(r.shape[1])]
        return cls(pd.date_range(start, periods=r.shape[0], freq="W-FRI"), asset_ids, r)

    @property
    def T(self) -> int:
        return self.returns.shape[0]

    @property
    def N(self) -> int:
        return self.returns.shape[1]

    def available(self) -> np.ndarray:
        """Mask of assets with a finite return in every row."""
        return np.all(np.isfinite(self.returns), axis=0)

    def take_assets(self, mask_or_idx) -> "ReturnPanel":
        idx = np.flatnonzero(mask_or_idx) if np.asarray(mask_or_idx).dtype == bool else np.asarray(mask_or_idx)
        return ReturnPanel(self.timestamps, [self.asset_ids[i] for i in idx], self.returns[:, idx])

    def slice_rows(self, start: int, stop: int) -> "ReturnPanel":
        return ReturnPanel(self.timestamps[start:stop], self.asset_ids, self.returns[start:stop])


def load_price_table(path, date_column: str | None = None, drop_incomplete: bool = True) -> PricePanel:
    """Read a ``date,<TICKER>,...`` price CSV.

    Rows with a blank price are dropped (``drop_incomplete``) and counted in
    ``PricePanel.dropped_rows``; with ``drop_incomplete=False`` they are kept
    as NaN so that listings and delistings survive into the return panel.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"price file not found: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise MalformedCsv(f"{path}: {exc}") from exc
    if raw.shape[1] < 2:
        raise MalformedCsv(f"{path}: need a date column and at least one ticker column")
    date_col = date_column or raw.columns[0]
    tickers = [c for c in raw.columns if c != date_col]

    try:
        dates = pd.to_datetime(raw[date_col].str.strip(), format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise MalformedCsv(f"{path}: unparseable date ({exc})") from exc

    values = np.empty((len(raw), len(tickers)))
    for k, col in enumerate(tickers):
        cells = raw[col].str.strip()
        blank = cells == ""
        try:
            values[~blank.to_numpy(), k] = cells[~blank].astype(float).to_numpy()
        except ValueError as exc:
            raise MalformedCsv(f"{path}: column {col!r}: {exc}") from exc
        values[blank.to_numpy(), k] = np.nan

    if dates.duplicated().any():
        dup = dates[dates.duplicated()].iloc[0]
        raise DuplicateDate(f"{path}: repeated date {dup.date()}")

    order = np.argsort(dates.to_numpy(), kind="stable")
    dates = pd.DatetimeIndex(dates.to_numpy()[order])
    values = values[order]

    dropped = 0
    if drop_incomplete:
        keep = np.all(np.isfinite(values), axis=1)
        dropped = int((~keep).sum())
        dates, values = dates[keep], values[keep]
    if len(dates) == 0:
        raise EmptyPanel(f"{path}: no usable rows")
    return PricePanel(dates, tickers, values, dropped_rows=dropped)


def write_price_table(panel: PricePanel, path) -> None:
    df = pd.DataFrame(panel.prices, index=panel.timestamps.strftime("%Y-%m-%d"), columns=list(panel.asset_ids))
    df.index.name = "date"
    df.to_csv(path, float_format="%.10g")


def load_universe(path) -> tuple[dict[str, str], dict[str, float]]:
    """Read a ``ticker,sector,market_cap`` CSV into (sector_of, market_cap_of)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"universe file not found: {path}")
    sector_of: dict[str, str] = {}
    cap_of: dict[str, float] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"ticker", "sector", "market_cap"} <= set(reader.fieldnames):
            raise MalformedCsv(f"{path}: header must be ticker,sector,market_cap")
        for line, row in enumerate(reader, start=2):
            ticker = row["ticker"].strip()
            sector_of[ticker] = row["sector"].strip()
            cap = row["market_cap"].strip()
            if cap == "":
                continue
            try:
                value = float(cap)
            except ValueError as exc:
                raise MalformedCsv(f"{path}:{line}: bad market_cap {cap!r}") from exc
            if not value > 0:
                raise MalformedCsv(f"{path}:{line}: market_cap must be positive")
            cap_of[ticker] = value
    return sector_of, cap_of


def to_weekly_returns(panel: PricePanel) -> ReturnPanel:
    """Keep the last observation of each ISO calendar week, then take simple returns."""
    iso = panel.timestamps.isocalendar()
    week_key = (iso["year"].to_numpy().astype(np.int64) * 100 + iso["week"].to_numpy().astype(np.int64))
    last_of_week = np.r_[week_key[1:] != week_key[:-1], True]
    prices = panel.prices[last_of_week]
    stamps = panel.timestamps[last_of_week]
    if len(stamps) < 2:
        raise EmptyPanel("need at least two weekly observations to form a return")
    with np.errstate(invalid="ignore"):
        rets = prices[1:] / prices[:-1] - 1.0
    return ReturnPanel(stamps[1:], panel.asset_ids, rets)


def select_universe(panel: PricePanel, per_sector: int) -> list[str]:
    """Top ``per_sector`` assets by market cap in every sector.

    Output order is by sector label, then descending cap; equal caps resolve by
    ascending asset id.
    """
    if per_sector < 1:
        raise ValueError("per_sector must be >= 1")
    caps = panel.market_cap_of or {}
    missing = [a for a in panel.asset_ids if a not in caps]
    if missing:
        raise MissingCap(f"no market cap for {missing[:5]}")
    unsectored = [a for a in panel.asset_ids if a not in panel.sector_of]
    if unsectored:
        raise DataError(f"no sector for {unsectored[:5]}")

    by_sector: dict[str, list[str]] = {}
    for a in panel.asset_ids:
        by_sector.setdefault(panel.sector_of[a], []).append(a)
    chosen: list[str] = []
    for sector in sorted(by_sector):
        members = sorted(by_sector[sector], key=lambda a: (-caps[a], a))
        if len(members) < per_sector:
            warnings.warn(f"sector {sector!r} has {len(members)} assets < {per_sector}", SectorTooSmall, stacklevel=2)
        chosen.extend(members[:per_sector])
    return chosen


def rolling_window(panel: ReturnPanel, end_index: int, length: int) -> ReturnPanel:
    """Rows ``end_index - length .. end_index - 1``; row ``end_index`` is the
    week being traded and is never included."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if end_index - length < 0 or end_index > panel.T:
        raise InsufficientHistory(f"window of {length} ending before row {end_index} needs more history")
    return panel.slice_rows(end_index - length, end_index)
