"""SVG line charts for backtest reports.

Output is byte-stable across runs: no creation date in the metadata, a fixed
hash salt for element ids and text stored as glyph paths.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .backtest import BacktestReport, value_path  # noqa: E402

__all__ = ["STYLE", "cumulative_return_chart", "max_weight_chart", "cost_chart", "write_charts"]

STYLE = {
    "svg.hashsalt": "robustcov",
    "svg.fonttype": "path",
    "figure.figsize": (7.0, 3.6),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
}


def _dates(report: BacktestReport):
    return [r.date for r in report.records]


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def cumulative_return_chart(reports: Sequence[BacktestReport], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for rep in reports:
            v = value_path(rep.returns)[1:]
            ax.plot(_dates(rep), v - 1.0, label=rep.name)
        ax.set_ylabel("cumulative return")
        ax.yaxis.set_major_formatter(matplotlib.ticker.PercentFormatter(1.0))
        ax.legend(loc="upper left")
        return _save(fig, Path(path))


def max_weight_chart(reports: Sequence[BacktestReport], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for rep in reports:
            ax.plot(_dates(rep), [np.abs(r.post_weights).max() for r in rep.records], label=rep.name)
        ax.set_ylabel("max |weight|")
        ax.legend(loc="upper left")
        return _save(fig, Path(path))


def cost_chart(reports: Sequence[BacktestReport], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for rep in reports:
            ax.plot(_dates(rep), [1e4 * r.cost_paid for r in rep.records], label=rep.name)
        ax.set_ylabel("cost per rebalance (bp)")
        ax.legend(loc="upper right")
        return _save(fig, Path(path))


def write_charts(reports: Sequence[BacktestReport], directory) -> list[Path]:
    d = Path(directory)
    return [
        cumulative_return_chart(reports, d / "cumulative_return.svg"),
        max_weight_chart(reports, d / "max_weight.svg"),
        cost_chart(reports, d / "cost.svg"),
    ]
