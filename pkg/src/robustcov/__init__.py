"""Robust covariance estimation and risk-constrained minimum-variance
portfolios with a weekly rolling backtest."""

from .errors import ConfigError, DataError, NumericalError, RobustCovError
from .estimators import CovEstimate, EstimatorKind
from .market_data import PricePanel, ReturnPanel

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CovEstimate",
    "DataError",
    "EstimatorKind",
    "NumericalError",
    "PricePanel",
    "ReturnPanel",
    "RobustCovError",
]
