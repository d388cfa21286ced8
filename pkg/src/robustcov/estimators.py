"""Covariance estimators: sample, exponentially weighted, Ledoit-Wolf
constant-correlation shrinkage and the Gerber statistic."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import BadAlpha, BadDelta, ConfigError, DataError, InsufficientSamples
from .market_data import ReturnPanel

__all__ = [
    "EstimatorKind",
    "CovEstimate",
    "SmoothingWeights",
    "GerberCounts",
    "sample_mean_cov",
    "exp_weights",
    "ewma_cov",
    "ledoit_target",
    "ledoit_intensity",
    "ledoit_shrink",
    "ledoit_cov",
    "mad_scale",
    "mad_sigma",
    "gerber_thresholds",
    "gerber_counts",
    "gerber_matrix",
    "gerber_cov",
    "cov_to_corr",
    "MAD_TO_SIGMA",
]

MAD_TO_SIGMA = 1.4826
SYM_TOL = 1e-10


class EstimatorKind(str, enum.Enum):
    SAMPLE = "sample"
    EWMA = "ewma"
    LEDOIT = "ledoit"
    GERBER_STD = "gerber-std"
    GERBER_MAD = "gerber-mad"


@dataclass(frozen=True)
class CovEstimate:
    matrix: np.ndarray
    asset_ids: tuple[str, ...]
    estimator_kind: EstimatorKind
    params: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        n = len(self.asset_ids)
        if m.shape != (n, n):
            raise DataError(f"covariance is {m.shape}, expected {(n, n)}")
        scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
        if not np.allclose(m, m.T, rtol=0.0, atol=SYM_TOL * scale):
            raise DataError("covariance matrix is not symmetric")
        m = 0.5 * (m + m.T)
        if np.any(np.diag(m) < 0):
            raise DataError("covariance has a negative variance")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "asset_ids", tuple(self.asset_ids))
        object.__setattr__(self, "estimator_kind", EstimatorKind(self.estimator_kind))

    @property
    def N(self) -> int:
        return len(self.asset_ids)

    def replace(self, matrix=None, **diagnostics) -> "CovEstimate":
        diag = dict(self.diagnostics)
        diag.update(diagnostics)
        return CovEstimate(self.matrix if matrix is None else matrix, self.asset_ids,
                           self.estimator_kind, dict(self.params), diag)

    def to_csv(self, path, matrix: np.ndarray | None = None) -> None:
        """Row-major CSV, header = asset ids."""
        m = self.matrix if matrix is None else matrix
        with open(path, "w", newline="") as fh:
            fh.write(",".join(self.asset_ids) + "\n")
            for row in m:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _finite_returns(panel: ReturnPanel, min_rows: int = 2) -> np.ndarray:
    x = np.asarray(panel.returns, dtype=float)
    if x.shape[0] < min_rows:
        raise InsufficientSamples(f"need at least {min_rows} observations, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise DataError("estimation window contains missing returns")
    return x


def cov_to_corr(cov: np.ndarray) -> np.ndarray:
    """Correlation of a covariance matrix; zero-variance rows get a unit diagonal
    and zero off-diagonals."""
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    inv = np.divide(1.0, sd, out=np.zeros_like(sd), where=sd > 0)
    corr = cov * np.outer(inv, inv)
    np.fill_diagonal(corr, 1.0)
    return 0.5 * (corr + corr.T)


def sample_mean_cov(panel: ReturnPanel, ddof: int = 1) -> tuple[np.ndarray, CovEstimate]:
    x = _finite_returns(panel)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - ddof)
    return mean, CovEstimate(cov, panel.asset_ids, EstimatorKind.SAMPLE, {"ddof": ddof})


@dataclass(frozen=True)
class SmoothingWeights:
    weights: np.ndarray
    alpha: float


def exp_weights(T: int, alpha: float) -> SmoothingWeights:
    """Weights proportional to (1-alpha)^(T-i), oldest observation first."""
    if not 0.0 < alpha < 1.0:
        raise BadAlpha(f"alpha must lie in (0, 1), got {alpha}")
    if T < 1:
        raise InsufficientSamples("T must be >= 1")
    # log-space keeps tiny alpha and long windows exact
    w = np.exp(np.arange(T - 1, -1, -1) * np.log1p(-alpha))
    return SmoothingWeights(w / w.sum(), alpha)


def ewma_cov(panel: ReturnPanel, alpha: float) -> CovEstimate:
    """Exponentially weighted covariance around the weighted mean.

    Weights sum to one and no effective-sample-size correction is applied, so
    the alpha -> 0 limit is the 1/T-normalised sample covariance.
    """
    x = _finite_returns(panel)
    w = exp_weights(x.shape[0], alpha).weights
    mu = w @ x
    xc = x - mu
    cov = (xc * w[:, None]).T @ xc
    return CovEstimate(cov, panel.asset_ids, EstimatorKind.EWMA, {"alpha": alpha}, {"weighted_mean": mu.tolist()})


def ledoit_target(S: CovEstimate) -> CovEstimate:
    """Constant-correlation target: keep variances, replace every correlation
    by the average pairwise sample correlation."""
    s = S.matrix
    n = s.shape[0]
    var = np.diag(s)
    sd = np.sqrt(var)
    zero = var <= 0
    iu = np.triu_indices(n, 1)
    if n < 2:
        rho_bar = 0.0
    else:
        denom = np.outer(sd, sd)[iu]
        rho = np.divide(s[iu], denom, out=np.zeros_like(denom), where=denom > 0)
        rho_bar = float(rho.mean())
    f = rho_bar * np.outer(sd, sd)
    np.fill_diagonal(f, var)
    return CovEstimate(f, S.asset_ids, EstimatorKind.LEDOIT, {}, {"rho_bar": rho_bar, "zero_variance": bool(zero.any())})


def ledoit_intensity(panel: ReturnPanel, S: CovEstimate, F: CovEstimate) -> tuple[float, float]:
    """Empirical optimal shrinkage intensity towards the constant-correlation target.

    Returns ``(kappa, delta_star)`` with ``kappa = (pi - rho) / gamma`` and
    ``delta_star = clamp(kappa / T, 0, 1)``. ``pi`` and ``rho`` are estimated from
    the demeaned panel with 1/T moments; ``gamma`` is the squared Frobenius
    distance between ``F`` and ``S``, so ``S`` should be the ddof=0 sample
    covariance. If ``gamma`` is zero the target equals the sample and
    ``(nan, 0.0)`` is returned.
    """
    x = _finite_returns(panel)
    t = x.shape[0]
    xc = x - x.mean(axis=0)
    s = xc.T @ xc / t
    var = np.diag(s)
    sd = np.sqrt(var)

    x2 = xc**2
    pi_mat = x2.T @ x2 / t - s**2
    pi_hat = pi_mat.sum()

    theta = (xc**3).T @ xc / t - var[:, None] * s
    np.fill_diagonal(theta, 0.0)
    ratio = np.divide(sd[None, :], sd[:, None], out=np.zeros((len(sd), len(sd))), where=sd[:, None] > 0)
    rho_bar = F.diagnostics.get("rho_bar")
    if rho_bar is None:
        rho_bar = ledoit_target(S).diagnostics["rho_bar"]
    rho_hat = np.trace(pi_mat) + rho_bar * np.sum(ratio * theta)

    gamma_hat = float(np.sum((F.matrix - S.matrix) ** 2))
    if gamma_hat <= 0.0:
        return float("nan"), 0.0
    kappa = (pi_hat - rho_hat) / gamma_hat
    return float(kappa), float(min(1.0, max(0.0, kappa / t)))


def ledoit_shrink(S: CovEstimate, F: CovEstimate, delta: float) -> CovEstimate:
    if not 0.0 <= delta <= 1.0:
        raise BadDelta(f"delta must lie in [0, 1], got {delta}")
    if S.matrix.shape != F.matrix.shape:
        raise DataError("S and F are not conformable")
    if delta == 0.0:
        m = S.matrix
    elif delta == 1.0:
        m = F.matrix
    else:
        m = delta * F.matrix + (1.0 - delta) * S.matrix
    return CovEstimate(m, S.asset_ids, EstimatorKind.LEDOIT, {"delta": delta}, dict(F.diagnostics))


def ledoit_cov(panel: ReturnPanel, delta: float | Literal["auto"] = 0.4) -> CovEstimate:
    """Shrunk covariance. ``delta="auto"`` uses the empirical optimal intensity."""
    _, S = sample_mean_cov(panel, ddof=0)
    F = ledoit_target(S)
    diagnostics = {"rho_bar": F.diagnostics["rho_bar"]}
    if delta == "auto":
        kappa, delta = ledoit_intensity(panel, S, F)
        diagnostics.update(kappa=kappa, delta_star=delta, degenerate_gamma=bool(np.isnan(kappa)))
    out = ledoit_shrink(S, F, float(delta))
    return out.replace(**diagnostics)


def mad_scale(series) -> float:
    """Median absolute deviation about the median."""
    y = np.asarray(series, dtype=float).ravel()
    if y.size == 0:
        raise InsufficientSamples("empty series")
    return float(np.median(np.abs(y - np.median(y))))


def mad_sigma(series) -> float:
    return MAD_TO_SIGMA * mad_scale(series)


def gerber_thresholds(panel: ReturnPanel, c: float, kind: Literal["std", "mad"] = "std") -> np.ndarray:
    if not c > 0:
        raise ConfigError(f"threshold fraction c must be positive, got {c}")
    x = _finite_returns(panel)
    if kind == "std":
        scale = x.std(axis=0, ddof=1)
    elif kind == "mad":
        scale = MAD_TO_SIGMA * np.median(np.abs(x - np.median(x, axis=0)), axis=0)
    else:
        raise ValueError(f"unknown threshold kind {kind!r}")
    return c * scale


@dataclass(frozen=True)
class GerberCounts:
    n_conc: np.ndarray
    n_disc: np.ndarray
    n_nn: np.ndarray
    thresholds: np.ndarray
    T: int


def gerber_counts(panel: ReturnPanel, thresholds) -> GerberCounts:
    """Concordant, discordant and joint-neutral counts for every asset pair.

    An observation is up when ``r >= H`` and down when ``r <= -H``; with a zero
    threshold a zero return is classed as up only.
    """
    x = np.asarray(panel.returns, dtype=float)
    h = np.asarray(thresholds, dtype=float)
    if h.shape != (x.shape[1],):
        raise ValueError("need one threshold per asset")
    if np.any(h < 0):
        raise ValueError("thresholds must be non-negative")
    up = x >= h
    down = (x <= -h) & ~up
    neutral = ~(up | down)
    u, d, nn = (a.astype(np.int64) for a in (up, down, neutral))
    n_conc = u.T @ u + d.T @ d
    n_disc = u.T @ d + d.T @ u
    return GerberCounts(n_conc, n_disc, nn.T @ nn, h, x.shape[0])


def gerber_matrix(counts: GerberCounts, T: int | None = None, variant: Literal["eq3", "eq5"] = "eq3") -> np.ndarray:
    """Gerber co-movement matrix.

    ``eq3`` divides by the number of joint exceedances, ``eq5`` by every
    observation outside the joint-neutral region. Pairs with no evidence get 0;
    the diagonal is 1.
    """
    T = counts.T if T is None else T
    num = (counts.n_conc - counts.n_disc).astype(float)
    if variant == "eq3":
        den = (counts.n_conc + counts.n_disc).astype(float)
    elif variant == "eq5":
        den = (T - counts.n_nn).astype(float)
    else:
        raise ValueError(f"unknown Gerber variant {variant!r}")
    g = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    np.fill_diagonal(g, 1.0)
    return g


def gerber_cov(G, sigma, asset_ids=None, kind: EstimatorKind = EstimatorKind.GERBER_STD, params: dict | None = None) -> CovEstimate:
    g = np.asarray(G, dtype=float)
    s = np.asarray(sigma, dtype=float)
    cov = g * np.outer(s, s)
    eig = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    is_spd = bool(eig[0] > 1e-12 * max(eig[-1], 0.0)) and eig[-1] > 0
    ids = asset_ids if asset_ids is not None else [f"A{k}" for k in range(len(s))]
    return CovEstimate(cov, ids, kind, dict(params or {}), {"is_spd": is_spd, "min_eigenvalue": float(eig[0])})
