"""Eigenstructure utilities: Marcenko-Pastur law, eigenvalue de-noising,
condition-bounded SPD repair and diagnostics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .errors import FitFailure
from .estimators import CovEstimate, cov_to_corr

__all__ = [
    "MpModel",
    "EigenSystem",
    "eigensystem",
    "mp_pdf",
    "fit_mp",
    "denoise",
    "psd_repair",
    "condition_number",
    "top_eigenvalues",
]

log = logging.getLogger(__name__)

KDE_GRID_POINTS = 512
SIGMA2_FLOOR = 1e-6
SIGMA2_XTOL = 1e-6
COARSE_POINTS = 96
MIN_EIG_RATIO = 1e-10
SINGULAR_RATIO = 1e-14


@dataclass(frozen=True)
class MpModel:
    sigma2: float
    q: float
    fit_failed: bool = False

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")
        if not self.q > 1:
            raise ValueError(f"q = T/N must exceed 1, got {self.q}")

    @property
    def lambda_minus(self) -> float:
        return self.sigma2 * (1.0 - np.sqrt(1.0 / self.q)) ** 2

    @property
    def lambda_plus(self) -> float:
        return self.sigma2 * (1.0 + np.sqrt(1.0 / self.q)) ** 2


@dataclass(frozen=True)
class EigenSystem:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns

    def rebuild(self, eigenvalues=None) -> np.ndarray:
        lam = self.eigenvalues if eigenvalues is None else np.asarray(eigenvalues)
        m = (self.eigenvectors * lam) @ self.eigenvectors.T
        return 0.5 * (m + m.T)


def eigensystem(matrix) -> EigenSystem:
    a = np.asarray(matrix, dtype=float)
    lam, q = np.linalg.eigh(0.5 * (a + a.T))
    return EigenSystem(lam[::-1].copy(), q[:, ::-1].copy())


def mp_pdf(lam, model: MpModel):
    """Marcenko-Pastur density; zero outside [lambda_minus, lambda_plus]."""
    lam = np.asarray(lam, dtype=float)
    lo, hi = model.lambda_minus, model.lambda_plus
    inside = (lam >= lo) & (lam <= hi) & (lam > 0)
    out = np.zeros_like(lam)
    if model.sigma2 > 0:
        l_in = lam[inside]
        out[inside] = model.q * np.sqrt((hi - l_in) * (l_in - lo)) / (2.0 * np.pi * l_in * model.sigma2)
    return out if out.ndim else float(out)


def _fallback_sigma2(eigenvalues: np.ndarray) -> float:
    med = np.median(eigenvalues)
    return float(np.mean(eigenvalues[eigenvalues <= med]))


def fit_mp(eigenvalues, q: float, upper: float | None = None) -> MpModel:
    """Fit the MP variance scale to a Gaussian KDE of the eigenvalues.

    The KDE (Silverman bandwidth) and the MP density are compared on 512 points
    over [0, 1.5 max eigenvalue]; sigma^2 minimises the squared difference,
    located on a log grid and refined by bounded Brent search. A
    degenerate spectrum or a failed search falls back to the mean of the
    eigenvalues at or below the median, with ``fit_failed`` set. ``upper``
    tightens the search ceiling below the top eigenvalue.
    """
    ev = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    if ev.size < 2:
        raise ValueError("need at least two eigenvalues")
    top = float(ev[0])
    if not top > SIGMA2_FLOOR:
        return MpModel(max(_fallback_sigma2(ev), 0.0), q, fit_failed=True)
    try:
        kde = stats.gaussian_kde(ev, bw_method="silverman")
        grid = np.linspace(0.0, 1.5 * top, KDE_GRID_POINTS)
        empirical = kde(grid)

        def sse(sigma2: float) -> float:
            return float(np.sum((mp_pdf(grid, MpModel(sigma2, q)) - empirical) ** 2))

        ceiling = top if upper is None else min(top, upper)
        # the objective is multimodal (a spike drags the KDE tail out), so a
        # coarse log grid picks the basin before the bounded refinement
        # every spectrum holds some noise, so the bulk must reach the smallest
        # eigenvalue; this also rules out the trivial fit where the support
        # falls between grid points and the MP density reads as zero
        floor = max(SIGMA2_FLOOR, min(float(ev[-1]), ceiling) / (1.0 + np.sqrt(1.0 / q)) ** 2)
        coarse = np.geomspace(floor, ceiling, COARSE_POINTS)
        i = int(np.argmin([sse(v) for v in coarse]))
        lo, hi = coarse[max(i - 1, 0)], coarse[min(i + 1, COARSE_POINTS - 1)]
        res = optimize.minimize_scalar(sse, bounds=(lo, hi), method="bounded",
                                       options={"xatol": SIGMA2_XTOL})
        if not res.success or not np.isfinite(res.x):
            raise FitFailure(res.message)
        return MpModel(float(res.x), q)
    except (np.linalg.LinAlgError, FitFailure, ValueError) as exc:
        log.debug("MP fit fell back: %s", exc)
        return MpModel(_fallback_sigma2(ev), q, fit_failed=True)


def denoise(cov: CovEstimate, q: float) -> tuple[CovEstimate, np.ndarray]:
    """Flatten the noise eigenvalues of the correlation matrix.

    Eigenvalues at or below the fitted MP upper edge are replaced by their
    average, the correlation is rebuilt and rescaled to a unit diagonal, and the
    original standard deviations are reapplied.
    """
    v = cov.matrix
    sd = np.sqrt(np.diag(v))
    corr = cov_to_corr(v)
    es = eigensystem(corr)
    lam = es.eigenvalues
    # correlation eigenvalues average to one, so pure noise cannot have sigma^2 > 1
    model = fit_mp(lam, q, upper=1.0)
    n_signal = int(np.sum(lam > model.lambda_plus))
    adjusted = lam.copy()
    if n_signal < lam.size:
        adjusted[n_signal:] = lam[n_signal:].mean()
    c_tilde = es.rebuild(adjusted)
    d = np.sqrt(np.clip(np.diag(c_tilde), 1e-300, None))
    c = c_tilde / np.outer(d, d)
    np.fill_diagonal(c, 1.0)
    c = 0.5 * (c + c.T)
    out = CovEstimate(c * np.outer(sd, sd), cov.asset_ids, cov.estimator_kind, dict(cov.params),
                      {**cov.diagnostics, "denoised": True, "mp_sigma2": model.sigma2,
                       "lambda_plus": model.lambda_plus, "n_signal": n_signal,
                       "mp_fit_failed": model.fit_failed})
    return out, c


def _clip_level(lam: np.ndarray, kappa: float) -> float:
    """tau minimising sum (clip(lam, tau, kappa tau) - lam)^2.

    The derivative sum_{lam<tau}(tau-lam) - kappa sum_{lam>kappa tau}(lam-kappa tau)
    is non-decreasing and piecewise linear; solve it exactly on the piece where
    it changes sign.
    """
    def slope(tau: float) -> float:
        low = lam < tau
        high = lam > kappa * tau
        return float(np.sum(tau - lam[low]) - kappa * np.sum(lam[high] - kappa * tau))

    pos = lam[lam > 0]
    breaks = np.unique(np.concatenate([pos, pos / kappa]))
    vals = np.array([slope(b) for b in breaks])
    k = int(np.searchsorted(vals, 0.0))  # first breakpoint with slope >= 0
    if k < len(breaks) and vals[k] == 0.0:
        return float(breaks[k])
    lo = breaks[k - 1] if k > 0 else 0.0
    hi = breaks[k] if k < len(breaks) else np.inf
    probe = 0.5 * (lo + hi) if np.isfinite(hi) else lo + 1.0
    low = lam < probe
    high = lam > kappa * probe
    a = low.sum() + kappa**2 * high.sum()
    b = lam[low].sum() + kappa * lam[high].sum()
    return float(b / a)


def psd_repair(matrix, kappa_max: float = 4.0, return_info: bool = False):
    """Nearest (Frobenius) SPD matrix with condition number at most ``kappa_max``.

    Keeps the input's eigenvectors and clips its eigenvalues into
    ``[tau, kappa_max * tau]`` with the optimal ``tau``. Inputs that already
    satisfy the bound come back unchanged. If every eigenvalue is <= 0 the
    result is ``eps * I`` with ``eps = 1e-8 max|lambda|`` and the info flag
    ``all_nonpositive`` is set.
    """
    if not kappa_max >= 1:
        raise ValueError("kappa_max must be >= 1")
    kappa_max = min(float(kappa_max), 1.0 / MIN_EIG_RATIO)
    a = np.asarray(matrix, dtype=float)
    a = 0.5 * (a + a.T)
    es = eigensystem(a)
    lam = es.eigenvalues
    info = {"tau": None, "all_nonpositive": False, "changed": True}
    if lam[-1] > 0 and lam[0] <= kappa_max * lam[-1]:
        info.update(changed=False, tau=float(lam[-1]))
        return (a, info) if return_info else a
    if lam[0] <= 0:
        eps = 1e-8 * float(np.max(np.abs(lam))) or 1e-8
        info.update(all_nonpositive=True, tau=eps)
        out = eps * np.eye(a.shape[0])
        return (out, info) if return_info else out
    tau = _clip_level(lam, kappa_max)
    floor = 1e-8 * float(np.max(np.abs(lam)))
    if tau < floor:
        # convex in tau, so the constrained optimum sits on the floor
        tau = floor
        info["tau_floored"] = True
    mu = np.clip(lam, tau, kappa_max * tau)
    info["tau"] = tau
    out = es.rebuild(mu)
    return (out, info) if return_info else out


def condition_number(matrix) -> float:
    """Ratio of extreme singular values; +inf once the smallest falls below
    1e-14 of the largest."""
    s = np.linalg.svd(np.atleast_2d(np.asarray(matrix, dtype=float)), compute_uv=False)
    if s[0] == 0:
        raise ValueError("condition number of a zero matrix is undefined")
    if s[-1] < SINGULAR_RATIO * s[0]:
        return float("inf")
    return float(s[0] / s[-1])


def top_eigenvalues(matrix, k: int = 10) -> list[float]:
    lam = np.linalg.eigvalsh(0.5 * (np.asarray(matrix) + np.asarray(matrix).T))[::-1]
    return [float(v) for v in lam[:k]]
