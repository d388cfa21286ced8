"""Minimum-variance optimisation with an l1 turnover penalty and optional CVaR
constraints.

The penalised problem

    min  w'Vw + lam * ||w - w0||_1
    s.t. 1'w = 1
         l_j + 1/((1 - alpha_j) T) * sum_t max(loss_t(w) - l_j, 0) <= beta_j

with ``loss_t(w) = -R_t w`` is solved in epigraph form by a primal-dual
interior-point method (Mehrotra predictor-corrector). The Newton system is
reduced analytically: turnover epigraph variables have a diagonal block and
the scenario slacks of each CVaR constraint a diagonal-plus-rank-one block, so
every step costs one dense solve of size N + m + 1.
"""

from __future__ import annotations

import enum
import warnings
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, optimize, sparse

from .errors import ConfigError, NotSpd

__all__ = [
    "CvarConstraint",
    "MinVarProblem",
    "Solution",
    "Status",
    "minvar_closed_form",
    "solve_minvar_l1",
    "solve_minvar_cvar",
    "empirical_cvar",
    "min_cvar_portfolio",
    "verify_kkt",
    "problem_to_dict",
    "solution_to_dict",
    "write_problem_json",
]

DEFAULT_LAMBDA = 0.005
MAX_ITER = 200
FEAS_TOL = 1e-10
DUAL_TOL = 1e-10
GAP_TOL = 1e-12
ACCEPT_KKT = 1e-7
STEP_FRACTION = 0.995
POLISH_TOL = 1e-6


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


@dataclass(frozen=True)
class CvarConstraint:
    alpha: float
    beta: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"CVaR confidence must lie in (0, 1), got {self.alpha}")
        if not self.beta > 0.0:
            raise ConfigError(f"CVaR bound must be positive, got {self.beta}")

    @classmethod
    def parse(cls, text: str) -> "CvarConstraint":
        """Parse ``"alpha:beta"``, e.g. ``"0.95:0.05"``."""
        try:
            a, b = text.split(":")
            return cls(float(a), float(b))
        except ValueError as exc:
            raise ConfigError(f"CVaR constraint must look like ALPHA:BETA, got {text!r}") from exc


@dataclass
class MinVarProblem:
    V: np.ndarray
    w0: np.ndarray | None = None
    lam: float = DEFAULT_LAMBDA
    cvar_constraints: Sequence[CvarConstraint] = ()
    scenarios: np.ndarray | None = None

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float)
        n = self.V.shape[0]
        if self.V.shape != (n, n):
            raise ValueError("V must be square")
        self.w0 = np.zeros(n) if self.w0 is None else np.asarray(self.w0, dtype=float)
        if self.w0.shape != (n,):
            raise ValueError("w0 must have one entry per asset")
        s = self.w0.sum()
        if np.any(self.w0 != 0) and abs(s - 1.0) > 1e-8:
            raise ValueError(f"w0 must sum to 1 or be all zeros (sum={s})")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        self.cvar_constraints = tuple(self.cvar_constraints)
        if self.cvar_constraints:
            if self.scenarios is None:
                raise ValueError("CVaR constraints need a scenario matrix")
            self.scenarios = np.asarray(self.scenarios, dtype=float)
            if self.scenarios.ndim != 2 or self.scenarios.shape[1] != n:
                raise ValueError("scenarios must be T x N")
        elif self.scenarios is not None:
            self.scenarios = np.asarray(self.scenarios, dtype=float)

    @property
    def N(self) -> int:
        return self.V.shape[0]

    def objective(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(w @ self.V @ w + self.lam * np.abs(w - self.w0).sum())


@dataclass
class Solution:
    weights: np.ndarray
    objective: float
    aux_l: list[float]
    status: Status
    kkt_residual: float
    iterations: int = 0
    duals: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


def _check_spd(V: np.ndarray):
    try:
        return linalg.cho_factor(V, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NotSpd(f"covariance is not positive definite: {exc}") from exc


def minvar_closed_form(V) -> np.ndarray:
    """V^-1 e / (e' V^-1 e)."""
    V = np.asarray(V, dtype=float)
    cf = _check_spd(0.5 * (V + V.T))
    x = linalg.cho_solve(cf, np.ones(V.shape[0]))
    return x / x.sum()


def empirical_cvar(losses, alpha: float) -> tuple[float, float]:
    """Minimise ``l + sum(max(loss - l, 0)) / ((1 - alpha) T)`` over ``l``.

    Returns ``(cvar, var_level)`` where ``var_level`` is the smallest minimiser.
    The functional is piecewise linear with kinks at the losses, so it is
    evaluated exactly at every sorted loss.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    x = np.sort(np.asarray(losses, dtype=float).ravel())
    t = x.size
    if t == 0:
        raise ValueError("need at least one loss")
    # excess_k = sum_{i >= k} (x_i - x_k) via suffix sums
    suffix = np.cumsum(x[::-1])[::-1]
    excess = suffix - x * (t - np.arange(t))
    f = x + excess / ((1.0 - alpha) * t)
    best = f.min()
    k = int(np.flatnonzero(f <= best + 1e-12 * max(1.0, abs(best)))[0])
    return float(best), float(x[k])


def min_cvar_portfolio(scenarios, constraints: Sequence[CvarConstraint]) -> tuple[np.ndarray | None, float]:
    """Smallest uniform excess ``s`` with CVaR_j(w) <= beta_j + s for all j on
    the budget line, by linear programming. Returns ``(w, s)``; ``s = -inf``
    when the excess is unbounded below."""
    R = np.asarray(scenarios, dtype=float)
    T, N = R.shape
    m = len(constraints)
    # variables: w (N), l (m), u (m*T), s (1)
    nv = N + m + m * T + 1
    cost = np.zeros(nv)
    cost[-1] = 1.0
    A_ub, b_ub = [], []
    for j, con in enumerate(constraints):
        k = 1.0 / ((1.0 - con.alpha) * T)
        rows = sparse.lil_matrix((T + 1, nv))
        # -R w - l - u <= 0
        rows[:T, :N] = -R
        rows[:T, N + j] = -1.0
        rows[:T, N + m + j * T: N + m + (j + 1) * T] = -sparse.eye(T)
        rows[T, N + j] = 1.0
        rows[T, N + m + j * T: N + m + (j + 1) * T] = k
        rows[T, nv - 1] = -1.0
        A_ub.append(rows.tocsr())
        b_ub.append(np.r_[np.zeros(T), con.beta])
    A_eq = np.zeros((1, nv))
    A_eq[0, :N] = 1.0
    bounds = [(None, None)] * (N + m) + [(0, None)] * (m * T) + [(None, None)]
    res = optimize.linprog(cost, A_ub=sparse.vstack(A_ub), b_ub=np.concatenate(b_ub), A_eq=A_eq, b_eq=[1.0],
                           bounds=bounds, method="highs")
    if res.status == 3:
        return None, float("-inf")
    if res.status != 0:
        raise RuntimeError(f"auxiliary CVaR programme failed: {res.message}")
    return res.x[:N], float(res.x[-1])


class _EpigraphQP:
    """Epigraph form of the problem with the structured Newton solve.

    Variables ``x = [w, t, l_1..l_m, u_1..u_m]`` (``t`` only when lam > 0).
    Inequality rows ``G x <= h``: ``w - t <= w0``, ``-w - t <= -w0``, then per
    constraint ``-u_j <= 0``, ``-R w - l_j - u_j <= 0``,
    ``l_j + k_j 1'u_j <= beta_j``.
    """

    def __init__(self, p: MinVarProblem):
        self.V = 0.5 * (p.V + p.V.T)
        self.N = N = p.N
        self.lam = p.lam
        self.use_t = p.lam > 0
        self.cons = p.cvar_constraints
        self.m = m = len(self.cons)
        self.R = p.scenarios if m else np.zeros((0, N))
        self.T = T = self.R.shape[0] if m else 0
        self.k = np.array([1.0 / ((1.0 - c.alpha) * T) for c in self.cons])
        nt = N if self.use_t else 0
        self.sw = slice(0, N)
        self.st = slice(N, N + nt)
        self.l0 = N + nt
        self.u0 = self.l0 + m
        self.n = self.u0 + m * T
        self.c = np.zeros(self.n)
        self.c[self.st] = p.lam

        blocks, h = [], []
        if self.use_t:
            I = sparse.eye(N, format="csr")
            Z = sparse.csr_matrix((N, self.n - 2 * N))
            blocks += [sparse.hstack([I, -I, Z]), sparse.hstack([-I, -I, Z])]
            h += [p.w0, -p.w0]
        self.row_a = slice(0, nt)
        self.row_b = slice(nt, 2 * nt)
        self.rows_c, self.rows_d, self.rows_e = [], [], []
        r0 = 2 * nt
        Rs = sparse.csr_matrix(self.R)
        for j, con in enumerate(self.cons):
            us = slice(self.u0 + j * T, self.u0 + (j + 1) * T)
            gc = sparse.lil_matrix((T, self.n))
            gc[:, us] = -sparse.eye(T)
            gd = sparse.lil_matrix((T, self.n))
            gd[:, self.sw] = -Rs
            gd[:, self.l0 + j] = -1.0
            gd[:, us] = -sparse.eye(T)
            ge = sparse.lil_matrix((1, self.n))
            ge[0, self.l0 + j] = 1.0
            ge[0, us] = self.k[j]
            blocks += [gc.tocsr(), gd.tocsr(), ge.tocsr()]
            h += [np.zeros(T), np.zeros(T), [con.beta]]
            self.rows_c.append(slice(r0, r0 + T))
            self.rows_d.append(slice(r0 + T, r0 + 2 * T))
            self.rows_e.append(r0 + 2 * T)
            r0 += 2 * T + 1
        self.n_ineq = r0
        self.G = sparse.vstack(blocks, format="csr") if blocks else sparse.csr_matrix((0, self.n))
        if not m:
            # the turnover-only system is tiny; dense products beat sparse overhead
            self.G = self.G.toarray()
        self.GT = self.G.T.tocsr() if m else self.G.T.copy()
        self.h = np.concatenate([np.asarray(v, dtype=float) for v in h]) if h else np.zeros(0)

    def Px(self, x):
        out = np.zeros_like(x)
        out[self.sw] = 2.0 * self.V @ x[self.sw]
        return out

    def u_slice(self, j):
        return slice(self.u0 + j * self.T, self.u0 + (j + 1) * self.T)

    def solve(self, wz, f, g):
        """Solve ``(P + G' diag(wz) G) dx + A' dy = f``, ``A dx = g``."""
        N, m, R = self.N, self.m, self.R
        K = N + m + 1
        H = np.zeros((K, K))
        rhs = np.zeros(K)
        H[:N, :N] = 2.0 * self.V
        rhs[:N] = f[self.sw]
        if self.use_t:
            wa, wb = wz[self.row_a], wz[self.row_b]
            htt = wa + wb
            hwt = wb - wa
            # wa + wb - (wb - wa)^2 / (wa + wb) = 4 wa wb / (wa + wb)
            H[np.arange(N), np.arange(N)] += 4.0 * wa * wb / htt
            rhs[:N] -= hwt * f[self.st] / htt
        cache = []
        for j in range(m):
            wc, wd, we = wz[self.rows_c[j]], wz[self.rows_d[j]], wz[self.rows_e[j]]
            k = self.k[j]
            dm = wc + wd
            rho = we * k * k
            coef = rho / (1.0 + rho * np.sum(1.0 / dm))
            v = wd / dm
            Rv = R.T @ v
            bl = wd + we * k
            fu = f[self.u_slice(j)]
            lj = N + j
            H[:N, :N] += (R.T * (wd * wc / dm)) @ R + coef * np.outer(Rv, Rv)
            sb = np.sum(bl / dm)
            hwl = R.T @ (wd * (wc - we * k) / dm) + coef * Rv * sb
            H[:N, lj] = hwl
            H[lj, :N] = hwl
            H[lj, lj] = we + np.sum((wd * wc - 2.0 * wd * we * k - (we * k) ** 2) / dm) + coef * sb * sb
            sf = np.sum(fu / dm)
            rhs[:N] -= R.T @ (wd * fu / dm) - coef * Rv * sf
            rhs[lj] = f[self.l0 + j] - (np.sum(bl * fu / dm) - coef * sb * sf)
            cache.append((wd, dm, coef, bl, fu))
        H[:N, -1] = 1.0
        H[-1, :N] = 1.0
        rhs[-1] = g
        try:
            # H degrades near the optimum as complementary pairs separate;
            # residuals are checked after every step, so the warning is noise
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", linalg.LinAlgWarning)
                sol = linalg.solve(H, rhs, assume_a="sym", check_finite=False)
        except (linalg.LinAlgError, ValueError):
            sol = np.linalg.lstsq(H, rhs, rcond=None)[0]
        dx = np.zeros(self.n)
        dw = sol[:N]
        dx[self.sw] = dw
        if self.use_t:
            dx[self.st] = (f[self.st] - hwt * dw) / htt
        if m:
            Rdw = R @ dw
            for j, (wd, dm, coef, bl, fu) in enumerate(cache):
                dl = sol[N + j]
                dx[self.l0 + j] = dl
                r = fu - wd * Rdw - bl * dl
                dx[self.u_slice(j)] = r / dm - coef * np.sum(r / dm) / dm
        return dx, float(sol[-1])


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _interior_point(qp: _EpigraphQP, max_iter: int = MAX_ITER):
    n_ineq = qp.n_ineq
    G, GT, h, c = qp.G, qp.GT, qp.h, qp.c
    # least-squares start (Vandenberghe's cvxopt recipe), then shift into the cone
    x, y = qp.solve(np.ones(n_ineq), -c + GT @ h, 1.0)
    s = h - G @ x
    z = -s.copy()
    if s.min() <= 0:
        s += 1.0 - s.min()
    if z.min() <= 0:
        z += 1.0 - z.min()

    scale_d = 1.0 + np.abs(c).max(initial=0.0) + 2.0 * np.abs(qp.V).max()
    scale_p = 1.0 + np.abs(h).max(initial=0.0)
    best = None
    it = 0
    for it in range(1, max_iter + 1):
        w = x[qp.sw]
        r_d = qp.Px(x) + c + GT @ z
        r_d[qp.sw] += y
        r_p = w.sum() - 1.0
        r_g = G @ x + s - h
        mu = float(s @ z) / n_ineq
        res = max(np.abs(r_d).max() / scale_d, abs(r_p) / scale_p, np.abs(r_g).max() / scale_p, mu)
        if best is None or res < best[0]:
            best = (res, x.copy(), y, s.copy(), z.copy(), it)
        if (np.abs(r_d).max() <= DUAL_TOL * scale_d and abs(r_p) <= FEAS_TOL * scale_p
                and np.abs(r_g).max() <= FEAS_TOL * scale_p and mu <= GAP_TOL):
            break
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                wz = z / s
                # predictor
                rc = s * z
                dx, dy = qp.solve(wz, -r_d - GT @ (wz * r_g - rc / s), -r_p)
                dz = wz * (G @ dx + r_g) - rc / s
                ds = -r_g - G @ dx
                a_aff = min(_max_step(s, ds), _max_step(z, dz))
                mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / n_ineq
                sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
                # corrector
                rc = s * z + ds * dz - sigma * mu
                dx, dy = qp.solve(wz, -r_d - GT @ (wz * r_g - rc / s), -r_p)
                dz = wz * (G @ dx + r_g) - rc / s
                ds = -r_g - G @ dx
        except (FloatingPointError, linalg.LinAlgError, ValueError):
            # the scaling has blown up (no usable interior left): keep the best iterate
            break
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dz)) and np.isfinite(dy)):
            break
        a = min(1.0, STEP_FRACTION * min(_max_step(s, ds), _max_step(z, dz)))
        x, y, s, z = x + a * dx, y + a * dy, s + a * ds, z + a * dz
        if a < 1e-12:
            break
    else:
        it = max_iter
    return best, it


def _kkt_abs(qp: _EpigraphQP, x, y, s, z) -> float:
    r_d = qp.Px(x) + qp.c + qp.GT @ z
    r_d[qp.sw] += y
    r_g = qp.G @ x + s - qp.h
    return float(max(np.abs(r_d).max(), abs(x[qp.sw].sum() - 1.0), np.abs(r_g).max(initial=0.0), s @ z))


def _equality_only(p: MinVarProblem) -> Solution:
    """lam = 0 and no CVaR: solve the KKT system [2V 1; 1' 0] directly."""
    n = p.N
    _check_spd(0.5 * (p.V + p.V.T))
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = p.V + p.V.T
    kkt[:n, n] = kkt[n, :n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    sol = linalg.solve(kkt, rhs, assume_a="sym")
    w, nu = sol[:n], sol[n]
    resid = float(max(np.abs(2.0 * p.V @ w + nu).max(), abs(w.sum() - 1.0)))
    return Solution(w, p.objective(w), [], Status.OPTIMAL, resid, 0, {"budget": float(nu)})


def _polish_l1(p: MinVarProblem, w: np.ndarray) -> np.ndarray | None:
    """Active-set refinement of an interior-point answer without CVaR.

    Coordinates that barely moved are pinned to ``w0``; with the trade signs of
    the rest fixed the problem is an equality QP with a direct solve. The
    result is kept only if the signs and the pinned subgradients stay valid.
    """
    n = p.N
    diff = w - p.w0
    pinned = np.abs(diff) <= POLISH_TOL
    free = ~pinned
    if not free.any():
        return None
    sign = np.sign(diff[free])
    Vff = p.V[np.ix_(free, free)]
    nf = int(free.sum())
    kkt = np.zeros((nf + 1, nf + 1))
    kkt[:nf, :nf] = 2.0 * Vff
    kkt[:nf, nf] = kkt[nf, :nf] = 1.0
    rhs = np.r_[-p.lam * sign - 2.0 * p.V[np.ix_(free, pinned)] @ p.w0[pinned], 1.0 - p.w0[pinned].sum()]
    try:
        sol = linalg.solve(kkt, rhs, assume_a="sym")
    except (linalg.LinAlgError, ValueError):
        return None
    out = p.w0.copy()
    out[free] = sol[:nf]
    nu = sol[nf]
    if np.any(np.sign(out[free] - p.w0[free]) != sign):
        return None
    if p.lam > 0:
        g = -(2.0 * p.V[pinned] @ out + nu) / p.lam
        if np.any(np.abs(g) > 1.0 + 1e-9):
            return None
    elif pinned.any():
        return None
    return out


def solve_minvar_cvar(problem: MinVarProblem, max_iter: int = MAX_ITER) -> Solution:
    """Solve the penalised minimum-variance problem with its CVaR constraints.

    Infeasible CVaR caps are certified by the auxiliary programme in
    :func:`min_cvar_portfolio`; the returned solution then carries the
    minimum-CVaR portfolio and its CVaR values as diagnostics.
    """
    p = problem
    _check_spd(0.5 * (p.V + p.V.T))
    if not p.cvar_constraints and p.lam == 0:
        return _equality_only(p)

    if p.cvar_constraints:
        infeasible = _certify_infeasible(p)
        if infeasible is not None:
            return infeasible
        # a slack cap at the unconstrained optimum leaves that optimum in place
        free = solve_minvar_cvar(MinVarProblem(p.V, p.w0, p.lam), max_iter)
        if free.ok:
            levels = [empirical_cvar(-(p.scenarios @ free.weights), c.alpha) for c in p.cvar_constraints]
            if all(cv <= c.beta for (cv, _), c in zip(levels, p.cvar_constraints)):
                free.aux_l = [var for _, var in levels]
                free.duals.update({f"cvar_{j}": 0.0 for j in range(len(levels))})
                free.diagnostics.update(cvar=[cv for cv, _ in levels], cvar_slack_at_free_optimum=True)
                return free

    qp = _EpigraphQP(p)
    (res, x, y, s, z, best_it), iters = _interior_point(qp, max_iter)
    w = x[qp.sw].copy()
    kkt = _kkt_abs(qp, x, y, s, z)
    if not p.cvar_constraints:
        polished = _polish_l1(p, w)
        if polished is not None and p.objective(polished) <= p.objective(w) + 1e-14:
            w = polished
    aux_l = [float(x[qp.l0 + j]) for j in range(qp.m)]
    duals = {"budget": float(y)}
    for j in range(qp.m):
        duals[f"cvar_{j}"] = float(z[qp.rows_e[j]])
    cvars = [empirical_cvar(-(p.scenarios @ w), con.alpha)[0] for con in p.cvar_constraints]
    diagnostics = {"cvar": cvars, "scaled_residual": res}
    ok = (kkt <= ACCEPT_KKT and abs(w.sum() - 1.0) <= 1e-8
          and all(cv <= con.beta + ACCEPT_KKT for cv, con in zip(cvars, p.cvar_constraints)))
    status = Status.OPTIMAL if ok else Status.MAX_ITER
    return Solution(w, p.objective(w), aux_l, status, kkt, iters, duals, diagnostics)


def _certify_infeasible(p: MinVarProblem) -> Solution | None:
    R = p.scenarios
    candidates = [minvar_closed_form(p.V), np.full(p.N, 1.0 / p.N)]
    if np.any(p.w0 != 0):
        candidates.append(p.w0)
    for w in candidates:
        if all(empirical_cvar(-(R @ w), c.alpha)[0] < c.beta for c in p.cvar_constraints):
            return None
    w, excess = min_cvar_portfolio(R, p.cvar_constraints)
    if w is None or excess <= 1e-9:
        return None
    cvars = [empirical_cvar(-(R @ w), c.alpha)[0] for c in p.cvar_constraints]
    return Solution(w, p.objective(w), [], Status.INFEASIBLE, float("nan"), 0, {},
                    {"min_cvar": cvars, "min_excess": excess})


def solve_minvar_l1(problem: MinVarProblem, max_iter: int = MAX_ITER) -> Solution:
    if problem.cvar_constraints:
        raise ValueError("problem has CVaR constraints; use solve_minvar_cvar")
    return solve_minvar_cvar(problem, max_iter)


def verify_kkt(problem: MinVarProblem, solution: Solution | np.ndarray, tol: float = 1e-7) -> dict:
    """Check first-order optimality of ``w`` from scratch.

    Works from the weights alone: multipliers are recovered by a small linear
    programme that minimises the infinity-norm stationarity residual over the
    budget multiplier, subgradients of the l1 term and of each CVaR, and
    non-negative CVaR multipliers (fixed to zero for slack constraints).
    """
    p = problem
    w = np.asarray(solution.weights if isinstance(solution, Solution) else solution, dtype=float)
    N = p.N
    grad = 2.0 * p.V @ w
    diff = w - p.w0
    free = np.abs(diff) <= tol
    fixed_sign = np.where(free, 0.0, np.sign(diff))
    base = grad + p.lam * fixed_sign

    report = {"budget": float(abs(w.sum() - 1.0)), "cvar_violation": 0.0, "dual_feasibility": 0.0,
              "complementarity": 0.0, "multipliers": {}}
    # column blocks: nu | g_free | per active j: mu_j, phi_j(ties) | e
    cols = ["nu"] + [f"g{i}" for i in np.flatnonzero(free)] if p.lam > 0 else ["nu"]
    A_cols = [np.ones(N)] + ([np.eye(N)[:, i] * p.lam for i in np.flatnonzero(free)] if p.lam > 0 else [])
    bounds = [(None, None)] + ([(-1.0, 1.0)] * int(free.sum()) if p.lam > 0 else [])
    eq_rows = []
    mu_index = {}
    for j, con in enumerate(p.cvar_constraints):
        losses = -(p.scenarios @ w)
        cvar, var = empirical_cvar(losses, con.alpha)
        report["cvar_violation"] = max(report["cvar_violation"], cvar - con.beta)
        if abs(cvar - con.beta) > tol:
            continue  # slack: multiplier is zero
        k = 1.0 / ((1.0 - con.alpha) * len(losses))
        tie_tol = tol * max(1.0, abs(var))
        above = losses > var + tie_tol
        ties = np.abs(losses - var) <= tie_tol
        start = len(A_cols)
        # mu_j column carries the strictly-above-VaR part of the subgradient
        A_cols.append(-k * p.scenarios[above].sum(axis=0))
        bounds.append((0.0, None))
        cols.append(f"mu{j}")
        mu_index[j] = start
        for t in np.flatnonzero(ties):
            A_cols.append(-k * p.scenarios[t])
            bounds.append((0.0, None))
            cols.append(f"phi{j}_{t}")
        eq_rows.append((start, k * above.sum() - 1.0, list(range(start + 1, len(A_cols))), k))
    nvar = len(A_cols) + 1  # + e
    A = np.column_stack(A_cols) if A_cols else np.zeros((N, 0))
    # -e <= base + A v <= e
    A_ub = np.vstack([np.hstack([A, -np.ones((N, 1))]), np.hstack([-A, -np.ones((N, 1))])])
    b_ub = np.r_[-base, base]
    extra_ub, extra_b, A_eq, b_eq = [], [], [], []
    for start, above_coef, tie_cols, k in eq_rows:
        row = np.zeros(nvar)
        row[start] = above_coef
        row[tie_cols] = k
        A_eq.append(row)
        b_eq.append(0.0)
        for tc in tie_cols:  # phi <= mu
            r = np.zeros(nvar)
            r[tc], r[start] = 1.0, -1.0
            extra_ub.append(r)
            extra_b.append(0.0)
    if extra_ub:
        A_ub = np.vstack([A_ub, np.array(extra_ub)])
        b_ub = np.r_[b_ub, extra_b]
    cost = np.zeros(nvar)
    cost[-1] = 1.0
    res = optimize.linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=np.array(A_eq) if A_eq else None,
                           b_eq=b_eq or None, bounds=bounds + [(0.0, None)], method="highs")
    if res.status == 0:
        report["stationarity"] = float(res.x[-1])
        report["multipliers"]["budget"] = float(res.x[0])
        for j, idx in mu_index.items():
            report["multipliers"][f"cvar_{j}"] = float(res.x[idx])
    else:
        report["stationarity"] = float("inf")
    for j, con in enumerate(p.cvar_constraints):
        mu = report["multipliers"].get(f"cvar_{j}", 0.0)
        report["dual_feasibility"] = max(report["dual_feasibility"], -mu)
        cvar = empirical_cvar(-(p.scenarios @ w), con.alpha)[0]
        report["complementarity"] = max(report["complementarity"], abs(mu * (cvar - con.beta)))
    report["cvar_violation"] = max(report["cvar_violation"], 0.0)
    report["max_residual"] = max(report["budget"], report["cvar_violation"], report["dual_feasibility"],
                                 report["complementarity"], report["stationarity"])
    return report


SIDECAR_THRESHOLD = 50


def _matrix_payload(name: str, m: np.ndarray, sidecar_dir: Path | None):
    if sidecar_dir is not None and max(m.shape) > SIDECAR_THRESHOLD:
        path = Path(sidecar_dir) / f"{name}.csv"
        np.savetxt(path, m, delimiter=",", fmt="%.17g")
        return {"csv": path.name, "shape": list(m.shape)}
    return m.tolist()


def problem_to_dict(p: MinVarProblem, sidecar_dir=None) -> dict:
    """JSON-ready problem; matrices above N = 50 go to CSV side files."""
    return {
        "V": _matrix_payload("V", p.V, sidecar_dir),
        "w0": p.w0.tolist(),
        "lambda": p.lam,
        "cvar_constraints": [{"alpha": c.alpha, "beta": c.beta} for c in p.cvar_constraints],
        "scenarios": None if p.scenarios is None else _matrix_payload("scenarios", p.scenarios, sidecar_dir),
    }


def solution_to_dict(s: Solution) -> dict:
    def clean(v):
        return None if isinstance(v, float) and not np.isfinite(v) else v

    return {
        "weights": [float(v) for v in s.weights],
        "objective": clean(float(s.objective)),
        "aux_l": [float(v) for v in s.aux_l],
        "status": s.status.value,
        "kkt_residual": clean(float(s.kkt_residual)),
        "iterations": s.iterations,
        "duals": {k: clean(v) for k, v in s.duals.items()},
    }


def write_problem_json(path, problem: MinVarProblem, solution: Solution | None = None) -> None:
    path = Path(path)
    doc = {"problem": problem_to_dict(problem, path.parent)}
    if solution is not None:
        doc["solution"] = solution_to_dict(solution)
    path.write_text(json.dumps(doc, indent=2))
