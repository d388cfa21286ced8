"""Shared problem fixtures for solver and acceptance tests."""

import numpy as np

from robustcov.solver import CvarConstraint, MinVarProblem

SCENARIO_1 = (CvarConstraint(0.95, 0.05),)
SCENARIO_2 = (CvarConstraint(0.95, 0.05), CvarConstraint(0.99, 0.08))


def heavy_tailed_scenarios(rng, T, N, vol=0.03):
    """Weekly returns with a common factor and t(3) shocks."""
    f = rng.standard_t(3, (T, 1)) * vol * 0.6
    e = rng.standard_t(3, (T, N)) * vol * rng.uniform(0.5, 1.5, N)
    return np.clip(0.001 + f * rng.uniform(0.5, 1.5, N) + e, -0.9, None)


def cvar_fixtures(n_random=12):
    """CVaR problems: both reference scenario sets on a range of sizes, caps tight
    enough to bind on some, plus a few turnover-penalised warm starts."""
    out = []
    rng = np.random.default_rng(4242)
    for i in range(n_random):
        N = int(rng.integers(2, 13))
        T = int(rng.integers(60, 260))
        R = heavy_tailed_scenarios(rng, T, N)
        V = np.cov(R, rowvar=False) + 1e-6 * np.eye(N)
        cons = SCENARIO_1 if i % 2 == 0 else SCENARIO_2
        w0 = None if i % 3 == 0 else rng.dirichlet(np.ones(N))
        lam = 0.0 if i % 4 == 0 else 0.005
        # a cap between the unconstrained CVaR and the feasible minimum makes
        # the constraint active on a third of the fixtures
        if i % 3 == 1:
            from robustcov.solver import empirical_cvar, min_cvar_portfolio, minvar_closed_form
            w_mv = minvar_closed_form(V)
            lo_w, _ = min_cvar_portfolio(R, (cons[0],))
            hi = empirical_cvar(-(R @ w_mv), cons[0].alpha)[0]
            lo = empirical_cvar(-(R @ lo_w), cons[0].alpha)[0]
            cons = (CvarConstraint(cons[0].alpha, lo + 0.5 * (hi - lo)),) + cons[1:]
        out.append(MinVarProblem(V * 52, w0, lam, cons, R))
    return out
