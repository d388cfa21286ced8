import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustcov.errors import ConfigError, NotSpd
from robustcov.solver import (
    CvarConstraint,
    MinVarProblem,
    Status,
    empirical_cvar,
    minvar_closed_form,
    solve_minvar_cvar,
    solve_minvar_l1,
    verify_kkt,
)
from robustcov.spectral import condition_number

from conftest import random_spd
from fixtures import SCENARIO_1, SCENARIO_2, cvar_fixtures, heavy_tailed_scenarios


def ru_brute(losses, alpha, grid):
    vals = [l + np.maximum(losses - l, 0).sum() / ((1 - alpha) * len(losses)) for l in grid]
    i = int(np.argmin(vals))
    return vals[i], grid[i]


# ---------------------------------------------------------------- closed form

def test_closed_form_examples():
    assert np.allclose(minvar_closed_form(np.diag([1.0, 4.0])), [0.8, 0.2])
    assert np.allclose(minvar_closed_form(np.eye(7)), 1 / 7)
    v = np.array([[1, 0.99], [0.99, 1]])
    assert np.allclose(minvar_closed_form(v), [0.5, 0.5])
    assert condition_number(v) == pytest.approx(199, rel=1e-9)


def test_not_spd():
    with pytest.raises(NotSpd):
        minvar_closed_form(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NotSpd):
        solve_minvar_l1(MinVarProblem(np.array([[1.0, 2.0], [2.0, 1.0]])))


# ---------------------------------------------------------------- l1 penalty

@pytest.mark.parametrize("seed", range(20))
def test_lambda_zero_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 21))
    v = random_spd(rng, n)
    w0 = rng.dirichlet(np.ones(n))
    sol = solve_minvar_l1(MinVarProblem(v, w0, 0.0))
    assert sol.ok
    assert np.abs(sol.weights - minvar_closed_form(v)).max() <= 1e-6


def test_lambda_huge_returns_prior(rng):
    v = random_spd(rng, 6)
    w0 = rng.dirichlet(np.ones(6))
    sol = solve_minvar_l1(MinVarProblem(v, w0, 1e6))
    assert np.abs(sol.weights - w0).max() <= 1e-6


def test_two_asset_grid_oracle():
    p = MinVarProblem(np.diag([1.0, 4.0]), np.array([0.5, 0.5]), 0.005)
    sol = solve_minvar_l1(p)
    grid = np.arange(0.4, 0.9, 1e-5)
    obj = [p.objective(np.array([g, 1 - g])) for g in grid]
    best = grid[int(np.argmin(obj))]
    assert 0.5 <= sol.weights[0] <= 0.8
    assert abs(sol.weights[0] - best) <= 1e-5
    assert p.objective(sol.weights) <= min(obj) + 1e-12
    assert verify_kkt(p, sol)["max_residual"] <= 1e-7


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 12), st.floats(0.0, 0.05))
def test_l1_kkt(seed, n, lam):
    rng = np.random.default_rng(seed)
    v = random_spd(rng, n) * 0.05
    w0 = rng.dirichlet(np.ones(n)) if seed % 2 else None
    p = MinVarProblem(v, w0, lam)
    sol = solve_minvar_l1(p)
    assert sol.status is Status.OPTIMAL
    assert abs(sol.weights.sum() - 1) <= 1e-8
    assert sol.kkt_residual <= 1e-7
    rep = verify_kkt(p, sol)
    assert rep["max_residual"] <= 1e-6
    # no feasible perturbation along the budget line improves the objective
    for i, j in [(0, 1), (n - 1, 0)]:
        for h in (1e-4, -1e-4):
            d = np.zeros(n)
            d[i], d[j] = h, -h
            assert p.objective(sol.weights + d) >= sol.objective - 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    v = random_spd(rng, 5)
    a = solve_minvar_l1(MinVarProblem(v, None, 0.0)).weights
    b = solve_minvar_l1(MinVarProblem(c * v, None, 0.0)).weights
    assert np.allclose(a, b, atol=1e-9)


# ---------------------------------------------------------------- CVaR

def test_empirical_cvar_example():
    losses = 0.01 * np.arange(1, 101)
    cvar, var = empirical_cvar(losses, 0.95)
    assert abs(cvar - 0.98) <= 1e-9
    assert var == pytest.approx(0.95, abs=1e-12)
    b_val, b_l = ru_brute(losses, 0.95, np.round(np.arange(0.0, 1.01, 1e-4), 10))
    assert abs(cvar - b_val) <= 1e-9 and abs(var - b_l) <= 1e-9


def test_empirical_cvar_constant_and_limit(rng):
    assert empirical_cvar(np.full(17, 0.03), 0.9)[0] == pytest.approx(0.03, abs=1e-15)
    x = rng.normal(0, 0.02, 250)
    assert abs(empirical_cvar(x, 1e-9)[0] - x.mean()) <= 1e-6


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=40), st.floats(0.01, 0.99))
def test_empirical_cvar_is_ru_minimum(losses, alpha):
    x = np.asarray(losses)
    cvar, var = empirical_cvar(x, alpha)
    f = lambda l: l + np.maximum(x - l, 0).sum() / ((1 - alpha) * x.size)
    assert f(var) == pytest.approx(cvar, abs=1e-12)
    for l in np.r_[x, np.linspace(-1.5, 1.5, 61)]:
        assert f(l) >= cvar - 1e-12
    # smallest minimiser: every kink to its left is strictly worse
    for l in x[x < var]:
        assert f(l) > cvar + 1e-13


def test_empty_constraints_reduce_to_l1(rng):
    v = random_spd(rng, 5)
    w0 = rng.dirichlet(np.ones(5))
    a = solve_minvar_l1(MinVarProblem(v, w0, 0.01))
    b = solve_minvar_cvar(MinVarProblem(v, w0, 0.01, (), None))
    assert np.allclose(a.weights, b.weights, atol=1e-12)


def test_single_asset_both_branches(rng):
    R = rng.normal(0.001, 0.03, (200, 1))
    c = empirical_cvar(-R[:, 0], 0.95)[0]
    ok = solve_minvar_cvar(MinVarProblem(np.array([[1e-3]]), None, 0.0, (CvarConstraint(0.95, c * 1.01),), R))
    assert ok.status is Status.OPTIMAL and ok.weights[0] == pytest.approx(1.0, abs=1e-10)
    bad = solve_minvar_cvar(MinVarProblem(np.array([[1e-3]]), None, 0.0, (CvarConstraint(0.95, c * 0.99),), R))
    assert bad.status is Status.INFEASIBLE
    assert bad.diagnostics["min_cvar"][0] == pytest.approx(c, rel=1e-9)


def test_cvar_two_asset_grid():
    rng = np.random.default_rng(5)
    R = heavy_tailed_scenarios(rng, 150, 2)
    V = np.cov(R, rowvar=False) * 52
    grid = np.arange(-1.0, 2.0, 1e-4)
    cv = np.array([empirical_cvar(-(R @ [g, 1 - g]), 0.95)[0] for g in grid])
    beta = 0.5 * (cv.min() + cv[np.argmin([np.array([g, 1 - g]) @ V @ [g, 1 - g] for g in grid])])
    p = MinVarProblem(V, None, 0.0, (CvarConstraint(0.95, beta),), R)
    sol = solve_minvar_cvar(p)
    assert sol.ok
    feasible = cv <= beta
    obj = np.array([p.objective(np.array([g, 1 - g])) for g in grid])
    best = obj[feasible].min()
    assert sol.objective <= best + 1e-9
    assert abs(sol.weights[0] - grid[feasible][np.argmin(obj[feasible])]) <= 2e-3
    assert empirical_cvar(-(R @ sol.weights), 0.95)[0] <= beta + 1e-6


@pytest.mark.parametrize("idx", range(12))
def test_cvar_fixtures_reverified(idx):
    p = cvar_fixtures()[idx]
    sol = solve_minvar_cvar(p)
    assert sol.status in (Status.OPTIMAL, Status.INFEASIBLE)
    if sol.status is Status.OPTIMAL:
        for con in p.cvar_constraints:
            assert empirical_cvar(-(p.scenarios @ sol.weights), con.alpha)[0] <= con.beta + 1e-6
        assert abs(sol.weights.sum() - 1) <= 1e-8
        rep = verify_kkt(p, sol)
        assert rep["max_residual"] <= 1e-6


def test_active_constraint_multiplier():
    p = cvar_fixtures()[1]
    sol = solve_minvar_cvar(p)
    assert sol.ok
    cv = empirical_cvar(-(p.scenarios @ sol.weights), p.cvar_constraints[0].alpha)[0]
    assert abs(cv - p.cvar_constraints[0].beta) <= 1e-7
    rep = verify_kkt(p, sol)
    assert rep["multipliers"]["cvar_0"] > 0
    assert rep["cvar_violation"] <= 1e-7
    assert rep["stationarity"] <= 1e-6


def test_beta_relaxation_monotone():
    p0 = cvar_fixtures()[1]
    alpha, beta = p0.cvar_constraints[0].alpha, p0.cvar_constraints[0].beta
    prev = np.inf
    for b in beta * np.array([1.0, 1.05, 1.1, 1.2, 1.5, 2.0, 5.0]):
        p = MinVarProblem(p0.V, p0.w0, p0.lam, (CvarConstraint(alpha, b),), p0.scenarios)
        obj = solve_minvar_cvar(p).objective
        assert obj <= prev + 1e-9
        prev = obj


def test_second_constraint_never_helps():
    rng = np.random.default_rng(8)
    for _ in range(4):
        R = heavy_tailed_scenarios(rng, 200, 6)
        V = np.cov(R, rowvar=False) * 52
        one = solve_minvar_cvar(MinVarProblem(V, None, 0.005, SCENARIO_1, R))
        two = solve_minvar_cvar(MinVarProblem(V, None, 0.005, SCENARIO_2, R))
        if one.ok and two.ok:
            assert two.objective >= one.objective - 1e-9


def test_infeasible_reports_minimum():
    rng = np.random.default_rng(3)
    R = heavy_tailed_scenarios(rng, 120, 4, vol=0.08)
    p = MinVarProblem(np.cov(R, rowvar=False), None, 0.0, (CvarConstraint(0.95, 1e-4),), R)
    sol = solve_minvar_cvar(p)
    assert sol.status is Status.INFEASIBLE
    assert sol.diagnostics["min_cvar"][0] > 1e-4
    assert empirical_cvar(-(R @ sol.weights), 0.95)[0] == pytest.approx(sol.diagnostics["min_cvar"][0])


def test_cvar_parse():
    assert CvarConstraint.parse("0.95:0.05") == CvarConstraint(0.95, 0.05)
    for bad in ("0.95", "1.2:0.05", "0.9:-1", "a:b"):
        with pytest.raises(ConfigError):
            CvarConstraint.parse(bad)


# ---------------------------------------------------------------- verify_kkt

def test_verify_kkt_closed_form(rng):
    v = random_spd(rng, 6)
    p = MinVarProblem(v, None, 0.0)
    rep = verify_kkt(p, minvar_closed_form(v))
    assert rep["max_residual"] <= 1e-10


def test_verify_kkt_perturbed(rng):
    v = random_spd(rng, 6)
    p = MinVarProblem(v, rng.dirichlet(np.ones(6)), 0.005)
    w = solve_minvar_l1(p).weights.copy()
    assert verify_kkt(p, w)["stationarity"] <= 1e-7
    w[2] += 0.01
    w /= w.sum()
    assert verify_kkt(p, w)["stationarity"] > 1e-4


def test_cross_check_with_cvxpy():
    cp = pytest.importorskip("cvxpy")
    p = cvar_fixtures()[1]
    sol = solve_minvar_cvar(p)
    T, N = p.scenarios.shape
    w = cp.Variable(N)
    loss = -p.scenarios @ w
    cons = [cp.sum(w) == 1]
    for con in p.cvar_constraints:
        l = cp.Variable()
        cons.append(l + cp.sum(cp.pos(loss - l)) / ((1 - con.alpha) * T) <= con.beta)
    prob = cp.Problem(cp.Minimize(cp.quad_form(w, cp.psd_wrap(p.V)) + p.lam * cp.norm1(w - p.w0)), cons)
    if "CLARABEL" not in cp.installed_solvers():
        pytest.skip("interior-point conic solver not installed")
    prob.solve(solver="CLARABEL")
    assert abs(sol.objective - prob.value) <= 1e-6
    assert np.abs(sol.weights - w.value).max() <= 1e-3
