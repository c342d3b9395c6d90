import math

import numpy as np
import pytest

from rbsde_lab.forward import TimeGrid, simulate_paths
from rbsde_lab.lsmc import (RegressionBasis, RegressionError, constraint_residuals,
                            pathwise_violation_rate,
                            dump_solution_csv, one_step_residuals, quartile_increments,
                            regression_fit, solve_bsde, summary_text)
from rbsde_lab.oracles import get_problem
from rbsde_lab.pde import PenaltyParams, solve_penalized
from conftest import make_spec


# regression

def test_regression_recovers_affine():
    rng = np.random.default_rng(0)
    x = rng.normal(size=200)
    F = np.column_stack([np.ones_like(x), x])
    beta = regression_fit(F, 1.5 - 2.0 * x)
    assert np.allclose(beta, [1.5, -2.0], atol=1e-12)


def test_regression_constant_target():
    F = np.column_stack([np.ones(5), np.arange(5.0)])
    assert np.allclose(regression_fit(F, np.full(5, 3.0)), [3.0, 0.0], atol=1e-12)


def test_regression_hand_normal_equations():
    # F'F = [[3, 3], [3, 5]], F'y = [6, 8] -> beta = [1.5, 0.5]
    F = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
    beta = regression_fit(F, np.array([1.0, 3.0, 2.0]))
    assert np.allclose(beta, [1.5, 0.5], atol=1e-12)


def test_regression_errors():
    with pytest.raises(RegressionError, match="all-zero"):
        regression_fit(np.zeros((4, 2)), np.ones(4))
    with pytest.raises(RegressionError, match="rows"):
        regression_fit(np.ones((1, 2)), np.ones(1))
    with pytest.raises(RegressionError, match="non-finite"):
        regression_fit(np.array([[1.0], [np.nan]]), np.ones(2))


def test_regression_rank_deficient_is_ridged():
    F = np.column_stack([np.ones(4), np.ones(4)])
    beta = regression_fit(F, np.full(4, 2.0))
    assert beta.sum() == pytest.approx(2.0, rel=1e-8)


def test_basis_size():
    spec = make_spec(dim=2)
    X = np.random.default_rng(1).normal(size=(50, 2))
    b = RegressionBasis(2)
    assert b.features(X, b.scaler(X)).shape == (50, 6)
    b = RegressionBasis(2, obstacle_feature=True)
    coords = b.coordinates(spec, 0.0, X)
    assert coords.shape == (50, 3)
    # the default obstacle is constant, so its column drops out
    assert b.features(coords, b.scaler(coords)).shape == (50, 6)


# trivial and exactly solvable cases

def _bundle(spec, steps=10, paths=2000, seed=1, mark0=0, x0=None):
    return simulate_paths(spec, TimeGrid(spec.horizon, steps), paths, seed, x0=x0, mark0=mark0)


def test_constant_terminal():
    spec = make_spec(vol=0.3, terminal=lambda x: np.full(x.shape[0], 1.25),
                     points=(0.0, 1.0), weights=(1.0, 1.0))
    sol = solve_bsde(spec, _bundle(spec), PenaltyParams(2.0, 3.0))
    assert sol.Y0 == pytest.approx(1.25, abs=1e-10)
    assert np.abs(sol.Y - 1.25).max() < 1e-9


def test_unit_gain_gives_horizon():
    spec = make_spec(gain=lambda x, a, y, z: np.ones(x.shape[0]), horizon=0.8)
    sol = solve_bsde(spec, _bundle(spec), PenaltyParams(math.inf, 0.0))
    assert sol.Y0 == pytest.approx(0.8, abs=1e-12)
    assert sol.stderr == pytest.approx(0.0, abs=1e-12)


def test_quadratic_terminal_matches_heat_solution():
    s = 0.4
    spec = make_spec(vol=s, terminal=lambda x: x[:, 0] ** 2)
    b = _bundle(spec, steps=20, paths=20_000, seed=3, x0=(0.5,))
    sol = solve_bsde(spec, b, PenaltyParams(math.inf, 0.0), RegressionBasis(2))
    assert abs(sol.Y0 - (0.25 + s * s)) <= 3 * sol.stderr + 1e-3
    mu, se = one_step_residuals(sol, b)
    assert np.mean(np.abs(mu) <= 3 * se + 1e-12) >= 0.9


def test_trivial_residuals():
    spec = make_spec(vol=0.3, terminal=lambda x: x[:, 0])
    b = _bundle(spec)
    rep = constraint_residuals(solve_bsde(spec, b, PenaltyParams(4.0, 0.0)), spec, b)
    assert rep.R_jump == 0.0 and rep.R_obst == 0.0 and rep.R_skor == 0.0


def test_projection_has_no_obstacle_defect():
    prob = get_problem("P1")
    b = _bundle(prob.spec, steps=20, paths=2000, x0=prob.x0, mark0=1)
    sol = solve_bsde(prob.spec, b, PenaltyParams(math.inf, 4.0), RegressionBasis(2, True))
    rep = constraint_residuals(sol, prob.spec, b)
    assert rep.R_obst == 0.0 and rep.R_skor == 0.0 and rep.R_jump > 0.0
    assert set(rep.stderr) == {"R_jump", "R_obst", "R_skor"}


def test_increasing_processes():
    prob = get_problem("P1")
    b = _bundle(prob.spec, steps=20, paths=2000, x0=prob.x0, mark0=1)
    sol = solve_bsde(prob.spec, b, PenaltyParams(8.0, 4.0), RegressionBasis(2, True))
    for K in (sol.K_plus, sol.K_minus):
        assert np.all(K[:, 0] == 0.0)
        assert np.all(np.diff(K, axis=1) >= 0.0)
    assert sol.K_minus[:, -1].mean() > 0 and sol.K_plus[:, -1].mean() > 0
    q, se = quartile_increments(sol)
    assert q.shape == se.shape == (4,)
    assert q.sum() == pytest.approx(sol.K_minus[:, -1].mean())


def test_bundle_mismatch():
    spec = make_spec(points=(0.0, 1.0), weights=(1.0, 1.0))
    other = make_spec()
    with pytest.raises(ValueError):
        solve_bsde(other, _bundle(spec), PenaltyParams(1.0, 1.0))


# agreement with the grid solver on P1

@pytest.mark.parametrize("n", [4.0, math.inf])
def test_p1_against_pde(n):
    prob = get_problem("P1")
    params = PenaltyParams(n, 4.0)
    b = _bundle(prob.spec, steps=50, paths=10_000, seed=5, x0=prob.x0, mark0=1)
    sol = solve_bsde(prob.spec, b, params, RegressionBasis(2, True))
    coarse = solve_penalized(prob.spec, prob.grid(), params).at(prob.x0, 1)
    fine = solve_penalized(prob.spec, prob.grid(101, 200), params).at(prob.x0, 1)
    budget = abs(coarse - fine)
    assert abs(sol.Y0 - fine) <= 3 * sol.stderr + budget


def test_summary_and_dump(tmp_path):
    spec = make_spec(vol=0.2, terminal=lambda x: x[:, 0])
    b = _bundle(spec, steps=2, paths=3)
    sol = solve_bsde(spec, b, PenaltyParams(1.0, 0.0), RegressionBasis(1))
    rep = constraint_residuals(sol, spec, b)
    text = summary_text(sol, rep)
    assert text.startswith("Y0 = ") and "R_skor = " in text and "paths = 3" in text
    path = tmp_path / "sol.csv"
    dump_solution_csv(sol, b, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "path,t,Y,K_plus,K_minus" and len(lines) == 1 + 3 * 3


def test_pathwise_violation_rate():
    prob = get_problem("P1")
    b = _bundle(prob.spec, steps=20, paths=2000, x0=prob.x0, mark0=1)
    basis = RegressionBasis(2, True)
    s1 = solve_bsde(prob.spec, b, PenaltyParams(math.inf, 1.0), basis)
    s2 = solve_bsde(prob.spec, b, PenaltyParams(math.inf, 16.0), basis)
    assert pathwise_violation_rate(s1, s1) == 0.0
    rate = pathwise_violation_rate(s1, s2)
    assert 0.0 <= rate <= 1.0
    with pytest.raises(ValueError):
        pathwise_violation_rate(s1, solve_bsde(prob.spec, _bundle(prob.spec, steps=10,
                                                                   paths=2000, x0=prob.x0),
                                               PenaltyParams(math.inf, 1.0), basis))


def test_y0_monotone_in_penalties():
    # common random numbers: Y0 follows the grid ordering within 3 standard errors
    prob = get_problem("P1")
    b = _bundle(prob.spec, steps=50, paths=10_000, seed=5, x0=prob.x0, mark0=1)
    basis = RegressionBasis(2, True)
    y = {(n, m): solve_bsde(prob.spec, b, PenaltyParams(n, m), basis)
         for n in (4.0, 16.0) for m in (1.0, 16.0)}
    for (n, m), sol in y.items():
        if (4 * n, m) in y:
            hi = y[(4 * n, m)]
            assert hi.Y0 <= sol.Y0 + 3 * max(sol.stderr, hi.stderr)
        if (n, 16 * m) in y:
            hi = y[(n, 16 * m)]
            assert sol.Y0 <= hi.Y0 + 3 * max(sol.stderr, hi.stderr)
