import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackgame.errors import ArgumentError, ConfigError, DivergenceError, SlaterViolationError
from stackgame.minmax import (
    Box, FunctionProblem, QuadraticProblem, SolverConfig, benchmark_quadratic,
    gradient_error_terms, lagrangian_grads, lagrangian_value, lr_schedule,
    multiplier_cap, nested_sgda, parse_schedule, problem_from_name,
    saddle_point_oracle, se_residual, sgda_inner, IterateLog,
)


def bilinear_xy(noise=0.0):
    # f = x*y, g = 1 - x - y
    return FunctionProblem(
        Box([0.0], [1.0]), Box([0.0], [1.0]),
        objective=lambda x, y: (float(x[0] * y[0]), np.array([y[0]]), np.array([x[0]])),
        constraints=lambda x, y: (np.array([1 - x[0] - y[0]]), -np.ones((1, 1)), -np.ones((1, 1))),
        num_constraints=1, noise_std=noise)


def brute_marginal(x, n=20001):
    # independent route: grid maximization of f over the feasible follower set
    ys = np.linspace(0.0, 1.0, n)
    feas = ys[1.0 - x - ys >= -1e-12]
    vals = x * x + feas
    i = int(np.argmax(vals))
    return vals[i], feas[i]


# --- lagrangian ---------------------------------------------------------------

def test_lagrangian_value_examples():
    assert lagrangian_value(1.0, [2, -1], [0.5, 1]) == 1.0
    assert lagrangian_value(3.2, [0, 0], [7.0, 0.1]) == 3.2
    assert lagrangian_value(0.0, [1, 2, 3], [1, 1, 1]) == 6.0


def test_lagrangian_value_rejects_bad_multipliers():
    with pytest.raises(ArgumentError):
        lagrangian_value(0.0, [1, 2], [1.0])
    with pytest.raises(ArgumentError):
        lagrangian_value(0.0, [1.0], [-1.0])


def test_lagrangian_grads_hand_values_and_finite_differences():
    p = bilinear_xy()
    s = lagrangian_grads(p, np.array([0.2]), np.array([0.3]), np.array([2.0]))
    assert s.grad_x[0] == pytest.approx(-1.7)
    assert s.grad_y[0] == pytest.approx(-1.8)
    assert s.grad_lam[0] == pytest.approx(0.5)

    def L(x, y, lam):
        return x * y + lam * (1 - x - y)
    h = 1e-6
    assert s.grad_x[0] == pytest.approx((L(0.2 + h, 0.3, 2) - L(0.2 - h, 0.3, 2)) / (2 * h), abs=1e-8)
    assert s.grad_y[0] == pytest.approx((L(0.2, 0.3 + h, 2) - L(0.2, 0.3 - h, 2)) / (2 * h), abs=1e-8)
    assert s.grad_lam[0] == pytest.approx((L(0.2, 0.3, 2 + h) - L(0.2, 0.3, 2 - h)) / (2 * h), abs=1e-8)


def test_lagrangian_grads_zero_multiplier_is_plain_gradient():
    p = bilinear_xy()
    s = lagrangian_grads(p, np.array([0.2]), np.array([0.3]), np.zeros(1))
    assert s.grad_x[0] == pytest.approx(0.3)
    assert s.grad_y[0] == pytest.approx(0.2)
    assert s.grad_lam[0] == pytest.approx(0.5)


def test_lagrangian_grads_stochastic_mean():
    sigma = 0.1
    p = bilinear_xy(noise=sigma)
    rng = np.random.default_rng(11)
    x, y, lam = np.array([0.2]), np.array([0.3]), np.array([2.0])
    draws = np.array([np.concatenate(lagrangian_grads(p, x, y, lam, rng)[:3]) for _ in range(10_000)])
    # x-gradient noise picks up lam * constraint noise? no: jacobians are exact
    assert np.all(np.abs(draws.mean(axis=0) - [-1.7, -1.8, 0.5]) <= 3 * sigma / 100)


def test_lagrangian_grads_deterministic_given_stream():
    p = bilinear_xy(noise=0.3)
    a = lagrangian_grads(p, [0.1], [0.4], [1.0], np.random.default_rng(5))
    b = lagrangian_grads(p, [0.1], [0.4], [1.0], np.random.default_rng(5))
    assert np.array_equal(a.grad_x, b.grad_x) and np.array_equal(a.grad_y, b.grad_y)


# --- schedules ----------------------------------------------------------------

def test_lr_schedule_examples():
    assert lr_schedule("inv_sqrt", 0) == 1.0
    assert lr_schedule("inv_sqrt", 3) == 0.5
    assert lr_schedule("strongly_convex", 0, 2.0) == 1.0
    assert lr_schedule("strongly_convex:4", 1) == 0.25
    assert lr_schedule("fixed:0.3", 17) == 0.3
    assert lr_schedule(("inv_sqrt", 0.1), 99) == pytest.approx(0.01)


@pytest.mark.parametrize("desc", ["fixed:0", "fixed:-1", "strongly_convex:0", "fixed", "bogus", "inv_sqrt:-2"])
def test_lr_schedule_rejects(desc):
    with pytest.raises(ConfigError):
        parse_schedule(desc)


def test_schedule_round_trips_through_str():
    for d in ["inv_sqrt", "inv_sqrt:0.5", "fixed:0.001", "strongly_convex:2.0"]:
        s = parse_schedule(d)
        assert parse_schedule(str(s)) == s


# --- inner loop ---------------------------------------------------------------

def test_sgda_inner_reaches_saddle_of_linear_lagrangian():
    # L(y, lam) = y + lam (1 - y) on Y=[0,1], lam in [0,2]: saddle y=1, lam=1
    p = FunctionProblem(
        Box([0.0], [1.0]), Box([0.0], [1.0]),
        objective=lambda x, y: (float(y[0]), np.zeros(1), np.ones(1)),
        constraints=lambda x, y: (np.array([1 - y[0]]), np.zeros((1, 1)), -np.ones((1, 1))),
        num_constraints=1)
    y, lam, _ = sgda_inner(p, [0.0], SolverConfig(inner_iters=4000), cap=2.0)
    # grid oracle for the saddle residual max_y' L(y',lam) - min_lam' L(y,lam')
    ys = np.linspace(0, 1, 2001)
    ls = np.linspace(0, 2, 2001)
    upper = np.max(ys + lam[0] * (1 - ys))
    lower = np.min(y[0] + ls * (1 - y[0]))
    assert upper - lower <= 0.02
    assert y[0] == pytest.approx(1.0, abs=0.02)


def test_sgda_inner_zero_gradient_returns_start():
    p = FunctionProblem(Box([0.0], [1.0]), Box([0.0, 0.0], [1.0, 1.0]),
                        objective=lambda x, y: (0.0, np.zeros(1), np.zeros(2)),
                        constraints=lambda x, y: (np.zeros(1), np.zeros((1, 1)), np.zeros((1, 2))),
                        num_constraints=1)
    y0 = np.array([0.3, 0.8])
    y, lam, _ = sgda_inner(p, [0.5], SolverConfig(inner_iters=50), y0=y0, lam0=[0.0], cap=1.0)
    assert np.array_equal(y, y0) and np.array_equal(lam, [0.0])


def test_sgda_inner_benchmark_best_response():
    p = benchmark_quadratic()
    y, lam, _ = sgda_inner(p, [0.5], SolverConfig(inner_iters=200))
    assert abs(y[0] - brute_marginal(0.5)[1]) <= 0.05


def test_sgda_inner_nan_reports_iteration():
    calls = {"n": 0}

    def obj(x, y):
        calls["n"] += 1
        g = math.nan if calls["n"] == 4 else 1.0
        return 0.0, np.zeros(1), np.array([g])
    p = FunctionProblem(Box([0.0], [1.0]), Box([0.0], [1.0]), objective=obj)
    with pytest.raises(DivergenceError) as info:
        sgda_inner(p, [0.0], SolverConfig(inner_iters=10), cap=1.0)
    assert info.value.iteration == 3


def test_sgda_inner_respects_boxes_and_cap():
    p = benchmark_quadratic(noise_std=2.0)
    _, _, log = sgda_inner(p, [0.9], SolverConfig(inner_iters=300), cap=0.7, output="last",
                           rng=np.random.default_rng(1), record=True)
    assert np.all((log["y"] >= 0) & (log["y"] <= 1))
    assert np.all((log["lam"] >= 0) & (log["lam"] <= 0.7))


def test_sgda_inner_early_stop_on_residual():
    p = benchmark_quadratic()
    cfg = SolverConfig(inner_iters=5000, target_delta=0.5)
    _, _, log = sgda_inner(p, [0.5], cfg, cap=4.0, residual=lambda y, l: 0.0)
    assert log["steps"] == 10


# --- oracle -------------------------------------------------------------------

def test_oracle_analytic_matches_kkt():
    p = benchmark_quadratic()
    y, lam, res, ok = saddle_point_oracle(p, [0.5], 1e-3, mode="analytic", cap=4.0)
    # KKT by hand: d/dy (y + lam(1-x-y)) = 1 - lam = 0, active constraint y = 1 - x
    assert y[0] == pytest.approx(0.5) and lam[0] == pytest.approx(1.0)
    assert ok and res <= 1e-3


def test_oracle_slack_constraint_drives_multiplier_to_zero():
    p = FunctionProblem(Box([0.0], [1.0]), Box([0.0], [1.0]),
                        objective=lambda x, y: (-(y[0] - 0.3) ** 2, np.zeros(1), np.array([-2 * (y[0] - 0.3)])),
                        constraints=lambda x, y: (np.ones(1), np.zeros((1, 1)), np.zeros((1, 1))),
                        num_constraints=1)
    y, lam, res, ok = saddle_point_oracle(p, [0.0], 1e-3, mode="sgda", cap=2.0, y0=[0.9], lam0=[1.5])
    assert ok
    assert lam[0] == pytest.approx(0.0, abs=1e-3)
    assert y[0] == pytest.approx(0.3, abs=0.02)


def test_oracle_vacuous_residual_accepts_start():
    p = benchmark_quadratic()
    y, lam, res, ok = saddle_point_oracle(p, [0.2], 1e3, mode="sgda", cap=4.0, y0=[0.0])
    assert ok and y[0] == 0.0 and lam[0] == 0.0


def test_oracle_flags_unreached_residual():
    p = benchmark_quadratic()
    _, _, res, ok = saddle_point_oracle(p, [0.2], 0.0, mode="sgda", cap=4.0, max_iters=50)
    assert not ok and res > 0


# --- outer loop ---------------------------------------------------------------

def test_nested_sgda_benchmark_seed7():
    p = benchmark_quadratic()
    log = nested_sgda(p, SolverConfig(outer_iters=2000, inner_iters=200, seed=7))
    x_star = min(np.linspace(0, 1, 10001), key=lambda x: brute_marginal(x, 2001)[0])
    assert abs(log.x_bar[0] - x_star) <= 0.05


def test_nested_sgda_uncoupled_saddle_at_origin():
    p = QuadraticProblem(Qx=[[2.0]], P=[[0.0]], Qy=[[2.0]], cx=[0.0], cy=[0.0],
                         A=np.zeros((0, 1)), B=np.zeros((0, 1)), h=np.zeros(0),
                         x_box=Box([-1.0], [1.0]), y_box=Box([-1.0], [1.0]))
    log = nested_sgda(p, SolverConfig(outer_iters=500, inner_iters=50, lambda_cap=1.0, seed=3),
                      x0=[0.8], y0=[-0.6])
    assert abs(log.x_bar[0]) < 0.05 and abs(log.y_bar[0]) < 0.05
    assert abs(log.final.x[0]) < 1e-6 and log.lam.shape == (500, 0)


def test_nested_sgda_single_step_budget():
    log = nested_sgda(benchmark_quadratic(), SolverConfig(outer_iters=1, inner_iters=5))
    assert len(log) == 1 and log.x.shape == (1, 1)


def test_nested_sgda_bit_identical():
    p = benchmark_quadratic(noise_std=0.2)
    cfg = SolverConfig(outer_iters=300, inner_iters=30, seed=42)
    a, b = nested_sgda(p, cfg), nested_sgda(p, cfg)
    for name in ("x", "y", "lam", "lr", "f_hat", "delta_hat", "eps_hat"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_kernel_matches_generic_path():
    p = benchmark_quadratic(noise_std=0.1)
    cfg = SolverConfig(outer_iters=200, inner_iters=20, seed=9)
    a = nested_sgda(p, cfg, use_kernel=True)
    b = nested_sgda(p, cfg, use_kernel=False)
    for name in ("x", "y", "lam", "f_hat", "delta_hat", "eps_hat"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=0, atol=1e-12)


def test_kernel_matches_generic_path_multidim():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(2, 2))
    p = QuadraticProblem(Qx=M @ M.T + np.eye(2), P=rng.normal(size=(2, 3)), Qy=np.eye(3),
                         cx=rng.normal(size=2), cy=rng.normal(size=3),
                         A=rng.random((2, 2)), B=rng.random((2, 3)), h=[1.0, 2.0],
                         x_box=Box([-1, -1], [1, 1]), y_box=Box([0, 0, 0], [1, 1, 1]), noise_std=0.05)
    cfg = SolverConfig(outer_iters=50, inner_iters=15, lambda_cap=5.0, seed=4)
    a = nested_sgda(p, cfg, use_kernel=True)
    b = nested_sgda(p, cfg, use_kernel=False)
    for name in ("x", "y", "lam", "f_hat"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=0, atol=1e-10)


def test_nested_sgda_divergence_keeps_partial_log():
    def obj(x, y):
        bad = x[0] > 0.3
        return 0.0, np.array([math.nan if bad else -1.0]), np.zeros(1)
    p = FunctionProblem(Box([0.0], [1.0]), Box([0.0], [1.0]), objective=obj, objective_range=1.0)
    with pytest.raises(DivergenceError) as info:
        nested_sgda(p, SolverConfig(outer_iters=50, inner_iters=2, lr_outer="fixed:0.1", lambda_cap=1.0),
                    x0=[0.0])
    assert info.value.partial is not None and len(info.value.partial) == info.value.iteration


def test_every_iterate_feasible():
    p = benchmark_quadratic(noise_std=0.5)
    log = nested_sgda(p, SolverConfig(outer_iters=400, inner_iters=20, seed=2))
    assert np.all((log.x >= 0) & (log.x <= 1)) and np.all((log.y >= 0) & (log.y <= 1))
    assert np.all((log.lam >= 0) & (log.lam <= log.cap))


# --- multiplier cap -------------------------------------------------------------

def test_multiplier_cap_benchmark_matches_formula():
    p = benchmark_quadratic()
    probes = np.linspace(0, 0.5, 51)
    expected = p.objective_range / np.min(1.0 - probes)   # g(x, 0) = 1 - x
    assert multiplier_cap(p) == pytest.approx(expected)
    # objective range of x^2 + y over the unit square, by grid
    g = np.linspace(0, 1, 101)
    vals = g[:, None] ** 2 + g[None, :]
    assert p.objective_range == pytest.approx(vals.max() - vals.min())


def test_multiplier_cap_unit_margin_and_bound():
    p1 = FunctionProblem(Box([0.0], [1.0]), Box([0.0], [1.0]), objective=lambda x, y: (0.0, 0, 0),
                         constraints=lambda x, y: (np.ones(1), np.zeros((1, 1)), np.zeros((1, 1))),
                         num_constraints=1, slater_point=lambda x: np.zeros(1), objective_range=3.5)
    assert multiplier_cap(p1) == pytest.approx(3.5)
    p2 = FunctionProblem(Box([0.0], [1.0]), Box([0.0], [1.0]), objective=lambda x, y: (0.0, 0, 0),
                         constraints=lambda x, y: (np.array([2.0 + y[0]]), np.zeros((1, 1)), np.ones((1, 1))),
                         num_constraints=1, slater_point=lambda x: np.zeros(1), objective_range=4.0)
    assert multiplier_cap(p2) <= 2.0


def test_multiplier_cap_slater_violation():
    p = FunctionProblem(Box([0.0], [1.0]), Box([0.0], [1.0]), objective=lambda x, y: (0.0, 0, 0),
                        constraints=lambda x, y: (np.array([-1.0]), np.zeros((1, 1)), np.zeros((1, 1))),
                        num_constraints=1, slater_point=lambda x: np.zeros(1), objective_range=1.0)
    with pytest.raises(SlaterViolationError):
        multiplier_cap(p)


# --- residual and benchmark -----------------------------------------------------

def test_benchmark_values_against_grid():
    for x, v in [(0.0, 1.0), (0.5, 0.75)]:
        assert brute_marginal(x)[0] == pytest.approx(v, abs=1e-9)
        assert brute_marginal(x)[0] == pytest.approx(x * x + 1 - x)
    assert brute_marginal(0.3)[1] == pytest.approx(0.7, abs=1e-4)
    p = benchmark_quadratic()
    assert p.best_response([0.3])[0][0] == pytest.approx(0.7)


def test_se_residual_examples():
    p = benchmark_quadratic()
    eps, delta, _ = se_residual(p, [0.5], [0.5])
    assert eps == pytest.approx(0.0, abs=1e-12) and delta == 0.0
    eps, delta, _ = se_residual(p, [1.0], [0.0])
    assert eps == pytest.approx(brute_marginal(1.0)[0] - brute_marginal(0.5)[0])
    assert eps == pytest.approx(0.25)
    two = FunctionProblem(Box([0.0], [1.0]), Box([0.0], [1.0]),
                          objective=lambda x, y: (0.0, np.zeros(1), np.zeros(1)),
                          constraints=lambda x, y: (np.array([-0.3, 0.4]), np.zeros((2, 1)), np.zeros((2, 1))),
                          num_constraints=2)
    assert se_residual(two, [0.2], [0.2], eval_budget=11).delta == pytest.approx(0.3)


def test_se_residual_follower_gap():
    p = benchmark_quadratic()
    eps, delta, _ = se_residual(p, [0.5], [0.2])
    assert eps == pytest.approx(0.3) and delta == 0.0


def test_problem_registry():
    assert problem_from_name("quadratic").noise_std == 0.0
    assert problem_from_name("quadratic-noisy:0.25").noise_std == 0.25
    for bad in ["cubic", "quadratic-noisy:x", "quadratic-noisy:-1"]:
        with pytest.raises(ConfigError):
            problem_from_name(bad)


# --- invariants -------------------------------------------------------------------

def test_monotone_residual_over_budgets():
    means = []
    for T in (250, 1000, 4000):
        eps = []
        for seed in range(5):
            p = benchmark_quadratic(noise_std=0.05)
            log = nested_sgda(p, SolverConfig(outer_iters=T, inner_iters=50, seed=seed))
            eps.append(se_residual(p, log.x_bar, log.y_bar).epsilon)
        means.append(np.mean(eps))
    assert means[1] <= means[0] + 0.02 and means[2] <= means[1] + 0.02


def test_oracle_unbiasedness():
    sigma = 0.1
    p = benchmark_quadratic(noise_std=sigma)
    rng = np.random.default_rng(3)
    x, y, lam = np.array([0.3]), np.array([0.6]), np.array([0.8])
    draws = np.array([lagrangian_grads(p, x, y, lam, rng).grad_x[0] for _ in range(10_000)])
    exact = 2 * 0.3 - 0.8
    assert abs(draws.mean() - exact) <= 5 * sigma / 100


def test_gradient_error_bound_on_benchmark():
    p = benchmark_quadratic(noise_std=0.05)
    log = nested_sgda(p, SolverConfig(outer_iters=1000, inner_iters=50, seed=1))
    idx, lhs, rhs = gradient_error_terms(p, log, [0.5], every=100)
    assert len(idx) == 10
    assert np.all(lhs <= rhs + 1e-12)


def test_lipschitz_constant_is_hessian_norm():
    H = np.array([[2.0, 0, -1], [0, 0, -1], [-1, -1, 0]])
    assert benchmark_quadratic().lipschitz_smooth == pytest.approx(np.max(np.abs(np.linalg.eigvalsh(H))))


def test_averaging_identity():
    log = IterateLog(2, 1, 1, 0)
    log.record([0.0], [0.0], [], 0.1, 0, 0, 0)
    log.record([2.0], [0.0], [], 0.1, 0, 0, 0)
    assert log.x_bar[0] == 1.0


def test_linear_averaging_for_strongly_convex_schedule():
    cfg = SolverConfig(outer_iters=3, inner_iters=1, lr_outer="strongly_convex:2")
    assert cfg.averaging_rule() == "linear"
    assert SolverConfig().averaging_rule() == "step"
    log = IterateLog(3, 1, 1, 0, averaging="linear")
    for v in (3.0, 0.0, 1.0):
        log.record([v], [0.0], [], 1.0, 0, 0, 0)
    assert log.x_bar[0] == pytest.approx((3 * 1 + 0 * 2 + 1 * 3) / 6)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=4))
def test_box_projection_idempotent(v):
    box = Box([-1.0] * len(v), [2.0] * len(v))
    once = box.project(v)
    assert np.array_equal(box.project(once), once)
    assert box.contains(once)


@settings(max_examples=50)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 5))
def test_lagrangian_value_matches_grads_linear_in_multiplier(x, y, lam):
    p = bilinear_xy()
    f, _, _ = p.sample_objective([x], [y], None)
    g = p.constraints([x], [y])
    s = lagrangian_grads(p, [x], [y], [lam])
    # L is affine in lam with slope g
    assert lagrangian_value(f, g, [lam]) == pytest.approx(f + lam * s.grad_lam[0])


def test_config_validation():
    with pytest.raises(ConfigError):
        SolverConfig(outer_iters=0)
    with pytest.raises(ConfigError):
        SolverConfig(lambda_cap=-1.0)
    with pytest.raises(ConfigError):
        SolverConfig(lr_outer="fixed:-2")
