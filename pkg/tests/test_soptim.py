import itertools
import math

import numpy as np
import pytest
import scipy.fft
import scipy.sparse as sp

from speckgeist.sindex import accumulate_frames, build_index, build_phase_map
from speckgeist.sinit import recursive_phase
from speckgeist.sobjective import PhaseProblem
from speckgeist.soptim import (
    TERMINATION_REASONS,
    LBFGSDirection,
    OptimizerConfig,
    active_set,
    adaptive_eta0,
    armijo_search,
    gauss_newton,
    gradient_descent,
    kkt_residual,
    lbfgs,
    newton_decrement,
    optimize,
    projected_armijo_search,
    projected_gauss_newton,
    projected_gradient,
    projected_gradient_descent,
    step_scale,
)
from speckgeist.sutils import InvalidArgument, LineSearchFailure

TIGHT = dict(tol_obj_change=1e-14, tol_step_norm=1e-12, tol_newton_decrement=1e-10)


def half_square(y):
    return 0.5 * float(np.dot(y, y))


def spd(rng, n, condition=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return sp.csr_matrix(Q @ np.diag(np.linspace(1.0, condition, n)) @ Q.T)


# -- configuration and line searches -----------------------------------------


@pytest.mark.parametrize(
    "changes",
    [{"armijo_c": 0.0}, {"armijo_c": 1.0}, {"tol_obj_change": 0.0}, {"method": "NLCG"},
     {"lower_bound": 1.0, "upper_bound": 0.0}],
)
def test_config_invariants(changes):
    with pytest.raises(InvalidArgument):
        OptimizerConfig(**changes)


def test_armijo_accepts_full_step_on_quadratic():
    cfg = OptimizerConfig()
    y = np.array([1.0])
    eta, backtracks = armijo_search(half_square, y, np.array([-1.0]), y, 1.0, cfg)
    assert (eta, backtracks) == (1.0, 0)


def test_armijo_backtracks_by_halving():
    cfg = OptimizerConfig()
    y = np.array([1.0])
    eta, backtracks = armijo_search(half_square, y, np.array([-6.0]), y, 1.0, cfg)
    assert backtracks == 2
    assert eta == 0.25


def test_armijo_rejects_non_descent():
    cfg = OptimizerConfig()
    y = np.array([1.0, 0.0])
    with pytest.raises(InvalidArgument):
        armijo_search(half_square, y, np.array([0.0, 1.0]), y, 1.0, cfg)
    with pytest.raises(InvalidArgument):
        armijo_search(half_square, y, np.array([-1.0, 0.0]), y, 0.0, cfg)


def test_armijo_with_tiny_c_accepts_any_decrease():
    cfg = OptimizerConfig(armijo_c=1e-12)
    y = np.array([1.0])
    # E(1 - 1.9) = 0.405 < 0.5
    eta, _ = armijo_search(half_square, y, np.array([-1.9]), y, 1.0, cfg)
    assert eta == 1.0


def test_armijo_exhaustion_raises():
    cfg = OptimizerConfig(armijo_max_backtracks=3)
    y = np.zeros(1)
    with pytest.raises(LineSearchFailure):
        armijo_search(lambda z: float(z @ z), y, np.ones(1), -np.ones(1), 1.0, cfg)


def test_projected_armijo_example():
    cfg = OptimizerConfig(method="PGD", lower_bound=0.0)
    y = np.array([1.0])

    def Q(z):
        return np.clip(z, 0.0, None)

    eta, backtracks = projected_armijo_search(half_square, y, np.array([-3.0]), y, Q, 1.0, cfg)
    assert (eta, backtracks) == (1.0, 0)
    with pytest.raises(InvalidArgument):
        projected_armijo_search(half_square, y, np.zeros(1), y, Q, 1.0, cfg)


def test_projected_armijo_matches_plain_search_in_the_interior():
    cfg = OptimizerConfig()
    y = np.array([5.0, 4.0])
    p = np.array([-1.0, -0.5])
    plain = armijo_search(half_square, y, p, y, 1.0, cfg)
    projected = projected_armijo_search(half_square, y, p, y, lambda z: np.clip(z, 0, None), 1.0, cfg)
    assert plain == projected


def test_adaptive_eta0():
    assert adaptive_eta0() == 1.0
    assert adaptive_eta0(0.5, 0) == 1.0
    assert adaptive_eta0(0.25, 3) == 0.25


def test_newton_decrement(rng):
    assert newton_decrement(np.array([1.0, 1.0]), np.array([-1.0, -1.0])) == pytest.approx(math.sqrt(2))
    assert newton_decrement(np.ones(3), np.zeros(3)) == 0.0
    with pytest.raises(InvalidArgument):
        newton_decrement(np.ones(2), np.ones(2))
    H = spd(rng, 6).toarray()
    g = rng.standard_normal(6)
    p = -np.linalg.solve(H, g)
    assert newton_decrement(g, p) ** 2 == pytest.approx(g @ np.linalg.solve(H, g))


# -- bound helpers -----------------------------------------------------------


def test_projected_gradient_and_active_set():
    y = np.array([0.0, 0.0, 0.5, 1.0])
    g = np.array([2.0, -2.0, 3.0, -1.0])
    pg = projected_gradient(y, g, 0.0, 1.0)
    np.testing.assert_array_equal(pg, [0.0, -2.0, 3.0, 0.0])
    state = active_set(y, 0.0, 1.0)
    np.testing.assert_array_equal(state.active, [True, True, False, True])
    np.testing.assert_array_equal(state.inactive, ~state.active)
    assert kkt_residual(y, g, 0.0, 1.0) == 3.0


def test_step_scale():
    assert step_scale(np.array([2.0, 0.0]), np.array([0.0, 0.0])) == 0.0
    assert step_scale(np.zeros(2), np.array([1.0, 0.0])) == 1.0
    assert step_scale(np.array([0.0, 3.0]), np.array([-6.0, 0.0])) == 0.5


# -- methods -----------------------------------------------------------------


def test_gauss_newton_solves_a_quadratic_in_one_step(quadratic_factory, tridiag, rng):
    c = rng.standard_normal(12)
    problem = quadratic_factory(tridiag(12), c)
    y, report = gauss_newton(problem, np.zeros(12), OptimizerConfig())
    np.testing.assert_allclose(y, c, atol=1e-10)
    assert report.iterations == 1
    assert report.n_factorizations == 1
    assert report.termination == "decrement"


def test_gauss_newton_with_cg(quadratic_factory, rng):
    c = rng.standard_normal(10)
    problem = quadratic_factory(spd(rng, 10), c, factorable=False)
    cfg = OptimizerConfig(cg_rel_tol=1e-10, cg_max_iter=100, **TIGHT)
    y, report = gauss_newton(problem, np.zeros(10), cfg)
    np.testing.assert_allclose(y, c, atol=1e-8)
    assert report.n_factorizations == 0
    assert report.termination in TERMINATION_REASONS


def test_report_bookkeeping(quadratic_factory, rng):
    problem = quadratic_factory(spd(rng, 8, 50.0), rng.standard_normal(8), factorable=False)
    y, report = gradient_descent(problem, np.zeros(8), OptimizerConfig(method="GD", max_iter=30))
    assert report.rof[0] == 1.0
    assert all(b < a for a, b in zip(report.objective, report.objective[1:]))
    assert all(b <= a for a, b in zip(report.rof, report.rof[1:]))
    assert report.termination in TERMINATION_REASONS
    assert len(list(report.rows())) == report.iterations + 1
    assert all(n >= 1 for n in report.ls_iters[1:])


def test_max_iter_termination(quadratic_factory, rng):
    problem = quadratic_factory(spd(rng, 8, 50.0), rng.standard_normal(8))
    _, report = gradient_descent(problem, np.zeros(8), OptimizerConfig(method="GD", max_iter=2))
    assert report.termination == "max_iter"
    assert report.iterations == 2


def test_runs_are_deterministic(quadratic_factory, rng):
    problem = quadratic_factory(spd(rng, 8, 20.0), rng.standard_normal(8), factorable=False)
    cfg = OptimizerConfig(method="LBFGS")
    _, a = lbfgs(problem, np.zeros(8), cfg)
    _, b = lbfgs(problem, np.zeros(8), cfg)
    assert a.objective == b.objective
    assert a.step_norm == b.step_norm


def test_first_order_methods_reach_the_minimizer(quadratic_factory, rng):
    c = rng.standard_normal(6)
    problem = quadratic_factory(spd(rng, 6, 3.0), c)
    cfg = dict(max_iter=2000, **TIGHT)
    y_gd, _ = gradient_descent(problem, np.zeros(6), OptimizerConfig(method="GD", **cfg))
    y_lb, _ = lbfgs(problem, np.zeros(6), OptimizerConfig(method="LBFGS", **cfg))
    y_gn, _ = gauss_newton(problem, np.zeros(6), OptimizerConfig(**TIGHT))
    np.testing.assert_allclose(y_gd, y_gn, atol=1e-4)
    np.testing.assert_allclose(y_lb, y_gn, atol=1e-4)


def test_lbfgs_needs_fewer_iterations_than_gd(quadratic_factory, rng):
    problem = quadratic_factory(spd(rng, 20, 100.0), rng.standard_normal(20))
    cfg = dict(max_iter=3000, tol_obj_change=1e-10, tol_step_norm=1e-8)
    _, gd = gradient_descent(problem, np.zeros(20), OptimizerConfig(method="GD", **cfg))
    _, lb = lbfgs(problem, np.zeros(20), OptimizerConfig(method="LBFGS", **cfg))
    assert lb.iterations < gd.iterations


def test_lbfgs_without_memory_is_gradient_descent(quadratic_factory, rng):
    problem = quadratic_factory(spd(rng, 8, 10.0), rng.standard_normal(8))
    _, gd = gradient_descent(problem, np.zeros(8), OptimizerConfig(method="GD", max_iter=20))
    _, lb = lbfgs(problem, np.zeros(8), OptimizerConfig(method="LBFGS", lbfgs_memory=0, max_iter=20))
    assert gd.objective == lb.objective


def test_lbfgs_skips_pairs_without_curvature():
    direction = LBFGSDirection(3)
    direction.update(np.array([1.0, 0.0]), np.array([0.5, 0.0]))
    direction.update(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
    assert len(direction.pairs) == 1
    assert direction.skipped == 1


def test_projected_gradient_descent_stays_feasible(quadratic_factory, rng):
    problem = quadratic_factory(spd(rng, 10), rng.standard_normal(10) - 0.5)
    seen = []

    def record(y):
        seen.append(y.min())
        return 0.0

    cfg = OptimizerConfig(method="PGD", lower_bound=0.0, max_iter=200)
    y, report = projected_gradient_descent(problem, (0.0, math.inf), np.ones(10), cfg, record)
    assert min(seen) >= 0.0
    assert y.min() >= 0.0
    with pytest.raises(InvalidArgument):
        projected_gradient_descent(problem, (0.0, math.inf), -np.ones(10), cfg)


def _box_qp_oracle(H, c):
    # min 1/2 (y - c)^T H (y - c) over y >= 0 by trying every active set
    n = len(c)
    best = None
    for mask in itertools.product([False, True], repeat=n):
        free = np.array([not m for m in mask])
        y = np.zeros(n)
        if free.any():
            Hff = H[np.ix_(free, free)]
            rhs = H[free] @ c
            y[free] = np.linalg.solve(Hff, rhs)
        if y.min() < -1e-12:
            continue
        value = 0.5 * (y - c) @ H @ (y - c)
        if best is None or value < best[0]:
            best = (value, y)
    return best[1]


def test_projected_gauss_newton_matches_qp_oracle(quadratic_factory, rng):
    H = spd(rng, 8, 5.0)
    c = rng.standard_normal(8)
    problem = quadratic_factory(H, c, factorable=False)
    cfg = OptimizerConfig(method="PGN", lower_bound=0.0, max_iter=200, cg_rel_tol=1e-10,
                          cg_max_iter=100, **TIGHT)
    y, report = projected_gauss_newton(problem, (0.0, math.inf), np.ones(8), cfg)
    np.testing.assert_allclose(y, _box_qp_oracle(H.toarray(), c), atol=1e-6)
    assert report.kkt_residual < 1e-6


def test_projected_gauss_newton_vertex_solution(quadratic_factory, rng):
    H = spd(rng, 5, 4.0)
    c = -np.linalg.solve(H.toarray(), np.ones(5))
    problem = quadratic_factory(H, c, factorable=False)
    cfg = OptimizerConfig(method="PGN", lower_bound=0.0, max_iter=100, cg_rel_tol=1e-10, **TIGHT)
    y, report = projected_gauss_newton(problem, (0.0, math.inf), np.ones(5), cfg)
    np.testing.assert_allclose(y, 0.0, atol=1e-6)
    assert report.kkt_residual < 1e-6


def test_projected_gauss_newton_without_bounds_is_gauss_newton(quadratic_factory, rng):
    problem = quadratic_factory(spd(rng, 10, 30.0), rng.standard_normal(10), factorable=False)
    cfg = OptimizerConfig(method="GN")
    y_gn, gn = gauss_newton(problem, np.zeros(10), cfg)
    y_pgn, pgn = projected_gauss_newton(problem, (-math.inf, math.inf), np.zeros(10), cfg)
    np.testing.assert_array_equal(y_gn, y_pgn)
    assert gn.objective == pgn.objective
    assert gn.termination == pgn.termination


def test_pinned_variables_take_a_projected_gradient_step(quadratic_factory):
    c = np.array([1.0, 2.0, 0.5])
    problem = quadratic_factory(sp.identity(3, format="csr"), c, factorable=False)
    cfg = OptimizerConfig(method="PGN", lower_bound=0.0, max_iter=1)
    y, report = projected_gauss_newton(problem, (0.0, math.inf), np.zeros(3), cfg)
    np.testing.assert_allclose(y, c)


@pytest.mark.parametrize("variant", ["E1", "E2"])
@pytest.mark.parametrize("start", ["recursive", "perturbed"])
def test_gauss_newton_on_noiseless_phase_problem(
    small_index, noiseless_data, true_phase, rng, variant, start
):
    problem = PhaseProblem(small_index, noiseless_data, variant)
    if start == "recursive":
        phi0 = recursive_phase(noiseless_data, small_index)
    else:
        phi0 = true_phase + 0.05 * rng.standard_normal(small_index.n)
    cfg = OptimizerConfig(max_iter=15, **TIGHT)
    phi, report = gauss_newton(problem, phi0, cfg)
    assert report.n_factorizations == 1
    assert report.objective[-1] < 1e-12
    assert np.abs(problem.residual(phi)).max() < 1e-8
    pinned = list(problem.gauge_indices)
    assert len(pinned) == 2
    np.testing.assert_array_equal(phi[pinned], phi0[pinned])


def test_optimize_dispatch(quadratic_factory, rng):
    problem = quadratic_factory(spd(rng, 4), np.abs(rng.standard_normal(4)) + 0.1)
    for method in ("GD", "PGD", "LBFGS", "GN", "PGN"):
        lower = 0.0 if method in ("PGD", "PGN") else -math.inf
        cfg = OptimizerConfig(method=method, lower_bound=lower)
        _, report = optimize(problem, np.ones(4), cfg)
        assert report.method == method
        assert report.termination in TERMINATION_REASONS


@pytest.mark.parametrize("radius", [1.0, 1.5])
def test_gauss_newton_on_a_four_by_four_image(radius):
    image = np.random.default_rng(4).uniform(0.5, 1.5, (4, 4))
    index = build_index(build_phase_map(4, radius), 1.0)
    data = accumulate_frames([image], index)
    problem = PhaseProblem(index, data, "E1")
    phi0 = np.angle(index.map.sample(scipy.fft.fft2(image)))
    phi0 = phi0 + 0.1 * np.random.default_rng(5).standard_normal(index.n)
    phi, report = gauss_newton(problem, phi0, OptimizerConfig(max_iter=15, **TIGHT))
    assert report.objective[-1] < 1e-16
    if radius == 1.0:
        assert index.m == 0
        assert report.objective[0] == 0.0
