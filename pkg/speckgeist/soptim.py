# soptim.py - Gauss-Newton, projected Gauss-Newton, gradient descent,
# projected gradient descent and L-BFGS with backtracking Armijo searches
#
# A problem is any object with evaluate(y) -> ObjEval and value(y) -> float.
# When it also has a constant sparse normal_matrix (the phase objectives),
# Gauss-Newton factors it once, with the unknowns in gauge_indices held
# fixed, and reuses the factor; otherwise the step comes from conjugate
# gradients on evaluate(y).hessian_action.

import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .slinalg import cg_solve, factorize_gn, solve_gn_step
from .sutils import InvalidArgument, LineSearchFailure

logger = logging.getLogger(__name__)

METHODS = ("GD", "PGD", "LBFGS", "GN", "PGN")
PROJECTED_METHODS = ("PGD", "PGN")
TERMINATION_REASONS = ("decrement", "obj+step", "max_iter", "line_search_failure")

ACTIVE_TOL = 1e-12
CURVATURE_TOL = 1e-12


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "GN"
    max_iter: int = 100
    tol_obj_change: float = 1e-4
    tol_step_norm: float = 1e-4
    tol_newton_decrement: float = 1e-3
    armijo_c: float = 1e-4
    armijo_max_backtracks: int = 25
    armijo_shrink: float = 0.5
    lbfgs_memory: int = 5
    cg_rel_tol: float = 1e-1
    cg_max_iter: int = 50
    lower_bound: float = -math.inf
    upper_bound: float = math.inf

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgument("unknown method %s" % self.method)
        for name in ("tol_obj_change", "tol_step_norm", "tol_newton_decrement"):
            if not getattr(self, name) > 0:
                raise InvalidArgument("%s must be positive" % name)
        if not (0 < self.armijo_c < 1):
            raise InvalidArgument("armijo_c must lie in (0, 1), found %s" % self.armijo_c)
        if not (0 < self.armijo_shrink < 1):
            raise InvalidArgument("armijo_shrink must lie in (0, 1)")
        if self.lbfgs_memory < 0 or self.max_iter < 0:
            raise InvalidArgument("lbfgs_memory and max_iter must be nonnegative")
        if not self.lower_bound < self.upper_bound:
            raise InvalidArgument("lower bound must be below upper bound")


@dataclass
class ActiveSetState:
    active: np.ndarray
    inactive: np.ndarray
    gamma: float = 0.0


@dataclass
class RunReport:
    method: str
    objective: list = field(default_factory=list)
    rof: list = field(default_factory=list)
    re: list = field(default_factory=list)
    re_raw: list = field(default_factory=list)
    step_norm: list = field(default_factory=list)
    ls_iters: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    cg_iters: list = field(default_factory=list)
    termination: str = ""
    n_factorizations: int = 0
    kkt_residual: float = math.nan

    @property
    def iterations(self):
        return max(len(self.objective) - 1, 0)

    def add(self, value, step, ls, seconds, errors=(math.nan, math.nan), cg=0):
        if not self.objective:
            initial = value
        else:
            initial = self.objective[0]
        self.objective.append(float(value))
        self.rof.append(float(value / initial) if initial > 0 else 1.0)
        self.re.append(float(errors[0]))
        self.re_raw.append(float(errors[1]))
        self.step_norm.append(float(step))
        self.ls_iters.append(int(ls))
        self.seconds.append(float(seconds))
        self.cg_iters.append(int(cg))

    def rows(self):
        for k in range(len(self.objective)):
            yield (
                k,
                self.objective[k],
                self.rof[k],
                self.re[k],
                self.step_norm[k],
                self.ls_iters[k],
                self.seconds[k],
            )


# -- line searches -----------------------------------------------------------


def armijo_search(E, y, p, grad, eta0, cfg, f0=None):
    """Backtrack from eta0 until E(y + eta p) <= E(y) + c eta grad.p.

    Returns (eta, backtracks); raises LineSearchFailure after
    cfg.armijo_max_backtracks rejected steps.
    """
    return _backtrack(E, y, p, grad, lambda z: z, eta0, cfg, f0)


def projected_armijo_search(E, y, p, proj_grad, Q, eta0, cfg, f0=None):
    """Armijo search on the projected path Q(y + eta p)."""
    return _backtrack(E, y, p, proj_grad, Q, eta0, cfg, f0)


def _backtrack(E, y, p, grad, Q, eta0, cfg, f0):
    slope = float(np.dot(grad, p))
    if not slope < 0:
        raise InvalidArgument("search direction is not a descent direction (slope %g)" % slope)
    if not eta0 > 0:
        raise InvalidArgument("initial step length must be positive, found %s" % eta0)
    if f0 is None:
        f0 = E(y)
    eta = eta0
    for j in range(cfg.armijo_max_backtracks + 1):
        if E(Q(y + eta * p)) <= f0 + cfg.armijo_c * eta * slope:
            return eta, j
        eta *= cfg.armijo_shrink
    raise LineSearchFailure(
        "no sufficient decrease after %d backtracks" % cfg.armijo_max_backtracks
    )


def adaptive_eta0(prev_eta=None, prev_backtracks=0):
    """Double the last step after an immediate success, else reuse the accepted one."""
    if prev_eta is None:
        return 1.0
    if prev_backtracks == 0:
        return 2.0 * prev_eta
    return prev_eta


def newton_decrement(grad, p):
    slope = float(np.dot(grad, p))
    if slope > 0:
        raise InvalidArgument("Newton decrement needs grad.p <= 0, found %g" % slope)
    return math.sqrt(-slope)


# -- bounds ------------------------------------------------------------------


def project(y, lower, upper):
    return np.clip(y, lower, upper)


def _at_bound(y, bound):
    if not np.isfinite(bound):
        return np.zeros(y.shape, dtype=bool)
    return np.abs(y - bound) <= ACTIVE_TOL * max(1.0, abs(bound))


def active_set(y, lower, upper):
    active = _at_bound(y, lower) | _at_bound(y, upper)
    return ActiveSetState(active, ~active)


def projected_gradient(y, g, lower, upper):
    """Gradient with the components that push out of the box removed."""
    pg = np.array(g, dtype=float)
    at_lower = _at_bound(y, lower)
    at_upper = _at_bound(y, upper)
    pg[at_lower] = np.minimum(pg[at_lower], 0.0)
    pg[at_upper] = np.maximum(pg[at_upper], 0.0)
    return pg


def kkt_residual(y, g, lower, upper):
    return float(np.max(np.abs(projected_gradient(y, g, lower, upper)), initial=0.0))


def step_scale(p_inactive, p_active):
    """gamma = ||p_I||inf / ||p_A||inf; 0 without an active step, 1 without an inactive one."""
    na = float(np.max(np.abs(p_active), initial=0.0))
    ni = float(np.max(np.abs(p_inactive), initial=0.0))
    if na == 0.0:
        return 0.0
    if ni == 0.0:
        return 1.0
    return ni / na


# -- shared loop pieces ------------------------------------------------------


def _errors(error_fn, y):
    if error_fn is None:
        return (math.nan, math.nan)
    out = error_fn(y)
    if np.isscalar(out):
        return (float(out), math.nan)
    return (float(out[0]), float(out[1]))


def _converged(report, f_old, f_new, step, cfg):
    scale = report.objective[0] if report.objective[0] > 0 else 1.0
    return abs(f_old - f_new) / scale < cfg.tol_obj_change and step < cfg.tol_step_norm


def _newton_step(ev, mask, cfg):
    # CG on the Gauss-Newton system; with a mask, on the inactive block only
    if mask is None:
        op = ev.hessian_action
        rhs = -ev.gradient
    else:
        def op(v):
            return mask * ev.hessian_action(mask * v)

        rhs = -(mask * ev.gradient)
    result = cg_solve(op, rhs, cfg.cg_rel_tol, cfg.cg_max_iter)
    return result.x, result.iterations


def _finish(report, reason, y, t0):
    report.termination = reason
    logger.info(
        "%s finished: %s after %d iterations, objective %.6g, %.2fs",
        report.method, reason, report.iterations, report.objective[-1],
        time.perf_counter() - t0,
    )
    return y, report


def _log_iteration(report):
    k = report.iterations
    logger.debug(
        "%s it %d: E=%.6g rof=%.4g step=%.3g ls=%d",
        report.method, k, report.objective[k], report.rof[k],
        report.step_norm[k], report.ls_iters[k],
    )


def _start(problem, y0, method, error_fn):
    y = np.array(y0, dtype=float).reshape(-1)
    if y.size != problem.size:
        raise InvalidArgument("initial guess of length %d, expected %d" % (y.size, problem.size))
    report = RunReport(method)
    t0 = time.perf_counter()
    ev = problem.evaluate(y)
    report.add(ev.value, 0.0, 0, 0.0, _errors(error_fn, y))
    return y, ev, report, t0


def _check_feasible(y, lower, upper):
    if np.any(y < lower) or np.any(y > upper):
        raise InvalidArgument("initial guess violates the bounds [%s, %s]" % (lower, upper))


# -- methods -----------------------------------------------------------------


def gauss_newton(problem, y0, cfg=None, error_fn=None):
    cfg = cfg or OptimizerConfig(method="GN")
    y, ev, report, t0 = _start(problem, y0, "GN", error_fn)
    H = getattr(problem, "normal_matrix", None)
    fact = None
    for _ in range(cfg.max_iter):
        g = ev.gradient
        if H is not None:
            if fact is None:
                fact = factorize_gn(H, getattr(problem, "gauge_indices", ()))
                report.n_factorizations += 1
            p = solve_gn_step(fact, -g)
            cg_its = 0
        else:
            p, cg_its = _newton_step(ev, None, cfg)
        slope = float(g @ p)
        if slope >= 0 or newton_decrement(g, p) < cfg.tol_newton_decrement:
            return _finish(report, "decrement", y, t0)
        try:
            eta, backtracks = armijo_search(problem.value, y, p, g, 1.0, cfg, f0=ev.value)
        except LineSearchFailure as error:
            logger.warning("GN line search failed: %s", error)
            return _finish(report, "line_search_failure", y, t0)
        y_new = y + eta * p
        ev_new = problem.evaluate(y_new)
        step = float(np.linalg.norm(y_new - y))
        report.add(ev_new.value, step, backtracks + 1, time.perf_counter() - t0,
                   _errors(error_fn, y_new), cg_its)
        _log_iteration(report)
        done = _converged(report, ev.value, ev_new.value, step, cfg)
        y, ev = y_new, ev_new
        if done:
            return _finish(report, "obj+step", y, t0)
    return _finish(report, "max_iter", y, t0)


def projected_gauss_newton(problem, bounds, y0, cfg=None, error_fn=None):
    cfg = cfg or OptimizerConfig(method="PGN")
    lower, upper = bounds
    _check_feasible(np.asarray(y0, dtype=float), lower, upper)
    y, ev, report, t0 = _start(problem, y0, "PGN", error_fn)

    def Q(z):
        return project(z, lower, upper)

    for _ in range(cfg.max_iter):
        g = ev.gradient
        # variables move on and off the bounds, so the sets are rebuilt each time
        state = active_set(y, lower, upper)
        pg = projected_gradient(y, g, lower, upper)
        p_inactive, cg_its = _newton_step(ev, state.inactive.astype(float), cfg)
        p_active = -(state.active.astype(float) * pg)
        state.gamma = step_scale(p_inactive, p_active)
        p = p_inactive + state.gamma * p_active
        slope = float(pg @ p)
        if slope >= 0 or newton_decrement(pg, p) < cfg.tol_newton_decrement:
            report.kkt_residual = kkt_residual(y, g, lower, upper)
            return _finish(report, "decrement", y, t0)
        try:
            eta, backtracks = projected_armijo_search(
                problem.value, y, p, pg, Q, 1.0, cfg, f0=ev.value
            )
        except LineSearchFailure as error:
            logger.warning("PGN line search failed: %s", error)
            report.kkt_residual = kkt_residual(y, g, lower, upper)
            return _finish(report, "line_search_failure", y, t0)
        y_new = Q(y + eta * p)
        ev_new = problem.evaluate(y_new)
        step = float(np.linalg.norm(y_new - y))
        report.add(ev_new.value, step, backtracks + 1, time.perf_counter() - t0,
                   _errors(error_fn, y_new), cg_its)
        _log_iteration(report)
        done = _converged(report, ev.value, ev_new.value, step, cfg)
        y, ev = y_new, ev_new
        if done:
            break
    else:
        report.kkt_residual = kkt_residual(y, ev.gradient, lower, upper)
        return _finish(report, "max_iter", y, t0)
    report.kkt_residual = kkt_residual(y, ev.gradient, lower, upper)
    return _finish(report, "obj+step", y, t0)


def _first_order(problem, y0, cfg, error_fn, method, direction, bounds=None):
    # shared loop of GD, PGD and L-BFGS; direction(y, ev, pg) -> p
    y, ev, report, t0 = _start(problem, y0, method, error_fn)
    if bounds is None:
        lower, upper = -math.inf, math.inf
    else:
        lower, upper = bounds

    def Q(z):
        return project(z, lower, upper)

    eta, backtracks = None, 0
    reason = "max_iter"
    for _ in range(cfg.max_iter):
        pg = projected_gradient(y, ev.gradient, lower, upper) if bounds else ev.gradient
        p = direction(y, ev, pg)
        if not np.any(p):
            reason = "obj+step"
            break
        eta0 = adaptive_eta0(eta, backtracks)
        try:
            if bounds:
                eta, backtracks = projected_armijo_search(
                    problem.value, y, p, pg, Q, eta0, cfg, f0=ev.value
                )
            else:
                eta, backtracks = armijo_search(problem.value, y, p, pg, eta0, cfg, f0=ev.value)
        except LineSearchFailure as error:
            logger.warning("%s line search failed: %s", method, error)
            reason = "line_search_failure"
            break
        y_new = Q(y + eta * p) if bounds else y + eta * p
        ev_new = problem.evaluate(y_new)
        step = float(np.linalg.norm(y_new - y))
        report.add(ev_new.value, step, backtracks + 1, time.perf_counter() - t0,
                   _errors(error_fn, y_new))
        _log_iteration(report)
        done = _converged(report, ev.value, ev_new.value, step, cfg)
        if hasattr(direction, "update"):
            direction.update(y_new - y, ev_new.gradient - ev.gradient)
        y, ev = y_new, ev_new
        if done:
            reason = "obj+step"
            break
    if bounds:
        report.kkt_residual = kkt_residual(y, ev.gradient, lower, upper)
    return _finish(report, reason, y, t0)


def gradient_descent(problem, y0, cfg=None, error_fn=None):
    cfg = cfg or OptimizerConfig(method="GD")
    return _first_order(problem, y0, cfg, error_fn, "GD", lambda y, ev, pg: -pg)


def projected_gradient_descent(problem, bounds, y0, cfg=None, error_fn=None):
    cfg = cfg or OptimizerConfig(method="PGD")
    lower, upper = bounds
    _check_feasible(np.asarray(y0, dtype=float), lower, upper)
    return _first_order(
        problem, y0, cfg, error_fn, "PGD", lambda y, ev, pg: -pg, bounds=(lower, upper)
    )


class LBFGSDirection(object):
    """Two-loop recursion over the last `memory` curvature pairs."""

    def __init__(self, memory):
        self.memory = memory
        self.pairs = deque(maxlen=max(memory, 1))
        self.skipped = 0

    def update(self, s, yv):
        if self.memory == 0:
            return
        sy = float(s @ yv)
        if sy <= CURVATURE_TOL * np.linalg.norm(s) * np.linalg.norm(yv):
            self.skipped += 1
            return
        self.pairs.append((s, yv, 1.0 / sy))

    def apply(self, g):
        q = np.array(g, dtype=float)
        alphas = []
        for s, yv, rho in reversed(self.pairs):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * yv
        if self.pairs:
            s, yv, _ = self.pairs[-1]
            q *= float(s @ yv) / float(yv @ yv)
        for (s, yv, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * float(yv @ q)
            q += (a - b) * s
        return q

    def __call__(self, y, ev, g):
        p = -self.apply(g)
        if float(g @ p) >= 0:
            # lost descent: start the memory over
            self.pairs.clear()
            p = -np.array(g, dtype=float)
        return p


def lbfgs(problem, y0, cfg=None, error_fn=None):
    cfg = cfg or OptimizerConfig(method="LBFGS")
    return _first_order(problem, y0, cfg, error_fn, "LBFGS", LBFGSDirection(cfg.lbfgs_memory))


def optimize(problem, y0, cfg, error_fn=None):
    """Dispatch on cfg.method; bounds come from cfg for the projected methods."""
    bounds = (cfg.lower_bound, cfg.upper_bound)
    if cfg.method == "GN":
        return gauss_newton(problem, y0, cfg, error_fn)
    if cfg.method == "PGN":
        return projected_gauss_newton(problem, bounds, y0, cfg, error_fn)
    if cfg.method == "GD":
        return gradient_descent(problem, y0, cfg, error_fn)
    if cfg.method == "PGD":
        return projected_gradient_descent(problem, bounds, y0, cfg, error_fn)
    return lbfgs(problem, y0, cfg, error_fn)
