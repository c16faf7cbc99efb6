# sobjective.py - phase recovery objectives, their gradients and Gauss-Newton Hessians
#
#   E1 = 1/2 || W^1/2 wrap(beta - A phi) ||^2
#   E2 = 1/2 || W^1/2 (cos beta - cos A phi) ||^2 + 1/2 || W^1/2 (sin beta - sin A phi) ||^2
#
# either in the phase phi or in the image o through phi(o) = angle(F o),
# plus a regularizer alpha R(o). Forward FFTs are unnormalized.

import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.fft
import scipy.sparse as sp

from .sinit import synthesize_image
from .slinalg import form_normal_matrix
from .sutils import InvalidArgument, wrap_phase

logger = logging.getLogger(__name__)

PHASE_VARIANTS = ("E1", "E2")
REGULARIZERS = ("none", "penalty", "discrete_gradient", "total_variation")
GAUGE_FREQUENCIES = ((1, 0), (0, 1))


@dataclass(frozen=True)
class ObjEval:
    value: float
    gradient: np.ndarray
    hessian_action: Callable
    hessian: Optional[sp.csr_matrix] = None
    d1: Optional[np.ndarray] = None
    d2: Optional[np.ndarray] = None
    residual: Optional[np.ndarray] = None


class RegEval(NamedTuple):
    value: float
    gradient: np.ndarray
    hessian_action: Callable


def _check_variant(variant):
    if variant not in PHASE_VARIANTS:
        raise InvalidArgument("unknown objective variant %s" % variant)


# -- phase space -------------------------------------------------------------


def e1_terms(theta, beta, w):
    r = wrap_phase(beta - theta)
    return 0.5 * float(np.sum(w * r * r)), r


def e2_terms(theta, beta, w):
    cb, sb = np.cos(beta), np.sin(beta)
    ct, st = np.cos(theta), np.sin(theta)
    value = 0.5 * float(np.sum(w * ((cb - ct) ** 2 + (sb - st) ** 2)))
    d1 = cb * st - sb * ct
    d2 = cb * ct + sb * st
    return value, d1, d2


@dataclass(frozen=True)
class PhaseProblem:
    index: object
    data: object
    variant: str = "E1"

    def __post_init__(self):
        _check_variant(self.variant)
        m = self.index.m
        if self.data.beta.shape != (m,) or self.data.weights.shape != (m,):
            raise InvalidArgument(
                "bispectrum data of length %d does not match %d triplets"
                % (len(self.data.beta), m)
            )

    @property
    def size(self):
        return self.index.n

    @cached_property
    def normal_matrix(self):
        """A^T W A; constant for both phase objectives."""
        return form_normal_matrix(self.index.A, self.data.weights)

    @cached_property
    def gauge_indices(self):
        """Unknowns at frequencies (1, 0) and (0, 1).

        A annihilates linear phase ramps, and holding these two phases
        fixed picks one member of each family of equivalent solutions.
        """
        found = (self.index.map.coord_to_index(i, j) for i, j in GAUGE_FREQUENCIES)
        return tuple(k for k, _ in filter(None, found))

    def evaluate(self, phi):
        if self.variant == "E1":
            return eval_e1_phase(phi, self)
        return eval_e2_phase(phi, self)

    def value(self, phi):
        theta = self.index.A @ phi
        if self.variant == "E1":
            return e1_terms(theta, self.data.beta, self.data.weights)[0]
        return e2_terms(theta, self.data.beta, self.data.weights)[0]

    def residual(self, phi):
        return wrap_phase(self.index.A @ phi - self.data.beta)

    def to_image(self, phi):
        return synthesize_image(phi, self.data.modulus, self.index.map)


def eval_e1_phase(phi, prob):
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (prob.index.n,):
        raise InvalidArgument("phi of length %d, expected %d" % (phi.size, prob.index.n))
    A = prob.index.A
    w = prob.data.weights
    value, r = e1_terms(A @ phi, prob.data.beta, w)
    # the modulus is ignored when differentiating
    gradient = -(A.T @ (w * r))
    H = prob.normal_matrix
    return ObjEval(value, gradient, lambda v: H @ v, hessian=H, residual=r)


def eval_e2_phase(phi, prob):
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (prob.index.n,):
        raise InvalidArgument("phi of length %d, expected %d" % (phi.size, prob.index.n))
    A = prob.index.A
    w = prob.data.weights
    value, d1, d2 = e2_terms(A @ phi, prob.data.beta, w)
    gradient = A.T @ (w * d1)
    H = prob.normal_matrix
    return ObjEval(value, gradient, lambda v: H @ v, hessian=H, d1=d1, d2=d2, residual=d1)


# -- phase as a function of the image ----------------------------------------


def _spectrum(o, N):
    return scipy.fft.fft2(np.asarray(o, dtype=float).reshape(N, N))


class PhaseJacobian(object):
    """d phi / d o at one image, with its adjoint.

    forward(q) = Im(F q / F o) and adjoint(r) = Im(F Z), Z holding r / F o
    at the unknown coordinates. Entries where F o vanishes are zero.
    """

    def __init__(self, map, spectrum):
        self.map = map
        self.N = map.image_side
        sampled = map.sample(spectrum)
        nonzero = sampled != 0
        self.inverse = np.zeros_like(sampled)
        self.inverse[nonzero] = 1.0 / sampled[nonzero]

    def forward(self, q):
        Fq = _spectrum(q, self.N)
        return np.imag(self.map.sample(Fq) * self.inverse)

    def adjoint(self, r):
        Z = np.zeros(self.N * self.N, dtype=complex)
        Z[self.map.flat_index] = np.asarray(r) * self.inverse
        return np.imag(scipy.fft.fft2(Z.reshape(self.N, self.N))).reshape(-1)


def phase_of_object(o, map):
    spectrum = _spectrum(o, map.image_side)
    sampled = map.sample(spectrum)
    return np.where(sampled != 0, np.angle(sampled), 0.0)


def dphi_do_forward(o, q, map):
    return PhaseJacobian(map, _spectrum(o, map.image_side)).forward(q)


def dphi_do_adjoint(o, r, map):
    return PhaseJacobian(map, _spectrum(o, map.image_side)).adjoint(r)


def adjoint_test(o, q, r, map):
    """Relative mismatch |<J q, r> - <q, J^T r>| / (||q|| ||r||)."""
    jac = PhaseJacobian(map, _spectrum(o, map.image_side))
    lhs = float(jac.forward(q) @ r)
    rhs = float(np.asarray(q).reshape(-1) @ jac.adjoint(r))
    scale = np.linalg.norm(q) * np.linalg.norm(r)
    return abs(lhs - rhs) / scale if scale > 0 else abs(lhs - rhs)


# -- regularizers ------------------------------------------------------------


def _shape(N):
    if isinstance(N, (tuple, list)):
        return (int(N[0]), int(N[1]))
    return (int(N), int(N))


def _difference_1d(n):
    # forward differences, replicate boundary: last row is zero
    D = sp.lil_matrix((n, n))
    for i in range(n - 1):
        D[i, i] = -1.0
        D[i, i + 1] = 1.0
    return D.tocsr()


@lru_cache(maxsize=8)
def gradient_operator(shape):
    """Discrete gradient (vertical differences stacked over horizontal ones)."""
    rows, cols = shape
    Dy = sp.kron(_difference_1d(rows), sp.identity(cols))
    Dx = sp.kron(sp.identity(rows), _difference_1d(cols))
    return sp.vstack([Dy, Dx]).tocsr()


def reg_none(o):
    return RegEval(0.0, np.zeros(np.size(o)), lambda v: np.zeros_like(v))


def reg_penalty(o, alpha):
    o = np.asarray(o, dtype=float).reshape(-1)
    negative = np.minimum(o, 0.0)
    mask = (o < 0).astype(float)
    return RegEval(
        0.5 * alpha * float(negative @ negative),
        alpha * negative,
        lambda v: alpha * mask * v,
    )


def reg_discrete_gradient(o, alpha, N):
    o = np.asarray(o, dtype=float).reshape(-1)
    D = gradient_operator(_shape(N))
    g = D @ o
    return RegEval(
        0.5 * alpha * float(g @ g),
        alpha * (D.T @ g),
        lambda v: alpha * (D.T @ (D @ v)),
    )


def reg_tv(o, alpha, eps, N):
    if not eps > 0:
        raise InvalidArgument("total variation smoothing must be positive, found %s" % eps)
    o = np.asarray(o, dtype=float).reshape(-1)
    D = gradient_operator(_shape(N))
    g = D @ o
    P = o.size
    s = np.sqrt(g[:P] ** 2 + g[P:] ** 2 + eps * eps)
    inv = 1.0 / np.concatenate([s, s])
    # lagged diffusivity: the denominator is frozen at o
    return RegEval(
        alpha * float(s.sum()),
        alpha * (D.T @ (g * inv)),
        lambda v: alpha * (D.T @ (inv * (D @ v))),
    )


def evaluate_regularizer(name, o, alpha, tv_eps, N):
    if name == "none" or alpha == 0:
        return reg_none(o)
    if name == "penalty":
        return reg_penalty(o, alpha)
    if name == "discrete_gradient":
        return reg_discrete_gradient(o, alpha, N)
    if name == "total_variation":
        return reg_tv(o, alpha, tv_eps, N)
    raise InvalidArgument("unknown regularizer %s" % name)


# -- image space -------------------------------------------------------------


@dataclass(frozen=True)
class ImageProblem:
    index: object
    data: object
    variant: str = "E1"
    regularizer: str = "none"
    alpha: float = 0.0
    tv_eps: float = 1e-3
    include_d2: bool = False

    def __post_init__(self):
        _check_variant(self.variant)
        if self.regularizer not in REGULARIZERS:
            raise InvalidArgument("unknown regularizer %s" % self.regularizer)
        if self.alpha < 0:
            raise InvalidArgument("alpha must be nonnegative, found %s" % self.alpha)
        if np.any(self.data.modulus < 0):
            raise InvalidArgument("Fourier modulus must be nonnegative")

    @property
    def size(self):
        return self.index.map.image_side ** 2

    def evaluate(self, o):
        if self.variant == "E1":
            return eval_e1_image(o, self)
        return eval_e2_image(o, self)

    def value(self, o):
        N = self.index.map.image_side
        theta = self.index.A @ phase_of_object(o, self.index.map)
        if self.variant == "E1":
            value = e1_terms(theta, self.data.beta, self.data.weights)[0]
        else:
            value = e2_terms(theta, self.data.beta, self.data.weights)[0]
        reg = evaluate_regularizer(self.regularizer, o, self.alpha, self.tv_eps, N)
        return value + reg.value

    def residual(self, o):
        theta = self.index.A @ phase_of_object(o, self.index.map)
        return wrap_phase(theta - self.data.beta)

    def to_image(self, o):
        return np.asarray(o, dtype=float).reshape(-1)


def _eval_image(o, prob, variant):
    o = np.asarray(o, dtype=float).reshape(-1)
    if o.size != prob.size:
        raise InvalidArgument("image of %d pixels, expected %d" % (o.size, prob.size))
    map = prob.index.map
    N = map.image_side
    A = prob.index.A
    w = prob.data.weights
    spectrum = _spectrum(o, N)
    sampled = map.sample(spectrum)
    phi = np.where(sampled != 0, np.angle(sampled), 0.0)
    jac = PhaseJacobian(map, spectrum)
    theta = A @ phi

    d1 = d2 = None
    if variant == "E1":
        value, r = e1_terms(theta, prob.data.beta, w)
        phase_gradient = -(A.T @ (w * r))
        residual = r
    else:
        value, d1, d2 = e2_terms(theta, prob.data.beta, w)
        phase_gradient = A.T @ (w * d1)
        residual = d1
    curvature = w * np.maximum(d2, 0.0) if (variant == "E2" and prob.include_d2) else w

    reg = evaluate_regularizer(prob.regularizer, o, prob.alpha, prob.tv_eps, N)

    def hessian_action(v):
        inner = A.T @ (curvature * (A @ jac.forward(v)))
        return jac.adjoint(inner) + reg.hessian_action(v)

    return ObjEval(
        value + reg.value,
        jac.adjoint(phase_gradient) + reg.gradient,
        hessian_action,
        d1=d1,
        d2=d2,
        residual=residual,
    )


def eval_e1_image(o, prob):
    return _eval_image(o, prob, "E1")


def eval_e2_image(o, prob):
    return _eval_image(o, prob, "E2")


def gradient_check(fun, grad, x, direction, hs=(1e-3, 1e-4, 1e-5, 1e-6)):
    """Taylor remainders |f(x + h d) - f(x) - h g.d| and their observed order in h.

    The remainder of a correct gradient decays like h**2; the order is the
    least-squares slope of log remainder against log h.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(direction, dtype=float)
    f0 = fun(x)
    slope = float(np.asarray(grad) @ d)
    remainders = []
    for h in hs:
        remainders.append(abs(fun(x + h * d) - f0 - h * slope))
    rem = np.maximum(np.array(remainders), np.finfo(float).tiny)
    order = float(np.polyfit(np.log(hs), np.log(rem), 1)[0])
    return remainders, order
