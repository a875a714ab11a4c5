"""Hamilton-Jacobi problem data and the associated Hamiltonian flow.

A problem is the triple ``(f, R, q)`` defining

    H(x, p) = p^T f(x) - 1/2 p^T R(x) p + q(x)

together with the analytic derivatives needed by the integrators. Every
callable works on the last axis, so a batch of points of shape ``(n, d)`` is
evaluated in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from numpy.typing import NDArray

from .exceptions import DerivativeCheckError, UsageError

Array = NDArray[np.float64]

CONSTRUCTION_TOL = 1e-12
FD_STEP = 1e-6
FD_FAIL_TOL = 1e-5


class PhasePoint(NamedTuple):
    x: Array
    p: Array

    def as_array(self) -> Array:
        return np.concatenate([np.asarray(self.x, float), np.asarray(self.p, float)], axis=-1)


def symplectic_matrix(d: int) -> Array:
    """Standard symplectic matrix ``J = [[0, I], [-I, 0]]`` of size 2d."""
    eye = np.eye(d)
    zero = np.zeros((d, d))
    return np.block([[zero, eye], [-eye, zero]])


def _matvec(M, v):
    return np.einsum("...ij,...j->...i", M, v)


@dataclass(frozen=True, eq=False)
class HjProblem:
    """Data of a stationary Hamilton-Jacobi equation.

    Parameters
    ----------
    name : str
    d : int
        State dimension.
    f, jac_f : callable
        Drift ``f(x)`` of shape ``(..., d)`` and its Jacobian ``(..., d, d)``.
    R : callable
        Symmetric control-weight matrix ``R(x)`` of shape ``(..., d, d)``.
    quad_R_grad : callable
        ``(x, p) -> d(p^T R(x) p)/dx`` for fixed ``p``.
    q, grad_q : callable
        State cost and its gradient.
    hess_q0 : array, optional
        Hessian of ``q`` at the origin. Finite differences of ``grad_q`` are
        used when omitted.
    constant_R : bool
        ``R`` does not depend on ``x``.
    lipschitz : callable, optional
        ``L -> M(L)``, the Lipschitz coefficient of the separated nonlinearity
        on the ball of size ``L``; needed for a convergence certificate.
    decay : (float, float), optional
        Known constants ``(a, b)`` with ``||exp(Bt)|| <= a exp(-bt)``.
    """

    name: str
    d: int
    f: Callable[[Array], Array]
    jac_f: Callable[[Array], Array]
    R: Callable[[Array], Array]
    quad_R_grad: Callable[[Array, Array], Array]
    q: Callable[[Array], Array]
    grad_q: Callable[[Array], Array]
    hess_q0: Optional[Array] = None
    constant_R: bool = False
    lipschitz: Optional[Callable[[float], float]] = None
    decay: Optional[tuple] = None
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise UsageError(f"state dimension must be a positive integer, got {self.d!r}")
        if not self.check:
            return
        zero = np.zeros(self.d)
        if np.max(np.abs(self.f(zero))) > CONSTRUCTION_TOL:
            raise UsageError(f"{self.name}: f(0) != 0")
        if abs(float(self.q(zero))) > CONSTRUCTION_TOL:
            raise UsageError(f"{self.name}: q(0) != 0")
        if np.max(np.abs(self.grad_q(zero))) > CONSTRUCTION_TOL:
            raise UsageError(f"{self.name}: grad q(0) != 0")
        rng = np.random.default_rng(0)
        for x in np.vstack([zero, rng.uniform(-1.0, 1.0, size=(4, self.d))]):
            Rx = np.asarray(self.R(x), float)
            if Rx.shape != (self.d, self.d):
                raise UsageError(f"{self.name}: R(x) has shape {Rx.shape}")
            if np.linalg.norm(Rx - Rx.T) > CONSTRUCTION_TOL:
                raise UsageError(f"{self.name}: R(x) is not symmetric at x={x}")

    # -- validation ---------------------------------------------------------

    def _xp(self, x, p):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        if x.shape[-1:] != (self.d,) or p.shape != x.shape:
            raise UsageError(
                f"{self.name}: expected x and p with trailing dimension {self.d}, "
                f"got {x.shape} and {p.shape}"
            )
        return x, p

    def split(self, z) -> tuple[Array, Array]:
        """Split a phase point (or a ``PhasePoint``) into ``(x, p)``."""
        if isinstance(z, PhasePoint):
            return self._xp(z.x, z.p)
        z = np.asarray(z, dtype=float)
        if z.shape[-1:] != (2 * self.d,):
            raise UsageError(f"{self.name}: phase point must have length {2 * self.d}, got {z.shape}")
        return z[..., : self.d], z[..., self.d :]

    # -- Hamiltonian and its partial derivatives ----------------------------

    def H(self, x, p) -> Array:
        x, p = self._xp(x, p)
        Rp = _matvec(self.R(x), p)
        return np.einsum("...i,...i->...", p, self.f(x)) - 0.5 * np.einsum("...i,...i->...", p, Rp) + self.q(x)

    def H_p(self, x, p) -> Array:
        return self.f(x) - _matvec(self.R(x), p)

    def H_x(self, x, p) -> Array:
        JfT = np.swapaxes(self.jac_f(x), -1, -2)
        return _matvec(JfT, p) - 0.5 * self.quad_R_grad(x, p) + self.grad_q(x)

    def vector_field(self, x, p) -> tuple[Array, Array]:
        x, p = self._xp(x, p)
        return self.H_p(x, p), -self.H_x(x, p)

    def hessian_q0(self) -> Array:
        if self.hess_q0 is not None:
            return np.asarray(self.hess_q0, dtype=float)
        step = 1e-5
        eye = np.eye(self.d)
        cols = [(self.grad_q(step * e) - self.grad_q(-step * e)) / (2 * step) for e in eye]
        Hq = np.stack(cols, axis=1)
        return 0.5 * (Hq + Hq.T)


def hamiltonian(prob: HjProblem, z) -> Array:
    """Value of ``p^T f(x) - 1/2 p^T R(x) p + q(x)`` at the phase point(s) ``z``."""
    x, p = prob.split(z)
    return prob.H(x, p)


def ham_vector_field(prob: HjProblem, z) -> tuple[Array, Array]:
    """Phase-space velocity ``(H_p, -H_x)`` at ``z``, same shape as ``z``."""
    x, p = prob.split(z)
    return np.concatenate(prob.vector_field(x, p), axis=-1)


def linearize(prob: HjProblem) -> tuple[Array, Array, Array]:
    """Return ``(A, Q, R0)``: Jacobian of f, Hessian of q and R, all at 0."""
    zero = np.zeros(prob.d)
    A = np.asarray(prob.jac_f(zero), dtype=float)
    Q = prob.hessian_q0()
    R0 = np.asarray(prob.R(zero), dtype=float)
    return A, 0.5 * (Q + Q.T), R0


@dataclass
class DerivativeReport:
    max_error: float
    errors: dict
    worst: dict
    passed: bool
    tolerance: float

    def raise_for_failure(self):
        if not self.passed:
            name = max(self.errors, key=self.errors.get)
            raise DerivativeCheckError(
                f"derivative {name!r} disagrees with finite differences: "
                f"relative error {self.errors[name]:.3e} at x={self.worst[name]}"
            )


def _rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def check_derivatives(prob: HjProblem, samples, step: float = FD_STEP, tol: float = FD_FAIL_TOL,
                      seed: int = 0) -> DerivativeReport:
    """Compare the analytic derivatives with central finite differences.

    ``samples`` is an array of states ``(n, d)``. The quadratic form of ``R``
    is probed with a random costate per sample.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[-1] != prob.d:
        raise UsageError(f"samples must have {prob.d} columns")
    rng = np.random.default_rng(seed)
    eye = np.eye(prob.d)
    errors = {"jac_f": 0.0, "grad_q": 0.0, "quad_R_grad": 0.0}
    worst = {k: None for k in errors}
    for x in samples:
        p = rng.normal(size=prob.d)
        fd_jac = np.stack([(prob.f(x + step * e) - prob.f(x - step * e)) / (2 * step) for e in eye], axis=1)
        fd_gq = np.array([(prob.q(x + step * e) - prob.q(x - step * e)) / (2 * step) for e in eye])

        def quad(y):
            return p @ np.asarray(prob.R(y)) @ p

        fd_qr = np.array([(quad(x + step * e) - quad(x - step * e)) / (2 * step) for e in eye])
        for name, analytic, fd in (
            ("jac_f", prob.jac_f(x), fd_jac),
            ("grad_q", prob.grad_q(x), fd_gq),
            ("quad_R_grad", prob.quad_R_grad(x, p), fd_qr),
        ):
            err = _rel_err(np.asarray(analytic, float), fd)
            if err > errors[name] or worst[name] is None:
                errors[name] = max(err, errors[name])
                worst[name] = x.tolist()
    max_error = max(errors.values())
    return DerivativeReport(max_error, errors, worst, max_error <= tol, tol)


# -- control problems -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Optimal control problem ``xdot = f(x) + g(x) u`` with running cost
    ``(q(x) + r u^T u) / 2``. ``base`` is the induced HJ problem with
    ``R(x) = g(x) g(x)^T / r``."""

    base: HjProblem
    g: Callable[[Array], Array]
    r: float
    m: int

    @property
    def d(self):
        return self.base.d

    def feedback(self, x, p) -> Array:
        """Optimal control ``u = -g(x)^T p / r``."""
        gT = np.swapaxes(np.asarray(self.g(x), float), -1, -2)
        return -_matvec(gT, p) / self.r

    def closed_loop_rhs(self, x, u) -> Array:
        return self.base.f(x) + _matvec(self.g(x), u)


def make_control_problem(name, d, f, jac_f, g, r, q, grad_q, *, m=None, hess_q0=None,
                         constant_g=False, quad_R_grad=None, lipschitz=None, decay=None):
    """Build a :class:`ControlProblem` and its HJ problem.

    When ``g`` is state dependent and ``quad_R_grad`` is not given, the
    derivative of ``p^T R(x) p`` is taken by central differences.
    """
    if r <= 0:
        raise UsageError("control weight r must be positive")
    g0 = np.asarray(g(np.zeros(d)), float)
    m = g0.shape[1] if m is None else m

    def R(x):
        gx = np.asarray(g(x), float)
        if gx.ndim == 2 and np.ndim(x) > 1:
            gx = np.broadcast_to(gx, np.shape(x)[:-1] + gx.shape)
        return np.einsum("...ik,...jk->...ij", gx, gx) / r

    if quad_R_grad is None:
        if constant_g:
            def quad_R_grad(x, p):
                return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(p)))
        else:
            def quad_R_grad(x, p, _h=1e-6):
                x = np.asarray(x, float)
                out = np.empty(np.broadcast_shapes(x.shape, np.shape(p)))
                for i in range(d):
                    e = np.zeros(d)
                    e[i] = _h
                    qp = np.einsum("...i,...ij,...j->...", p, R(x + e), p)
                    qm = np.einsum("...i,...ij,...j->...", p, R(x - e), p)
                    out[..., i] = (qp - qm) / (2 * _h)
                return out

    base = HjProblem(name=name, d=d, f=f, jac_f=jac_f, R=R, quad_R_grad=quad_R_grad, q=q,
                     grad_q=grad_q, hess_q0=hess_q0, constant_R=constant_g,
                     lipschitz=lipschitz, decay=decay)
    return ControlProblem(base=base, g=g, r=float(r), m=m)


# -- registry ---------------------------------------------------------------

ROTATION = np.array([[0.0, 1.0], [-1.0, 0.0]])


def exp2d_lipschitz(L: float) -> float:
    """M(L) = 9L/4 for L > 2/3, else 3/2 (used verbatim, discontinuous at 2/3)."""
    return 2.25 * L if L > 2.0 / 3.0 else 1.5


def _const_matrix(M):
    M = np.asarray(M, float)

    def fn(x):
        x = np.asarray(x)
        return np.broadcast_to(M, x.shape[:-1] + M.shape)

    return fn


def _quadratic_cost(x):
    x = np.asarray(x, float)
    return 0.5 * np.einsum("...i,...i->...", x, x)


def _identity_grad(x):
    return np.asarray(x, float)


def _zero_quad(x, p):
    return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(p)))


def _exp2d_f(x):
    x = np.asarray(x, float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([np.expm1(x2), -(x1 + x1**3 / 3.0)], axis=-1)


def _exp2d_jac(x):
    x = np.asarray(x, float)
    x1, x2 = x[..., 0], x[..., 1]
    zero = np.zeros_like(x1)
    row1 = np.stack([zero, np.exp(x2)], axis=-1)
    row2 = np.stack([-1.0 - x1**2, zero], axis=-1)
    return np.stack([row1, row2], axis=-2)


def _linear_f(A):
    def f(x):
        return _matvec(A, np.asarray(x, float))

    return f


def _exp2d():
    return make_control_problem(
        "exp2d", 2, _exp2d_f, _exp2d_jac, _const_matrix(np.eye(2)), 1.0, _quadratic_cost,
        _identity_grad, hess_q0=np.eye(2), constant_g=True, quad_R_grad=_zero_quad,
        lipschitz=exp2d_lipschitz, decay=(1.0, 1.0),
    )


def _lqr2d():
    # Same linearization as exp2d; M(L) and (a, b) are carried over so that
    # certificate reports are comparable between the two.
    return make_control_problem(
        "lqr2d", 2, _linear_f(ROTATION), _const_matrix(ROTATION), _const_matrix(np.eye(2)), 1.0,
        _quadratic_cost, _identity_grad, hess_q0=np.eye(2), constant_g=True,
        quad_R_grad=_zero_quad, lipschitz=exp2d_lipschitz, decay=(1.0, 1.0),
    )


def _harmonic():
    # H = (x^2 + p^2) / 2 written as f = 0, R = -1, q = x^2 / 2.
    return HjProblem(
        name="harmonic", d=1, f=lambda x: np.zeros_like(np.asarray(x, float)),
        jac_f=_const_matrix(np.zeros((1, 1))), R=_const_matrix(-np.eye(1)),
        quad_R_grad=_zero_quad, q=_quadratic_cost, grad_q=_identity_grad,
        hess_q0=np.eye(1), constant_R=True,
    )


_CONTROL_REGISTRY = {"exp2d": _exp2d, "lqr2d": _lqr2d}
_HJ_REGISTRY = {"harmonic": _harmonic}

REGISTRY_NAMES = ("exp2d", "lqr2d", "harmonic")


def get_control_problem(name: str) -> ControlProblem:
    try:
        return _CONTROL_REGISTRY[name]()
    except KeyError:
        raise UsageError(
            f"no control problem named {name!r}; available: {sorted(_CONTROL_REGISTRY)}"
        ) from None


def get_problem(name: str) -> HjProblem:
    """Look up a built-in problem by its stable CLI identifier."""
    if name in _CONTROL_REGISTRY:
        return _CONTROL_REGISTRY[name]().base
    if name in _HJ_REGISTRY:
        return _HJ_REGISTRY[name]()
    raise UsageError(f"unknown problem {name!r}; available: {list(REGISTRY_NAMES)}")
