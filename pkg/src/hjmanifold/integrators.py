"""Stormer-Verlet integrators for Hamiltonian flows, the Hamiltonian check,
and a Dormand-Prince comparator.

All steppers accept a single phase point ``(2d,)`` or a batch ``(n, 2d)``.
Implicit stages are solved by Newton's method started from the current
point; rows are updated independently, so a batch gives the same numbers as
stepping each row on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .exceptions import NewtonFailure, NumericalError, UsageError
from .problems import HjProblem, symplectic_matrix

COMPLETED = "completed"
HAMILTONIAN_CHECK = "hamiltonian_check"
NEWTON_FAILURE = "newton_failure"

METHODS = ("sv_a", "sv_b", "sv_control", "rk45")


@dataclass(frozen=True)
class IntegratorConfig:
    h: float
    newton_tol: float = 1e-12
    newton_max_iter: int = 20
    ham_check_delta: float = 1e-4
    rk45_rtol: float = 1e-8
    rk45_atol: float = 1e-8

    def __post_init__(self):
        if not np.isfinite(self.h) or self.h == 0:
            raise UsageError("step size h must be finite and non-zero")
        if not self.ham_check_delta > 0:
            raise UsageError("Hamiltonian check tolerance must be positive")


# -- Newton -----------------------------------------------------------------


def _fd_jacobian(residual, z, rows, F0):
    n, m = z.shape
    J = np.empty((n, m, m))
    for j in range(m):
        step = 1.4901161193847656e-08 * np.maximum(1.0, np.abs(z[:, j]))
        zp = z.copy()
        zp[:, j] += step
        J[:, :, j] = (residual(zp, rows) - F0) / step[:, None]
    return J


def newton_solve(residual, z0, jacobian=None, tol=1e-12, max_iter=20):
    """Solve ``residual(z, rows) = 0`` row by row.

    ``residual`` receives the current iterates of the active rows and their
    indices. Rows stop once the Newton update is below ``tol`` (relative to
    ``max(1, |z|)``); converged rows are frozen. Returns
    ``(z, converged, residual_norm, iterations)``.
    """
    z = np.array(z0, dtype=float, copy=True)
    n = z.shape[0]
    converged = np.zeros(n, dtype=bool)
    res_norm = np.full(n, np.inf)
    iterations = np.zeros(n, dtype=int)
    active = np.arange(n)
    for _ in range(max_iter):
        if active.size == 0:
            break
        za = z[active]
        F = residual(za, active)
        if not np.all(np.isfinite(F)):
            bad = ~np.all(np.isfinite(F), axis=1)
            res_norm[active[bad]] = np.inf
            keep = ~bad
            active, za, F = active[keep], za[keep], F[keep]
            if active.size == 0:
                break
        res_norm[active] = np.max(np.abs(F), axis=1)
        J = jacobian(za, active) if jacobian is not None else _fd_jacobian(residual, za, active, F)
        try:
            delta = np.linalg.solve(J, F[..., None])[..., 0]
        except np.linalg.LinAlgError:
            delta = np.stack([np.linalg.lstsq(Ji, Fi, rcond=None)[0] for Ji, Fi in zip(J, F)])
        z[active] = za - delta
        iterations[active] += 1
        small = np.max(np.abs(delta), axis=1) <= tol * np.maximum(1.0, np.max(np.abs(za), axis=1))
        converged[active[small]] = True
        active = active[~small]
    return z, converged, res_norm, iterations


# -- steppers ---------------------------------------------------------------


def _as_batch(prob, z):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != 2 * prob.d or z.ndim > 2:
        raise UsageError(f"phase point must have shape (2d,) or (n, 2d) with d={prob.d}, got {z.shape}")
    single = z.ndim == 1
    return np.atleast_2d(z), single


def _finish(z_new, ok, res, single, what):
    if not np.all(ok):
        raise NewtonFailure(f"Newton iteration did not converge in {what}", float(np.max(res[~ok])))
    return z_new[0] if single else z_new


def _sv_a(prob: HjProblem, z, h, tol, max_iter):
    d = prob.d
    x, p = z[:, :d], z[:, d:]
    half = 0.5 * h
    ph, ok1, r1, _ = newton_solve(lambda v, r: v - p[r] + half * prob.H_x(x[r], v), p, tol=tol, max_iter=max_iter)
    hp0 = prob.H_p(x, ph)
    x1, ok2, r2, _ = newton_solve(lambda v, r: v - x[r] - half * (hp0[r] + prob.H_p(v, ph[r])), x,
                                  tol=tol, max_iter=max_iter)
    p1 = ph - half * prob.H_x(x1, ph)
    return np.concatenate([x1, p1], axis=1), ok1 & ok2, np.maximum(r1, r2)


def _sv_b(prob: HjProblem, z, h, tol, max_iter):
    d = prob.d
    x, p = z[:, :d], z[:, d:]
    half = 0.5 * h
    xh, ok1, r1, _ = newton_solve(lambda v, r: v - x[r] - half * prob.H_p(v, p[r]), x, tol=tol, max_iter=max_iter)
    hx0 = prob.H_x(xh, p)
    p1, ok2, r2, _ = newton_solve(lambda v, r: v - p[r] + half * (hx0[r] + prob.H_x(xh[r], v)), p,
                                  tol=tol, max_iter=max_iter)
    x1 = xh + half * prob.H_p(xh, p1)
    return np.concatenate([x1, p1], axis=1), ok1 & ok2, np.maximum(r1, r2)


def _sv_control(prob: HjProblem, z, h, tol, max_iter):
    d = prob.d
    x, p = z[:, :d], z[:, d:]
    half = 0.5 * h
    eye = np.eye(d)
    if prob.constant_R:
        M = eye + half * np.swapaxes(prob.jac_f(x), -1, -2)
        if np.min(np.abs(np.linalg.det(M))) < 1e-14:
            raise NumericalError(f"I + (h/2) Df^T is singular; reduce |h| (currently {abs(h)})")
        ph = np.linalg.solve(M, (p - half * prob.grad_q(x))[..., None])[..., 0]
        ok1 = np.ones(len(z), dtype=bool)
        r1 = np.zeros(len(z))
    else:
        ph, ok1, r1, _ = newton_solve(lambda v, r: v - p[r] + half * prob.H_x(x[r], v), p,
                                      tol=tol, max_iter=max_iter)
    Rph_0 = np.einsum("...ij,...j->...i", prob.R(x), ph)
    drift0 = prob.f(x) - Rph_0

    def residual(v, r):
        Rv = np.einsum("...ij,...j->...i", prob.R(v), ph[r])
        return v - x[r] - half * (drift0[r] + prob.f(v) - Rv)

    jac = None
    if prob.constant_R:
        def jac(v, r):
            return eye - half * prob.jac_f(v)

    x1, ok2, r2, _ = newton_solve(residual, x, jacobian=jac, tol=tol, max_iter=max_iter)
    p1 = ph - half * prob.H_x(x1, ph)
    return np.concatenate([x1, p1], axis=1), ok1 & ok2, np.maximum(r1, r2)


_DP_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])


def _rhs(prob, z):
    d = prob.d
    dx, dp = prob.vector_field(z[:, :d], z[:, d:])
    return np.concatenate([dx, dp], axis=1)


def _dp_step(prob, z, h, tol=None, max_iter=None):
    stages = []
    for i in range(7):
        zi = z + h * sum(a * k for a, k in zip(_DP_A[i], stages)) if i else z
        stages.append(_rhs(prob, zi))
    z1 = z + h * sum(b * k for b, k in zip(_DP_B, stages))
    return z1, np.ones(len(z), bool), np.zeros(len(z))


_STEPPERS = {"sv_a": _sv_a, "sv_b": _sv_b, "sv_control": _sv_control, "rk45": _dp_step}


def _public(kind, what):
    def step(prob: HjProblem, z, h: float, config: Optional[IntegratorConfig] = None):
        if h == 0 or not np.isfinite(h):
            raise UsageError("step size h must be finite and non-zero")
        cfg = config or IntegratorConfig(h=h)
        zb, single = _as_batch(prob, z)
        z1, ok, res = _STEPPERS[kind](prob, zb, h, cfg.newton_tol, cfg.newton_max_iter)
        return _finish(z1, ok, res, single, what)

    return step


sv_step_a = _public("sv_a", "Stormer-Verlet scheme A")
sv_step_a.__name__ = "sv_step_a"
sv_step_a.__doc__ = """One step of the scheme: implicit half-kick in p, implicit (trapezoidal)
drift in x, explicit half-kick in p."""

sv_step_b = _public("sv_b", "Stormer-Verlet scheme B")
sv_step_b.__name__ = "sv_step_b"
sv_step_b.__doc__ = "Adjoint of :func:`sv_step_a`: half-drift, kick, half-drift."

sv_step_control = _public("sv_control", "Stormer-Verlet control scheme")
sv_step_control.__name__ = "sv_step_control"
sv_step_control.__doc__ = """Scheme A specialized to H = p^T f - p^T R p / 2 + q.

With constant R the half-kick is the explicit linear solve
``p_half = (I + h/2 Df(x)^T)^{-1} (p - h/2 grad q(x))`` and only the drift
is implicit (Newton with the analytic Jacobian ``I - h/2 Df``)."""

rk45_step = _public("rk45", "Dormand-Prince step")
rk45_step.__name__ = "rk45_step"
rk45_step.__doc__ = "One fixed step of the 5th-order Dormand-Prince formula (not symplectic)."


# -- trajectories -----------------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    H_values: np.ndarray
    stop_reason: str = COMPLETED
    stop_time: Optional[float] = None
    residual: Optional[float] = None
    nfev: Optional[int] = None

    @property
    def x(self):
        return self.states[:, : self.states.shape[1] // 2]

    @property
    def p(self):
        return self.states[:, self.states.shape[1] // 2 :]


def integrate_many(prob: HjProblem, Z0, config: IntegratorConfig, n_steps: int, method: str = "sv_control",
                   reference=None, check: bool = True) -> list:
    """Integrate a batch of initial points with per-row Hamiltonian check.

    A row stops when ``|H(z_n) - ref| > delta`` (the offending sample is not
    kept), when Newton fails, or after ``n_steps``. ``reference`` defaults to
    ``H(z_0)`` per row; pass ``0.0`` to bound ``|H|`` itself.
    """
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {METHODS}")
    Z0, _ = _as_batch(prob, Z0)
    if not np.all(np.isfinite(Z0)):
        raise NumericalError("non-finite initial state")
    if n_steps < 0:
        raise UsageError("n_steps must be non-negative")
    H0 = prob.H(Z0[:, : prob.d], Z0[:, prob.d :])
    ref = H0 if reference is None else np.broadcast_to(np.asarray(reference, float), H0.shape)
    if method == "rk45":
        return [_integrate_rk45(prob, z0, config, n_steps, r, check) for z0, r in zip(Z0, ref)]
    stepper = _STEPPERS[method]
    n, m = Z0.shape
    states = np.full((n_steps + 1, n, m), np.nan)
    Hs = np.full((n_steps + 1, n), np.nan)
    states[0], Hs[0] = Z0, H0
    last = np.full(n, n_steps)
    reasons = [COMPLETED] * n
    residuals = [None] * n
    active = np.arange(n)
    z = Z0.copy()
    for step in range(1, n_steps + 1):
        if active.size == 0:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            z1, ok, res = stepper(prob, z[active], config.h, config.newton_tol, config.newton_max_iter)
            H1 = prob.H(z1[:, : prob.d], z1[:, prob.d :])
        finite = np.all(np.isfinite(z1), axis=1) & np.isfinite(H1)
        bad_newton = ~ok
        if check:
            bad_ham = ok & (~finite | (np.abs(H1 - ref[active]) > config.ham_check_delta))
        else:
            bad_ham = np.zeros_like(ok)
            if np.any(ok & ~finite):
                raise NumericalError(f"non-finite state at t={step * config.h:.6g}")
        for j in np.flatnonzero(bad_newton):
            row = active[j]
            reasons[row], last[row], residuals[row] = NEWTON_FAILURE, step - 1, float(res[j])
        for j in np.flatnonzero(bad_ham):
            row = active[j]
            reasons[row], last[row] = HAMILTONIAN_CHECK, step - 1
        good = ~(bad_newton | bad_ham)
        rows = active[good]
        states[step, rows] = z1[good]
        Hs[step, rows] = H1[good]
        z[rows] = z1[good]
        active = rows
    out = []
    for i in range(n):
        k = last[i] + 1
        times = config.h * np.arange(k)
        stop_time = None if reasons[i] == COMPLETED else config.h * (last[i] + 1)
        out.append(Trajectory(times, states[:k, i].copy(), Hs[:k, i].copy(), reasons[i], stop_time, residuals[i]))
    return out


def _integrate_rk45(prob, z0, config, n_steps, ref, check):
    h = config.h
    t_end = h * n_steps
    t_eval = h * np.arange(n_steps + 1)
    d = prob.d

    def rhs(t, z):
        dx, dp = prob.vector_field(z[:d], z[d:])
        return np.concatenate([dx, dp])

    events = None
    if check:
        def event(t, z):
            with np.errstate(over="ignore", invalid="ignore"):
                val = config.ham_check_delta - abs(float(prob.H(z[:d], z[d:])) - ref)
            return val if np.isfinite(val) else -1.0

        event.terminal = True
        events = [event]
    with np.errstate(over="ignore", invalid="ignore"):
        sol = solve_ivp(rhs, (0.0, t_end), z0, method="RK45", t_eval=t_eval, rtol=config.rk45_rtol,
                        atol=config.rk45_atol, events=events)
    states = sol.y.T
    H = prob.H(states[:, :d], states[:, d:]) if len(states) else np.array([])
    keep = len(states)
    if check:
        viol = np.flatnonzero(~(np.abs(H - ref) <= config.ham_check_delta))
        if viol.size:
            keep = min(keep, int(viol[0]))
    reason, stop_time = COMPLETED, None
    if keep < n_steps + 1:
        reason = HAMILTONIAN_CHECK if check else COMPLETED
        stop_time = float(sol.t_events[0][0]) if check and sol.t_events and len(sol.t_events[0]) else h * keep
        if sol.status == -1 and not check:
            raise NumericalError(f"RK45 failed: {sol.message}")
    return Trajectory(t_eval[:keep], states[:keep], H[:keep], reason, stop_time, nfev=int(sol.nfev))


def integrate(prob: HjProblem, z0, config: IntegratorConfig, n_steps: int, method: str = "sv_a",
              reference=None, check: bool = True) -> Trajectory:
    """Fixed-step integration of one initial point (see :func:`integrate_many`).

    ``rk45`` is the adaptive Dormand-Prince comparator at tolerance
    ``config.rk45_rtol``, sampled on the same uniform grid.
    """
    z0 = np.asarray(z0, float)
    if z0.ndim != 1:
        raise UsageError("integrate takes a single phase point; use integrate_many for batches")
    return integrate_many(prob, z0[None, :], config, n_steps, method, reference, check)[0]


def symplecticity_test(prob: HjProblem, step_fn: Callable, z, h: float, eps: float = 1e-6) -> float:
    """``|| DPhi^T J DPhi - J ||_F`` with ``DPhi`` by central differences."""
    z = np.asarray(z, float)
    m = z.size
    E = eps * np.eye(m)
    Zp = step_fn(prob, z[None, :] + E, h)
    Zm = step_fn(prob, z[None, :] - E, h)
    D = ((Zp - Zm) / (2 * eps)).T
    J = symplectic_matrix(m // 2)
    return float(np.linalg.norm(D.T @ J @ D - J))
