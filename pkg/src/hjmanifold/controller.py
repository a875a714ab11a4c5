"""Polynomial feedback from manifold samples and closed-loop simulation."""

from __future__ import annotations

import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.integrate import solve_ivp

from .exceptions import NumericalError, UsageError
from .extension import GlobalManifold
from .problems import ControlProblem


@dataclass
class SampleSet:
    """Samples ``(x, p)`` drawn from manifold curves.

    ``curve`` is the source curve index (-1 for the appended origin) and ``t``
    the curve time (NaN for the origin).
    """

    x: np.ndarray
    p: np.ndarray
    H: np.ndarray
    curve: np.ndarray
    t: np.ndarray

    def __len__(self):
        return self.x.shape[0]


def _hermite(c, times, prob):
    """Cubic Hermite interpolation of a curve using the Hamiltonian field as
    the derivative at the stored nodes."""
    j = np.clip(np.searchsorted(c.t, times), 1, len(c.t) - 1)
    t0, t1 = c.t[j - 1], c.t[j]
    h = (t1 - t0)[:, None]
    s = ((times - t0) / (t1 - t0))[:, None]
    z = c.states
    z0, z1 = z[j - 1], z[j]
    d = c.x.shape[1]
    f0 = np.concatenate(prob.vector_field(z0[:, :d], z0[:, d:]), axis=1)
    f1 = np.concatenate(prob.vector_field(z1[:, :d], z1[:, d:]), axis=1)
    h00, h10 = 2 * s ** 3 - 3 * s ** 2 + 1, s ** 3 - 2 * s ** 2 + s
    h01, h11 = -2 * s ** 3 + 3 * s ** 2, s ** 3 - s ** 2
    zi = h00 * z0 + h10 * h * f0 + h01 * z1 + h11 * h * f1
    nearest = np.where(s[:, 0] < 0.5, j - 1, j)
    return zi, nearest


def draw_samples(manifold: GlobalManifold, per_curve: int = 10, time_range=(-3.5, 0.0),
                 seed=None) -> SampleSet:
    """Per curve: the earliest retained point in ``time_range`` plus
    ``per_curve - 1`` uniformly random times in ``(t_start, t_end]``. The
    origin is appended last.

    Off-grid times are interpolated by cubic Hermite polynomials with the
    Hamiltonian field as derivative when ``manifold.problem`` is known (a
    sample whose ``|H|`` would still exceed the manifold tolerance is replaced
    by the nearer stored node), otherwise linearly.
    """
    if per_curve < 1:
        raise UsageError("per_curve must be at least 1")
    t_lo, t_hi = map(float, time_range)
    if not t_lo < t_hi:
        raise UsageError("time_range must be an increasing pair")
    if not manifold.curves:
        raise UsageError("manifold has no curves")
    prob = manifold.problem
    rng = np.random.default_rng(seed)
    xs, ps, ids, ts = [], [], [], []
    for i, c in enumerate(manifold.curves):
        inside = (c.t >= t_lo) & (c.t <= t_hi)
        if not np.any(inside):
            warnings.warn(f"curve {i} has no samples in {time_range}; skipped", RuntimeWarning)
            continue
        t_start = float(c.t[inside].min())
        t_end = float(c.t[inside].max())
        # rng.uniform is on [0, 1), so times land in (t_start, t_end]
        times = np.concatenate([[t_start], t_end - (t_end - t_start) * rng.uniform(size=per_curve - 1)])
        d = c.x.shape[1]
        if prob is None:
            z = np.stack([np.interp(times, c.t, c.states[:, j]) for j in range(2 * d)], axis=1)
        else:
            z, nearest = _hermite(c, times, prob)
            off = np.abs(prob.H(z[:, :d], z[:, d:])) > manifold.delta
            z[off] = c.states[nearest[off]]
            times = np.where(off, c.t[nearest], times)
        xs.append(z[:, :d])
        ps.append(z[:, d:])
        ids.append(np.full(per_curve, i))
        ts.append(times)
    if not xs:
        raise UsageError("no curve has samples in the requested time range")
    d = xs[0].shape[1]
    x = np.concatenate(xs + [np.zeros((1, d))])
    p = np.concatenate(ps + [np.zeros((1, d))])
    curve = np.concatenate(ids + [[-1]])
    t = np.concatenate(ts + [[np.nan]])
    H = prob.H(x, p) if prob is not None else np.full(len(x), np.nan)
    return SampleSet(x, p, H, curve, t)


def with_hamiltonian(samples: SampleSet, prob) -> SampleSet:
    """Same samples with ``H`` recomputed from the stored states."""
    return SampleSet(samples.x, samples.p, prob.H(samples.x, samples.p), samples.curve, samples.t)


# -- polynomial fit -----------------------------------------------------------


def tensor_exponents(d: int, degree: int, constrain_origin: bool = False) -> np.ndarray:
    """Exponent tuples ``0 <= i_k <= degree`` in row-major order."""
    exps = np.array(list(itertools.product(range(degree + 1), repeat=d)), dtype=int)
    return exps[1:] if constrain_origin else exps


def design_matrix(x, exponents) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, float))
    return np.prod(x[:, None, :] ** exponents[None, :, :], axis=2)


def _monomial(e) -> str:
    return "*".join(f"x{k + 1}^{int(n)}" for k, n in enumerate(e) if n) or "1"


def lstsq_qr(V, Y, exponents=None, rcond: Optional[float] = None):
    """Least squares ``min |V C - Y|`` by column-scaled, pivoted QR.

    Raises :class:`NumericalError` naming the dependent columns when ``V`` is
    rank deficient.
    """
    n, m = V.shape
    scale = np.linalg.norm(V, axis=0)
    if np.any(scale == 0):
        bad = np.flatnonzero(scale == 0)
        names = [_monomial(exponents[j]) if exponents is not None else str(j) for j in bad]
        raise NumericalError(f"rank-deficient design matrix: zero columns {names}")
    Q, R, piv = scipy.linalg.qr(V / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rcond = max(n, m) * np.finfo(float).eps if rcond is None else rcond
    rank = int(np.sum(diag > rcond * diag[0]))
    if rank < m:
        dep = piv[rank:]
        names = [_monomial(exponents[j]) if exponents is not None else str(j) for j in dep]
        raise NumericalError(f"rank-deficient design matrix: rank {rank} < {m}; dependent terms {names}")
    C = np.empty((m, Y.shape[1]))
    C[piv] = scipy.linalg.solve_triangular(R, Q.T @ Y)
    return C / scale[:, None]


@dataclass
class PolynomialController:
    """Tensor-product polynomial ``p_pol(x) = sum_e C_e x^e`` per component."""

    degree: int
    exponents: np.ndarray
    coef: np.ndarray
    constrain_origin: bool
    rms_residual: float = float("nan")
    max_residual: float = float("nan")

    @property
    def d(self) -> int:
        return self.exponents.shape[1]

    @property
    def n_terms(self) -> int:
        return self.exponents.shape[0]

    def costate(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        single = x.ndim == 1
        out = design_matrix(x, self.exponents) @ self.coef
        return out[0] if single else out

    __call__ = costate

    def coefficient_tensor(self, component: int) -> np.ndarray:
        """Coefficients of one output component as a ``(degree+1,)*d`` array."""
        C = np.zeros((self.degree + 1,) * self.d)
        for e, c in zip(self.exponents, self.coef[:, component]):
            C[tuple(e)] = c
        return C

    def linear_part(self) -> np.ndarray:
        """Matrix ``K`` of the degree-one terms, ``p_pol(x) = c + K x + ...``."""
        K = np.zeros((self.coef.shape[1], self.d))
        for row, e in enumerate(self.exponents):
            if e.sum() == 1:
                K[:, int(np.argmax(e))] = self.coef[row]
        return K

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "d": self.d,
            "constrain_origin": self.constrain_origin,
            "rms_residual": self.rms_residual,
            "max_residual": self.max_residual,
            "components": [{"C": self.coefficient_tensor(k).tolist()} for k in range(self.coef.shape[1])],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PolynomialController":
        degree, d = int(data["degree"]), int(data["d"])
        constrain = bool(data["constrain_origin"])
        exps = tensor_exponents(d, degree, constrain)
        tensors = [np.asarray(c["C"], float) for c in data["components"]]
        coef = np.array([[T[tuple(e)] for T in tensors] for e in exps])
        return cls(degree, exps, coef, constrain, float(data.get("rms_residual", np.nan)),
                   float(data.get("max_residual", np.nan)))


def fit_costate(x, p, degree: int = 5, constrain_origin: bool = True) -> PolynomialController:
    """Unweighted least-squares polynomial fit of ``p`` as a function of ``x``."""
    x = np.atleast_2d(np.asarray(x, float))
    p = np.asarray(p, float).reshape(x.shape[0], -1)
    if degree < 1:
        raise UsageError("degree must be at least 1")
    exps = tensor_exponents(x.shape[1], degree, constrain_origin)
    if x.shape[0] < exps.shape[0]:
        raise UsageError(f"{x.shape[0]} samples for {exps.shape[0]} unknowns per component")
    V = design_matrix(x, exps)
    C = lstsq_qr(V, p, exps)
    res = V @ C - p
    return PolynomialController(degree, exps, C, constrain_origin,
                                float(np.sqrt(np.mean(res ** 2))), float(np.max(np.abs(res))))


def fit_polynomial(samples: SampleSet, degree: int = 5, constrain_origin: bool = True) -> PolynomialController:
    return fit_costate(samples.x, samples.p, degree, constrain_origin)


def controller(ctrl: PolynomialController, cp: ControlProblem, x, domain=None) -> np.ndarray:
    """Feedback ``u = -g(x)^T p_pol(x) / r``; warns for points outside ``domain``."""
    x = np.asarray(x, float)
    if domain is not None and not np.all(domain.contains(np.atleast_2d(x))):
        warnings.warn("evaluating the controller outside the fitted domain", RuntimeWarning)
    return cp.feedback(x, ctrl.costate(x))


# -- closed loop --------------------------------------------------------------


@dataclass
class ClosedLoopResult:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    status: str
    message: str = ""

    @property
    def final_norm(self) -> float:
        return float(np.linalg.norm(self.x[-1]))

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.x, axis=1)

    def settles_below(self, threshold: float) -> bool:
        """True when the state enters ``|x| <= threshold`` and stays there."""
        above = np.flatnonzero(self.norms > threshold)
        return self.status == "completed" and (above.size == 0 or above[-1] < len(self.t) - 1)


def closed_loop_simulate(cp: ControlProblem, ctrl: PolynomialController, x0, t_final: float = 10.0,
                         dt: float = 0.01, rtol: float = 1e-8, atol: float = 1e-8) -> ClosedLoopResult:
    """Integrate ``xdot = f(x) + g(x) u(x)`` with adaptive RK45, output every ``dt``."""
    x0 = np.asarray(x0, float)
    if x0.shape != (cp.d,):
        raise UsageError(f"x0 must have shape ({cp.d},)")
    if t_final <= 0 or dt <= 0:
        raise UsageError("t_final and dt must be positive")
    t_eval = dt * np.arange(int(round(t_final / dt)) + 1)

    def rhs(t, x):
        return cp.closed_loop_rhs(x, cp.feedback(x, ctrl.costate(x)))

    def escaped(t, x):
        return 1e6 - np.linalg.norm(x)

    escaped.terminal = True
    with np.errstate(over="ignore", invalid="ignore"):
        sol = solve_ivp(rhs, (0.0, t_eval[-1]), x0, method="RK45", t_eval=t_eval, rtol=rtol, atol=atol,
                        events=escaped)
    x = sol.y.T
    ok = sol.status == 0 and np.all(np.isfinite(x)) and len(sol.t) == len(t_eval)
    status = "completed" if ok else "diverged"
    u = cp.feedback(x, ctrl.costate(x)) if len(x) else np.zeros((0, cp.base.d))
    return ClosedLoopResult(sol.t, x, u, status, "" if ok else (sol.message or "state escaped"))


def simulate_many(cp: ControlProblem, ctrl: PolynomialController, X0, t_final: float = 10.0,
                  dt: float = 0.01, threads: int = 1, **kw) -> list:
    X0 = np.atleast_2d(np.asarray(X0, float))

    def run(x0):
        return closed_loop_simulate(cp, ctrl, x0, t_final, dt, **kw)

    if threads > 1 and len(X0) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, X0))
    return [run(x0) for x0 in X0]
