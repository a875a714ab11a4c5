"""Local stable manifold by successive approximation.

Iterates, on the separated system,

    xbar_{k+1}' =  B xbar_{k+1}   + n_s(xbar_k, pbar_k),   xbar_{k+1}(0) = xi
    pbar_{k+1}' = -B^T pbar_{k+1} + n_u(xbar_k, pbar_k),   pbar_{k+1}(T) = 0

starting from ``xbar_0 = exp(Bt) xi``, ``pbar_0 = 0``, and provides the
closed-form convergence certificate (radius, decay bounds, error bounds).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .exceptions import CertificateError, NumericalError, UsageError
from .linear import SeparatedSystem, matrix_exponential


# -- certificate ------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceCertificate:
    a: float
    b: float
    L: float
    M: float
    rho: float
    xi_norm: float
    g: float
    alpha: float
    beta: float
    contraction: float
    C_x: float
    C_y: float
    L_enlarged: bool = False
    certified: bool = True

    def sequences(self, n: int = 10) -> dict:
        """The majorant recursions (alpha_k, beta_k) and increment bounds
        (gamma_k, eps_k) for k < n. Reported only; the limits are what the
        computation uses."""
        a, b, M, xi = self.a, self.b, self.M, self.xi_norm
        c0 = a * M / (3 * b)
        alpha, beta = [a * xi], [0.0]
        for _ in range(n - 1):
            s = (alpha[-1] + beta[-1]) ** 2
            alpha.append(3 * c0 * s + a * xi)
            beta.append(c0 * s)
        lam = a * (self.alpha + self.beta) * M / b
        gamma, eps = [a**3 * M * xi**2 / b], [a**3 * M * xi**2 / (3 * b)]
        for _ in range(n - 2):
            s = gamma[-1] + eps[-1]
            gamma.append(lam * s)
            eps.append(lam * s / 3)
        return {"alpha_k": alpha, "beta_k": beta, "gamma_k": [0.0] + gamma, "eps_k": [0.0] + eps}

    def to_dict(self) -> dict:
        out = {k: (float(v) if isinstance(v, float) else v) for k, v in self.__dict__.items()}
        out["sequences"] = self.sequences(6)
        return out


def _lipschitz_fn(M_of_L) -> Callable[[float], float]:
    if callable(M_of_L):
        return M_of_L
    value = float(M_of_L)
    return lambda L: value


def admissible_ball(a, b, M_of_L, L0=None, max_doublings=60):
    """Smallest ball size ``L`` (searching upward from ``L0``) with
    ``M(L) L >= 3b/(8a)``. Returns ``(L, enlarged)``."""
    M_of_L = _lipschitz_fn(M_of_L)
    target = 3 * b / (8 * a)
    if L0 is not None:
        if M_of_L(L0) * L0 >= target:
            return float(L0), False
        L = float(L0)
    else:
        L = target / max(M_of_L(1e-12), 1e-300)
        if M_of_L(L) * L >= target * (1 - 1e-12):
            return L, False
    for _ in range(max_doublings):
        L *= 2.0
        if M_of_L(L) * L >= target:
            return L, L0 is not None
    raise CertificateError("no ball size L satisfies M(L) L >= 3b/(8a)")


def certify(a, b, M_of_L, L=None, xi_norm=None, certified=True) -> ConvergenceCertificate:
    """Closed-form convergence certificate.

    ``M_of_L`` is the Lipschitz coefficient as a function of the ball size (or
    a constant). If ``L`` violates ``M(L) L >= 3b/(8a)`` it is enlarged and the
    certificate is flagged. ``xi_norm`` defaults to the admissible radius.
    """
    a, b = float(a), float(b)
    if a <= 0 or b <= 0:
        raise CertificateError(f"decay constants must be positive, got a={a}, b={b}")
    if L is not None and L <= 0:
        raise CertificateError("ball size L must be positive")
    L, enlarged = admissible_ball(a, b, M_of_L, L)
    M = float(_lipschitz_fn(M_of_L)(L))
    if M <= 0:
        raise CertificateError("Lipschitz coefficient M(L) must be positive")
    if M * L < 3 * b / (8 * a) * (1 - 1e-12):
        raise CertificateError(f"M(L) L = {M * L:.6g} < 3b/(8a) = {3 * b / (8 * a):.6g}")
    rho = 3 * b / (16 * a * a * M)
    xi = rho if xi_norm is None else float(xi_norm)
    if xi < 0:
        raise UsageError("xi_norm must be non-negative")
    if xi > rho * (1 + 1e-12):
        raise CertificateError(f"|xi| = {xi:.6g} exceeds the admissible radius 3b/(16 a^2 M) = {rho:.6g}")
    g = 3 * b / (32 * a * M) - a * xi / 4
    disc = g * g - a * a * xi * xi / 16
    if disc < 0:
        if disc < -1e-12 * g * g:
            raise CertificateError(f"g^2 - a^2 |xi|^2 / 16 = {disc:.3e} < 0")
        disc = 0.0
    denom = g + math.sqrt(disc)
    if denom > 0:
        beta = (a * a / 16) * xi * xi / denom
    else:
        beta = 0.0
    alpha = 3 * beta + a * xi
    lam = a * (alpha + beta) * M / b
    contraction = 4.0 / 3.0 * lam
    if contraction > 0.5 * (1 + 1e-12):
        raise CertificateError(f"contraction factor {contraction:.6g} exceeds 1/2")
    C_x = 4 * a**3 * M / (3 * (b - a * (alpha + beta) * M))
    C_y = 4 * a**3 * M / (3 * b - a * (alpha + beta) * M)
    return ConvergenceCertificate(a=a, b=b, L=L, M=M, rho=rho, xi_norm=xi, g=g, alpha=alpha,
                                  beta=beta, contraction=contraction, C_x=C_x, C_y=C_y,
                                  L_enlarged=enlarged, certified=certified)


def error_bound(cert: ConvergenceCertificate, k: int) -> tuple[float, float]:
    """Coefficients of ``exp(-bt)`` (state) and ``exp(-2bt)`` (costate) in the
    bound on the distance between the k-th iterate and the limit."""
    if k < 1:
        raise UsageError("error_bound requires k >= 1")
    factor = cert.contraction ** (k - 1) * cert.xi_norm**2
    return factor * cert.C_x, factor * cert.C_y


def estimate_lipschitz(sep: SeparatedSystem, L: float, n_samples: int = 2000, seed: int = 0) -> float:
    """Sampled (non-certified) estimate of M(L) over the ball ``|x|+|y| <= L``.

    Uses ``M ~ max |n(z) - n(z')| / (l |z - z'|_1)`` over random nearby pairs.
    """
    rng = np.random.default_rng(seed)
    d = sep.d
    z = rng.normal(size=(n_samples, 2 * d))
    radius = L * rng.uniform(0, 1, size=(n_samples, 1)) ** (1 / (2 * d))
    z = z / np.abs(z).sum(axis=1, keepdims=True) * radius
    dz = rng.normal(size=z.shape) * 1e-3 * L
    z2 = z + dz
    l = np.maximum(np.abs(z[:, :d]).sum(1) + np.abs(z[:, d:]).sum(1),
                   np.abs(z2[:, :d]).sum(1) + np.abs(z2[:, d:]).sum(1))
    ns1, nu1 = sep.nonlinear(z[:, :d], z[:, d:])
    ns2, nu2 = sep.nonlinear(z2[:, :d], z2[:, d:])
    dist = np.linalg.norm(dz[:, :d], axis=1) + np.linalg.norm(dz[:, d:], axis=1)
    ratio = np.maximum(np.linalg.norm(ns1 - ns2, axis=1), np.linalg.norm(nu1 - nu2, axis=1)) / (l * dist)
    return float(np.max(ratio))


# -- iteration ----------------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    """Time grid and integrator settings for the iteration.

    ``T_horizon`` defaults to ``max(10, 14/b)``.
    """

    dt: float = 0.01
    T_horizon: Optional[float] = None
    rtol: float = 1e-10
    atol: float = 1e-20

    def horizon(self, b: float) -> float:
        return self.T_horizon if self.T_horizon is not None else max(10.0, 14.0 / b)


@dataclass
class LocalCurve:
    xi: np.ndarray
    t: np.ndarray
    xbar: np.ndarray
    pbar: np.ndarray
    x: np.ndarray
    p: np.ndarray
    H: np.ndarray
    k: int
    sup_diff: float
    increments: list = field(default_factory=list)

    @property
    def boundary_point(self) -> np.ndarray:
        """``(x, p)`` at t = 0 in original coordinates."""
        i0 = int(np.searchsorted(self.t, 0.0))
        return np.concatenate([self.x[i0], self.p[i0]])


@dataclass
class LocalManifold:
    curves: list
    certificate: Optional[ConvergenceCertificate]
    k: int

    @property
    def boundary(self) -> np.ndarray:
        """Points ``(xi, pbar_k(0, xi))`` in bar coordinates, one row per curve."""
        return np.array([np.concatenate([c.xbar[0], c.pbar[0]]) for c in self.curves])

    @property
    def boundary_original(self) -> np.ndarray:
        return np.array([c.boundary_point for c in self.curves])


def _time_grid(t_lo, t_hi, dt):
    n_neg = int(round(-t_lo / dt))
    n_pos = int(round(t_hi / dt))
    return np.arange(-n_neg, n_pos + 1) * dt


def _exp_orbit(B, xis, t):
    """``exp(Bt) xi`` for all grid times and all xi, shape (len(t), n, d)."""
    out = np.empty((len(t), xis.shape[0], xis.shape[1]))
    for i, ti in enumerate(t):
        out[i] = xis @ matrix_exponential(B, ti).T
    return out


def _solve_linear(rhs_lin, forcing, y0, t_span, t_eval, rtol, atol, tolerant):
    """Solve ``y' = rhs_lin(y) + forcing(t)``; returns ``(values, ok)``.

    With ``tolerant`` a failed solve is returned NaN-padded instead of raising.
    """
    n, d = y0.shape

    def rhs(t, y):
        return (rhs_lin(y.reshape(n, d)) + forcing(t)).ravel()

    with np.errstate(over="ignore", invalid="ignore"):
        sol = solve_ivp(rhs, t_span, y0.ravel(), method="RK45", t_eval=t_eval, rtol=rtol, atol=atol)
    m = sol.y.shape[1]
    if sol.status == 0 and m == len(t_eval):
        return sol.y.T.reshape(m, n, d), True
    if not tolerant:
        raise NumericalError(f"linear solve failed: {sol.message}")
    out = np.full((len(t_eval), n, d), np.nan)
    out[:m] = sol.y.T.reshape(m, n, d)
    return out, False


def _sweep_once(sep, t, i0, X, Pb, xis, grid, tolerant):
    """One iteration for a batch: the new ``(xbar, pbar)`` on the grid."""
    B = sep.B
    n, d = xis.shape
    spline = CubicSpline(t, np.concatenate([X, Pb], axis=2), axis=0)

    def ns(tt):
        z = spline(tt)
        return sep.nonlinear(z[:, :d], z[:, d:])[0]

    def nu(tt):
        z = spline(tt)
        return sep.nonlinear(z[:, :d], z[:, d:])[1]

    def lin_x(Y):
        return Y @ B.T

    def lin_p(Y):
        return -Y @ B

    Xn = np.empty_like(X)
    Xn[i0:], ok1 = _solve_linear(lin_x, ns, xis, (0.0, t[-1]), t[i0:], grid.rtol, grid.atol, tolerant)
    ok2 = True
    if i0 > 0:
        back, ok2 = _solve_linear(lin_x, ns, xis, (0.0, t[0]), t[: i0 + 1][::-1], grid.rtol, grid.atol,
                                  tolerant)
        Xn[: i0 + 1] = back[::-1]
    Pn, ok3 = _solve_linear(lin_p, nu, np.zeros((n, d)), (t[-1], t[0]), t[::-1], grid.rtol, grid.atol,
                            tolerant)
    return Xn, Pn[::-1], ok1 and ok2 and ok3


def _sweep_split(sep, t, i0, X, Pb, xis, grid, tolerant):
    """:func:`_sweep_once`, bisecting the batch when a solve fails so that
    only the failing curves end up NaN-padded."""
    Xn, Pn, ok = _sweep_once(sep, t, i0, X, Pb, xis, grid, tolerant)
    n = xis.shape[0]
    if ok or n == 1:
        return Xn, Pn
    h = n // 2
    lo = _sweep_split(sep, t, i0, X[:, :h], Pb[:, :h], xis[:h], grid, tolerant)
    hi = _sweep_split(sep, t, i0, X[:, h:], Pb[:, h:], xis[h:], grid, tolerant)
    return np.concatenate([lo[0], hi[0]], axis=1), np.concatenate([lo[1], hi[1]], axis=1)


def picard_sweep(sep: SeparatedSystem, xis, k: int, grid: GridConfig = GridConfig(),
                 t_lo: float = 0.0, ball: Optional[float] = None, blowup: Optional[float] = None,
                 settle_tol: Optional[float] = None):
    """Run ``k`` iterations for a batch of initial conditions.

    Returns ``(t, xbar, pbar, increments, diverged_at)`` with ``xbar`` and
    ``pbar`` of shape ``(len(t), n, d)``. ``increments[j]`` has shape ``(n, 2)``:
    the sup-norm differences ``|xbar_{j+1} - xbar_j|`` and ``|pbar_{j+1} - pbar_j|``
    per curve. With ``t_lo < 0`` the state equation is also solved backward
    from 0 to ``t_lo``.

    ``blowup`` enables divergence tracking: a curve whose iterate is
    non-finite or exceeds ``blowup`` in magnitude keeps that iterate, is
    dropped from later iterations and gets ``diverged_at`` = iteration index
    (``-1`` otherwise). Without it, divergence raises.

    ``settle_tol`` stops iterating a curve once both sup-norm increments are
    below it (a fixed point up to round-off); later increments are recorded
    as 0 for that curve.
    """
    xis = np.atleast_2d(np.asarray(xis, float))
    if xis.shape[1] != sep.d:
        raise UsageError(f"xi must have dimension {sep.d}")
    if k < 0:
        raise UsageError("k must be non-negative")
    n, d = xis.shape
    T = grid.horizon(decay_b(sep))
    t = _time_grid(t_lo, T, grid.dt)
    i0 = int(np.searchsorted(t, 0.0))
    X = _exp_orbit(sep.B, xis, t)
    Pb = np.zeros_like(X)
    increments = []
    diverged_at = np.full(n, -1)
    tolerant = blowup is not None
    active = np.arange(n)
    settled = np.zeros(n, dtype=bool)
    for it in range(k):
        if active.size == 0:
            break
        Xa, Pa = X[:, active], Pb[:, active]
        Xn, Pn = _sweep_split(sep, t, i0, Xa, Pa, xis[active], grid, tolerant)
        with np.errstate(invalid="ignore"):
            size = np.max(np.linalg.norm(Xn, axis=2) + np.linalg.norm(Pn, axis=2), axis=0)
        bad = ~np.isfinite(size)
        if tolerant:
            bad |= size > blowup
        elif np.any(bad):
            raise NumericalError(f"iterate {it + 1} is not finite")
        step = np.full((n, 2), np.nan)
        step[settled] = 0.0
        step[active, 0] = np.max(np.linalg.norm(Xn - Xa, axis=2), axis=0)
        step[active, 1] = np.max(np.linalg.norm(Pn - Pa, axis=2), axis=0)
        increments.append(step)
        X[:, active], Pb[:, active] = Xn, Pn
        if ball is not None and np.any(size > ball):
            j = int(np.argmax(size))
            raise NumericalError(
                f"iterate {it + 1} left the ball |xbar|+|pbar| <= {ball:.6g} "
                f"(max {size[j]:.6g}) for xi={xis[active[j]].tolist()}"
            )
        diverged_at[active[bad]] = it
        done = bad.copy()
        if settle_tol is not None:
            with np.errstate(invalid="ignore"):
                calm = np.all(step[active] <= settle_tol, axis=1) & ~bad
            settled[active[calm]] = True
            done |= calm
        active = active[~done]
    return t, X, Pb, increments, diverged_at


def decay_b(sep: SeparatedSystem) -> float:
    """Decay rate used to size the horizon: the registry value if present,
    else the spectral abscissa of B."""
    if sep.base.decay is not None:
        return float(sep.base.decay[1])
    return float(-np.max(np.linalg.eigvals(sep.B).real))


def _curves_from_sweep(sep, xis, k, t, X, Pb, increments):
    tr = sep.transform
    curves = []
    for j in range(xis.shape[0]):
        xbar, pbar = X[:, j, :].copy(), Pb[:, j, :].copy()
        x, p = tr.from_bar(xbar, pbar)
        inc = [tuple(map(float, step[j])) for step in increments]
        curves.append(LocalCurve(xi=xis[j].copy(), t=t.copy(), xbar=xbar, pbar=pbar, x=x, p=p,
                                 H=sep.base.H(x, p), k=k, sup_diff=inc[-1][0] if inc else 0.0,
                                 increments=inc))
    return curves


def picard_iterate(sep: SeparatedSystem, xi, k: int, grid: GridConfig = GridConfig(),
                   cert: Optional[ConvergenceCertificate] = None) -> LocalCurve:
    """Local curve through ``xi`` after ``k`` iterations."""
    xi = np.asarray(xi, float).reshape(1, -1)
    if cert is not None and np.linalg.norm(xi) > cert.rho * (1 + 1e-12):
        raise CertificateError(f"|xi| = {np.linalg.norm(xi):.6g} exceeds rho = {cert.rho:.6g}")
    t, X, Pb, inc, _ = picard_sweep(sep, xi, k, grid, ball=None if cert is None else cert.L)
    return _curves_from_sweep(sep, xi, k, t, X, Pb, inc)[0]


def sample_sphere(n: int, radius: float, d: int, rng: Union[np.random.Generator, int, None] = None,
                  method: str = "random") -> np.ndarray:
    """``n`` points on the sphere of the given radius: uniformly random
    (default) or, for d = 2, equally spaced in angle."""
    if method == "equispaced":
        if d != 2:
            raise UsageError("equispaced sampling is only defined for d = 2")
        theta = 2 * np.pi * np.arange(n) / n
        return radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    rng = np.random.default_rng(rng)
    v = rng.normal(size=(n, d))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def build_local_manifold(sep: SeparatedSystem, xis, k: int, grid: GridConfig = GridConfig(),
                         cert: Optional[ConvergenceCertificate] = None, chunk_size: int = 50,
                         threads: int = 1) -> LocalManifold:
    """Iterate every ``xi`` and collect the curves.

    The batch is split into fixed chunks (independent of ``threads``) so the
    result does not depend on the worker count.
    """
    xis = np.atleast_2d(np.asarray(xis, float))
    if cert is not None:
        norms = np.linalg.norm(xis, axis=1)
        if np.any(norms > cert.rho * (1 + 1e-12)):
            raise CertificateError(f"max |xi| = {norms.max():.6g} exceeds rho = {cert.rho:.6g}")
    chunks = [xis[i:i + chunk_size] for i in range(0, len(xis), chunk_size)]
    ball = None if cert is None else cert.L

    def run(chunk):
        try:
            t, X, Pb, inc, _ = picard_sweep(sep, chunk, k, grid, ball=ball)
        except NumericalError as exc:
            raise NumericalError(f"iteration failed for xi batch starting at {chunk[0].tolist()}: {exc}") from exc
        return _curves_from_sweep(sep, chunk, k, t, X, Pb, inc)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    curves = [c for part in parts for c in part]
    return LocalManifold(curves=curves, certificate=cert, k=k)
