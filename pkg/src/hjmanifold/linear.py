"""Linear analysis at the equilibrium.

Riccati and Lyapunov solves, the block-diagonalizing transform
``T = [[I, S], [P, PS + I]]`` and the separated nonlinear field
``(n_s, n_u)`` in the transformed coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import ComplementarityError, NotHyperbolicError, NumericalError, UsageError
from .problems import HjProblem, linearize

HYPERBOLIC_TOL = 1e-10
COMPLEMENTARITY_COND = 1e12


def hamiltonian_matrix(A, Q, R0):
    """Linearization ``[[A, -R0], [-Q, -A^T]]`` of the Hamiltonian field at 0."""
    A, Q, R0 = (np.atleast_2d(np.asarray(M, float)) for M in (A, Q, R0))
    return np.block([[A, -R0], [-Q, -A.T]])


def solve_riccati(A, Q, R0):
    """Stabilizing solution of ``PA + A^T P - P R0 P + Q = 0``.

    Computed from the stable invariant subspace ``[X; Y]`` of the Hamiltonian
    matrix (ordered real Schur form) as ``P = Y X^{-1}``.
    """
    Ham = hamiltonian_matrix(A, Q, R0)
    d = Ham.shape[0] // 2
    eigs = np.linalg.eigvals(Ham)
    scale = max(1.0, np.linalg.norm(Ham, 2))
    if np.min(np.abs(eigs.real)) <= HYPERBOLIC_TOL * scale:
        raise NotHyperbolicError(
            "not hyperbolic: the Hamiltonian matrix has an eigenvalue on the imaginary axis "
            f"(min |Re lambda| = {np.min(np.abs(eigs.real)):.3e})"
        )
    _, U, sdim = scipy.linalg.schur(Ham, output="real", sort="lhp")
    if sdim != d:
        raise NotHyperbolicError(f"expected {d} stable eigenvalues, found {sdim}")
    X, Y = U[:d, :d], U[d:, :d]
    if np.linalg.cond(X) > COMPLEMENTARITY_COND:
        raise ComplementarityError(
            "complementarity condition fails: the stable eigenspace is not transversal to Im(0, I)"
        )
    P = np.linalg.solve(X.T, Y.T).T
    return 0.5 * (P + P.T)


def solve_lyapunov(B, R0):
    """Solve ``B S + S B^T = R0`` through its Kronecker (vectorized) form."""
    B = np.atleast_2d(np.asarray(B, float))
    R0 = np.atleast_2d(np.asarray(R0, float))
    d = B.shape[0]
    eye = np.eye(d)
    # column-major vec: vec(BS) = (I kron B) vec(S), vec(S B^T) = (B kron I) vec(S)
    K = np.kron(eye, B) + np.kron(B, eye)
    if np.linalg.cond(K) > 1e14:
        raise NumericalError("singular Lyapunov operator: B and -B^T share an eigenvalue")
    S = np.linalg.solve(K, R0.reshape(-1, order="F")).reshape(d, d, order="F")
    if np.allclose(R0, R0.T, rtol=0.0, atol=1e-14):
        S = 0.5 * (S + S.T)
    return S


def matrix_exponential(M, t=1.0):
    """``exp(M t)`` by scaling and squaring with a Pade approximant."""
    return scipy.linalg.expm(np.asarray(M, float) * t)


def is_hurwitz(B) -> bool:
    return bool(np.max(np.linalg.eigvals(B).real) < 0)


def decay_constants(B, margin: float = 1e-3, n_grid: int = 400):
    """Constants ``(a, b)`` with ``||exp(Bt)||_2 <= a exp(-bt)`` for t >= 0.

    ``b`` sits a relative ``margin`` inside the spectral abscissa; ``a`` is the
    sampled supremum of ``||exp(Bt)|| exp(bt)`` on a geometric grid over
    ``[0, 50/b]``, rounded up by 1%.
    """
    B = np.atleast_2d(np.asarray(B, float))
    abscissa = np.max(np.linalg.eigvals(B).real)
    if abscissa >= 0:
        raise NumericalError(f"B is not Hurwitz (spectral abscissa {abscissa:.3e})")
    b = (1.0 - margin) * (-abscissa)
    ts = np.concatenate([[0.0], np.geomspace(1e-4 / b, 50.0 / b, n_grid)])
    vals = [np.linalg.norm(matrix_exponential(B, t), 2) * np.exp(b * t) for t in ts]
    return 1.01 * max(vals), b


@dataclass(frozen=True, eq=False)
class TransformData:
    A: np.ndarray
    Q: np.ndarray
    R0: np.ndarray
    P: np.ndarray
    S: np.ndarray
    B: np.ndarray
    T: np.ndarray
    T_inv: np.ndarray

    @property
    def d(self):
        return self.A.shape[0]

    def residuals(self) -> dict:
        A, Q, R0, P, S, B = self.A, self.Q, self.R0, self.P, self.S, self.B
        Ham = hamiltonian_matrix(A, Q, R0)
        blk = scipy.linalg.block_diag(B, -B.T)
        return {
            "riccati": float(np.linalg.norm(P @ A + A.T @ P - P @ R0 @ P + Q)),
            "riccati_symmetry": float(np.linalg.norm(P - P.T)),
            "lyapunov": float(np.linalg.norm(B @ S + S @ B.T - R0)),
            "block_diagonalization": float(np.linalg.norm(self.T_inv @ Ham @ self.T - blk)),
            "max_real_eig_B": float(np.max(np.linalg.eigvals(B).real)),
        }

    def to_bar(self, x, p):
        z = np.concatenate([x, p], axis=-1)
        zb = z @ self.T_inv.T
        return zb[..., : self.d], zb[..., self.d :]

    def from_bar(self, xbar, pbar):
        zb = np.concatenate([xbar, pbar], axis=-1)
        z = zb @ self.T.T
        return z[..., : self.d], z[..., self.d :]

    def to_dict(self) -> dict:
        eigs = np.linalg.eigvals(self.B)
        out = {name: getattr(self, name).tolist() for name in ("A", "Q", "R0", "P", "S", "B", "T", "T_inv")}
        order = np.lexsort((eigs.imag, eigs.real))
        out["eig_B"] = [[float(e.real), float(e.imag)] for e in eigs[order]]
        out["residuals"] = self.residuals()
        return out


def build_transform(prob: HjProblem) -> TransformData:
    A, Q, R0 = linearize(prob)
    P = solve_riccati(A, Q, R0)
    B = A - R0 @ P
    S = solve_lyapunov(B, R0)
    d = prob.d
    eye = np.eye(d)
    T = np.block([[eye, S], [P, P @ S + eye]])
    return TransformData(A=A, Q=Q, R0=R0, P=P, S=S, B=B, T=T, T_inv=np.linalg.inv(T))


@dataclass(frozen=True, eq=False)
class SeparatedSystem:
    """The Hamiltonian field in coordinates ``(xbar, pbar) = T^{-1}(x, p)``:

        xbar' =  B xbar    + n_s(xbar, pbar)
        pbar' = -B^T pbar  + n_u(xbar, pbar)
    """

    base: HjProblem
    transform: TransformData

    @classmethod
    def from_problem(cls, prob: HjProblem) -> "SeparatedSystem":
        return cls(base=prob, transform=build_transform(prob))

    @property
    def d(self):
        return self.base.d

    @property
    def B(self):
        return self.transform.B

    def nonlinear(self, xbar, pbar):
        tr = self.transform
        prob = self.base
        x, p = tr.from_bar(np.asarray(xbar, float), np.asarray(pbar, float))
        Jf = prob.jac_f(x)
        if prob.constant_R:
            # R(x) = R0 and the gradient of p^T R p in x vanishes
            top = prob.f(x) - x @ tr.A.T
            bottom = -np.einsum("...ji,...j->...i", Jf, p) + p @ tr.A - prob.grad_q(x) + x @ tr.Q.T
        else:
            Rp = np.einsum("...ij,...j->...i", prob.R(x), p)
            top = prob.f(x) - x @ tr.A.T - Rp + p @ tr.R0.T
            bottom = (-np.einsum("...ji,...j->...i", Jf, p) + p @ tr.A
                      + 0.5 * prob.quad_R_grad(x, p) - prob.grad_q(x) + x @ tr.Q.T)
        nb = np.concatenate([top, bottom], axis=-1) @ tr.T_inv.T
        return nb[..., : self.d], nb[..., self.d :]

    def field(self, xbar, pbar):
        """Full right-hand side in bar coordinates."""
        n_s, n_u = self.nonlinear(xbar, pbar)
        return xbar @ self.B.T + n_s, -pbar @ self.B + n_u


def separated_field(sep: SeparatedSystem, xbar, pbar):
    """Nonlinear remainders ``(n_s, n_u)`` at ``(xbar, pbar)``."""
    xbar = np.asarray(xbar, float)
    pbar = np.asarray(pbar, float)
    if xbar.shape[-1:] != (sep.d,) or pbar.shape != xbar.shape:
        raise UsageError(f"expected bar coordinates of dimension {sep.d}")
    return sep.nonlinear(xbar, pbar)
