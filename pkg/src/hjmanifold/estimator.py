"""scikit-learn style wrappers around the fitting pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .controller import controller, draw_samples, fit_costate
from .exceptions import UsageError
from .extension import extend_manifold, project_domain
from .integrators import IntegratorConfig
from .linear import SeparatedSystem
from .picard import GridConfig, build_local_manifold, certify, sample_sphere
from .problems import get_control_problem


class PolynomialCostateRegressor(RegressorMixin, BaseEstimator):
    """Tensor-product polynomial regression ``x -> p``.

    Parameters
    ----------
    degree : int
        Maximal power per variable.
    constrain_origin : bool
        Drop the constant term so that the prediction at 0 is exactly 0.
    """

    def __init__(self, degree=5, constrain_origin=True):
        self.degree = degree
        self.constrain_origin = constrain_origin

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self._single_output = y.ndim == 1
        self.polynomial_ = fit_costate(X, y.reshape(len(X), -1), self.degree, self.constrain_origin)
        self.n_features_in_ = X.shape[1]
        self.coef_ = self.polynomial_.coef.T
        return self

    def predict(self, X):
        check_is_fitted(self, "polynomial_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        out = self.polynomial_.costate(X)
        return out[:, 0] if self._single_output else out


class StableManifoldController(BaseEstimator):
    """End-to-end synthesis: local manifold by iteration, backward extension by
    Stormer-Verlet, sampling and polynomial fit of the costate.

    ``fit`` takes no data; the problem is named by ``problem``. After fitting,
    ``predict(X)`` returns the feedback ``u(x)`` and ``costate(X)`` the fitted
    ``p_pol(x)``.
    """

    def __init__(self, problem="exp2d", k=3, n_xi=200, radius=0.12, t_min=-3.5, step=-1e-3,
                 delta=1e-4, degree=5, per_curve=10, constrain_origin=True, threads=1,
                 random_state=0):
        self.problem = problem
        self.k = k
        self.n_xi = n_xi
        self.radius = radius
        self.t_min = t_min
        self.step = step
        self.delta = delta
        self.degree = degree
        self.per_curve = per_curve
        self.constrain_origin = constrain_origin
        self.threads = threads
        self.random_state = random_state

    def _validate(self):
        if self.k < 0 or self.n_xi < 1 or self.per_curve < 1:
            raise UsageError("k >= 0, n_xi >= 1 and per_curve >= 1 are required")
        if self.step >= 0 or self.t_min > 0:
            raise UsageError("step must be negative and t_min <= 0")

    def fit(self, X=None, y=None):
        self._validate()
        cp = get_control_problem(self.problem)
        prob = cp.base
        sep = SeparatedSystem.from_problem(prob)
        if prob.lipschitz is None or prob.decay is None:
            raise UsageError(f"problem {self.problem!r} carries no certificate data")
        a, b = prob.decay
        cert = certify(a, b, prob.lipschitz, None, self.radius)
        rng = np.random.default_rng(self.random_state)
        xis = sample_sphere(self.n_xi, self.radius, prob.d, rng)
        local = build_local_manifold(sep, xis, self.k, GridConfig(), cert, threads=self.threads)
        config = IntegratorConfig(h=self.step, ham_check_delta=self.delta)
        manifold = extend_manifold(prob, local, config, self.t_min, threads=self.threads)
        samples = draw_samples(manifold, self.per_curve, (self.t_min, 0.0), rng)
        self.control_problem_ = cp
        self.certificate_ = cert
        self.manifold_ = manifold
        self.samples_ = samples
        self.domain_ = project_domain(manifold) if prob.d == 2 else None
        self.regressor_ = PolynomialCostateRegressor(self.degree, self.constrain_origin).fit(samples.x, samples.p)
        self.polynomial_ = self.regressor_.polynomial_
        self.n_features_in_ = prob.d
        return self

    def costate(self, X):
        check_is_fitted(self, "polynomial_")
        return self.regressor_.predict(X)

    def predict(self, X):
        check_is_fitted(self, "polynomial_")
        X = check_array(X)
        return controller(self.polynomial_, self.control_problem_, X)
