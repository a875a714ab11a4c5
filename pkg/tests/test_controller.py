import warnings

import numpy as np
import pytest
from sklearn.base import clone

from hjmanifold.controller import (
    PolynomialController,
    closed_loop_simulate,
    controller,
    design_matrix,
    draw_samples,
    fit_costate,
    fit_polynomial,
    lstsq_qr,
    simulate_many,
    tensor_exponents,
    with_hamiltonian,
)
from hjmanifold.estimator import PolynomialCostateRegressor, StableManifoldController
from hjmanifold.exceptions import NumericalError, UsageError
from hjmanifold.extension import extend_manifold, project_domain
from hjmanifold.integrators import IntegratorConfig
from hjmanifold.linear import build_transform
from hjmanifold.picard import GridConfig, build_local_manifold, sample_sphere


@pytest.fixture(scope="module")
def exp2d_manifold(exp2d, exp2d_sep, exp2d_cert):
    xis = sample_sphere(16, 0.12, 2, np.random.default_rng(7))
    local = build_local_manifold(exp2d_sep, xis, 3, GridConfig(), exp2d_cert)
    return extend_manifold(exp2d, local, IntegratorConfig(h=-0.005), -3.5)


@pytest.fixture(scope="module")
def exp2d_samples(exp2d_manifold):
    return draw_samples(exp2d_manifold, 10, (-3.5, 0.0), seed=11)


@pytest.fixture(scope="module")
def exp2d_ctrl(exp2d_samples):
    return fit_polynomial(exp2d_samples, 5, True)


@pytest.fixture(scope="module")
def plane(lqr2d):
    P = build_transform(lqr2d).P
    x = np.random.default_rng(5).uniform(-3, 3, (200, 2))
    return x, x @ P.T, P


def test_term_counts():
    assert tensor_exponents(2, 5).shape == (36, 2)
    assert tensor_exponents(2, 5, constrain_origin=True).shape == (35, 2)
    # row-major: x1 power outer, x2 power inner
    np.testing.assert_array_equal(tensor_exponents(2, 1), [[0, 0], [0, 1], [1, 0], [1, 1]])


def test_design_matrix_monomials():
    V = design_matrix(np.array([[2.0, 3.0]]), tensor_exponents(2, 2))
    np.testing.assert_allclose(V[0], [1, 3, 9, 2, 6, 18, 4, 12, 36])


@pytest.mark.parametrize("constrain", [True, False])
def test_plane_recovers_P(plane, constrain):
    x, p, P = plane
    ctrl = fit_costate(x, p, 5, constrain)
    assert ctrl.n_terms == (35 if constrain else 36)
    np.testing.assert_allclose(ctrl.linear_part(), P, atol=1e-8)
    others = [row for row, e in enumerate(ctrl.exponents) if e.sum() != 1]
    assert np.max(np.abs(ctrl.coef[others])) <= 1e-8


def test_closed_loop_matrix(plane, lqr2d):
    x, p, P = plane
    ctrl = fit_costate(x, p, 5, True)
    A = lqr2d.jac_f(np.zeros((1, 2)))[0]
    R = lqr2d.R(np.zeros((1, 2)))[0]
    np.testing.assert_allclose(A - R @ ctrl.linear_part(), A - R @ P, atol=1e-6)


def test_lqr_feedback_is_minus_Px(plane, lqr2d_control):
    x, p, P = plane
    ctrl = fit_costate(x, p, 5, True)
    u = controller(ctrl, lqr2d_control, x)
    np.testing.assert_allclose(u, -x @ P.T, atol=1e-7)


def test_rank_deficient_named():
    x = np.zeros((50, 2))
    with pytest.raises(NumericalError, match="rank-deficient"):
        fit_costate(x, np.zeros((50, 2)), 5, False)
    # samples on a line: x2 = x1 makes mixed terms dependent
    t = np.linspace(-1, 1, 60)
    with pytest.raises(NumericalError, match="dependent terms"):
        fit_costate(np.column_stack([t, t]), np.column_stack([t, t]), 2, True)


def test_too_few_samples():
    with pytest.raises(UsageError):
        fit_costate(np.ones((10, 2)), np.ones((10, 2)), 5, True)


def test_lstsq_matches_numpy(rng):
    V = rng.standard_normal((80, 12))
    Y = rng.standard_normal((80, 2))
    np.testing.assert_allclose(lstsq_qr(V, Y), np.linalg.lstsq(V, Y, rcond=None)[0], atol=1e-12)


def test_least_squares_optimality(exp2d_samples, exp2d_ctrl):
    V = design_matrix(exp2d_samples.x, exp2d_ctrl.exponents)
    Y = exp2d_samples.p

    def objective(C):
        return np.sum((V @ C - Y) ** 2)

    base = objective(exp2d_ctrl.coef)
    for idx in np.ndindex(exp2d_ctrl.coef.shape):
        for s in (1e-6, -1e-6):
            C = exp2d_ctrl.coef.copy()
            C[idx] += s
            assert objective(C) >= base * (1 - 1e-12)


def test_samples_layout(exp2d_manifold, exp2d_samples, exp2d):
    n = len(exp2d_manifold.curves)
    assert len(exp2d_samples) == 10 * n + 1
    assert exp2d_samples.curve[-1] == -1 and np.all(exp2d_samples.x[-1] == 0)
    assert np.all(np.abs(exp2d_samples.H) <= 1e-4)
    np.testing.assert_array_equal(with_hamiltonian(exp2d_samples, exp2d).H, exp2d_samples.H)
    for i in range(n):
        t = exp2d_samples.t[exp2d_samples.curve == i]
        assert t[0] == exp2d_manifold.curves[i].t[exp2d_manifold.curves[i].t >= -3.5].min()
        assert np.all((t >= t[0]) & (t <= 0.0))


def test_samples_endpoints_only(exp2d_manifold):
    s = draw_samples(exp2d_manifold, 1, (-3.5, 0.0), seed=0)
    assert len(s) == len(exp2d_manifold.curves) + 1


def test_samples_deterministic(exp2d_manifold):
    a = draw_samples(exp2d_manifold, 10, (-3.5, 0.0), seed=3)
    b = draw_samples(exp2d_manifold, 10, (-3.5, 0.0), seed=3)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.p, b.p)


def test_samples_bad_input(exp2d_manifold):
    with pytest.raises(UsageError):
        draw_samples(exp2d_manifold, 0)
    with pytest.raises(UsageError):
        draw_samples(exp2d_manifold, 5, (0.0, -1.0))


def test_fit_reproducible(exp2d_samples, exp2d_ctrl):
    again = fit_polynomial(exp2d_samples, 5, True)
    np.testing.assert_array_equal(again.coef, exp2d_ctrl.coef)


def test_origin_maps_to_zero(exp2d_ctrl, exp2d_control):
    assert np.all(exp2d_ctrl.costate(np.zeros(2)) == 0.0)
    assert np.all(controller(exp2d_ctrl, exp2d_control, np.zeros(2)) == 0.0)


def test_unconstrained_constant_term(exp2d_samples):
    ctrl = fit_polynomial(exp2d_samples, 5, False)
    np.testing.assert_array_equal(ctrl.costate(np.zeros(2)), ctrl.coef[0])


def test_exp2d_feedback_is_minus_costate(exp2d_ctrl, exp2d_control):
    x = np.array([[4.0, 3.6], [0.3, -0.2]])
    u = controller(exp2d_ctrl, exp2d_control, x)
    assert np.all(np.isfinite(u))
    np.testing.assert_allclose(u, -exp2d_ctrl.costate(x), atol=1e-15)


def test_controller_warns_outside_domain(exp2d_ctrl, exp2d_control, exp2d_manifold):
    dom = project_domain(exp2d_manifold)
    with pytest.warns(RuntimeWarning):
        controller(exp2d_ctrl, exp2d_control, np.array([[50.0, 50.0]]), dom)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        controller(exp2d_ctrl, exp2d_control, np.zeros((1, 2)), dom)


def test_dict_round_trip(exp2d_ctrl):
    back = PolynomialController.from_dict(exp2d_ctrl.to_dict())
    np.testing.assert_array_equal(back.coef, exp2d_ctrl.coef)
    np.testing.assert_array_equal(back.exponents, exp2d_ctrl.exponents)
    d = exp2d_ctrl.to_dict()
    assert d["degree"] == 5 and len(d["components"]) == 2
    assert np.asarray(d["components"][0]["C"]).shape == (6, 6)


def test_origin_is_equilibrium(exp2d_ctrl, exp2d_control):
    res = closed_loop_simulate(exp2d_control, exp2d_ctrl, np.zeros(2), 2.0)
    assert res.status == "completed" and np.all(res.x == 0.0)


def test_lqr_closed_loop_converges(plane, lqr2d_control):
    x, p, P = plane
    ctrl = fit_costate(x, p, 5, True)
    res = closed_loop_simulate(lqr2d_control, ctrl, np.array([1.0, -0.5]), 10.0)
    assert res.status == "completed" and res.settles_below(1e-3)
    assert res.u.shape == (len(res.t), 2)


def test_divergence_reported(exp2d_control):
    exps = tensor_exponents(2, 1, True)
    coef = np.zeros((3, 2))
    coef[1, 0] = coef[0, 1] = -5.0  # p = -5 x, so u = +5 x pushes the state out
    bad = PolynomialController(1, exps, coef, True)
    res = closed_loop_simulate(exp2d_control, bad, np.array([1.0, 1.0]), 10.0)
    assert res.status == "diverged" and not res.settles_below(0.05)


def test_simulate_many_threads(plane, lqr2d_control):
    x, p, P = plane
    ctrl = fit_costate(x, p, 5, True)
    X0 = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5]])
    serial = simulate_many(lqr2d_control, ctrl, X0, 3.0)
    threaded = simulate_many(lqr2d_control, ctrl, X0, 3.0, threads=3)
    for a, b in zip(serial, threaded):
        np.testing.assert_array_equal(a.x, b.x)


def test_simulate_bad_x0(exp2d_ctrl, exp2d_control):
    with pytest.raises(UsageError):
        closed_loop_simulate(exp2d_control, exp2d_ctrl, np.zeros(3))


# -- scikit-learn wrappers --------------------------------------------------------


def test_regressor_params_and_clone(plane):
    est = PolynomialCostateRegressor(degree=3, constrain_origin=False)
    assert est.get_params() == {"degree": 3, "constrain_origin": False}
    twin = clone(est).set_params(degree=5)
    assert twin.degree == 5 and est.degree == 3


def test_regressor_fit_predict(plane):
    x, p, P = plane
    est = PolynomialCostateRegressor().fit(x, p)
    np.testing.assert_allclose(est.predict(x), p, atol=1e-8)
    assert est.score(x, p) == pytest.approx(1.0)
    single = PolynomialCostateRegressor().fit(x, p[:, 0])
    assert single.predict(x[:3]).shape == (3,)
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 3)))


def test_manifold_controller_estimator():
    est = StableManifoldController(n_xi=12, step=-0.01, t_min=-3.0, random_state=1)
    assert clone(est).get_params()["n_xi"] == 12
    est.fit()
    u = est.predict(np.array([[0.0, 0.0], [1.0, -0.5]]))
    assert u.shape == (2, 2) and np.all(u[0] == 0.0) and np.all(np.isfinite(u))
    np.testing.assert_allclose(est.costate([[1.0, -0.5]]), -u[1:], atol=1e-15)
    assert est.domain_.area > 0
    with pytest.raises(UsageError):
        StableManifoldController(step=0.01).fit()
