import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import benchmark_data
from ssmr.datapipe import EmbeddingSpec, Trajectory, assemble_regression_data
from ssmr.polyfeatures import evaluate_features, nonlinear_basis
from ssmr.ssmlearn import (
    DimensionError,
    FitError,
    ReducedDynamics,
    fit_discrete_dynamics,
    fit_geometry,
    fit_pca,
    fit_reduced_dynamics,
    gram_condition,
    invariance_error,
    polynomial_regression,
    principal_angles_deg,
    rollout_reduced,
    shift_pairs,
)


def _orthonormal(rng, p, n):
    return np.linalg.qr(rng.normal(size=(p, n)))[0]


def test_pca_recovers_planted_subspace(rng):
    V = _orthonormal(rng, 8, 2)
    Y = V @ rng.normal(size=(2, 300)) + 1e-6 * rng.normal(size=(8, 300))
    W, ratios = fit_pca(Y, 2)
    assert np.max(principal_angles_deg(W, V)) < 1e-3
    assert ratios[:2].sum() > 0.999999
    np.testing.assert_allclose(W.T @ W, np.eye(2), atol=1e-12)
    # sign convention: largest entry of each direction is positive
    assert all(W[np.argmax(np.abs(W[:, j])), j] > 0 for j in range(2))


def test_weighted_pca(rng):
    # two clouds: coordinate 0 dominates unweighted, coordinate 1 after weighting
    Y = np.vstack([10.0 * rng.normal(size=400), rng.normal(size=400), 0.01 * rng.normal(size=400)])
    V, _ = fit_pca(Y, 1)
    assert abs(V[0, 0]) > 0.99
    Vw, ratios = fit_pca(Y, 1, weights=[0.01, 1.0, 1.0])
    assert abs(Vw[1, 0]) > 0.99 and Vw[1, 0] > 0
    np.testing.assert_allclose(Vw.T @ Vw, np.eye(1), atol=1e-12)
    # uniform weights change nothing but the ratio scale
    np.testing.assert_allclose(fit_pca(Y, 2, weights=np.full(3, 3.0))[0], fit_pca(Y, 2)[0], atol=1e-12)
    with pytest.raises(FitError):
        fit_pca(Y, 1, weights=[1.0, -1.0, 1.0])


def test_pca_errors(rng):
    with pytest.raises(FitError):
        fit_pca(rng.normal(size=(3, 10)), 4)
    with pytest.raises(FitError):
        fit_pca(rng.normal(size=(10, 5)), 2)
    Y = np.outer(rng.normal(size=6), rng.normal(size=40))
    with pytest.raises(FitError):
        fit_pca(Y, 2)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 3), order=st.integers(1, 3))
def test_regression_recovers_exact_polynomial(seed, n, order):
    r = np.random.default_rng(seed)
    basis = nonlinear_basis(n, order)
    C0, C = r.normal(size=(4, n)), r.normal(size=(4, len(basis)))
    X = r.uniform(-1, 1, (n, 200))
    T = C0 @ X + (C @ evaluate_features(basis, X) if len(basis) else 0)
    A0, A = polynomial_regression(X, T, basis)
    np.testing.assert_allclose(A0, C0, atol=1e-9)
    np.testing.assert_allclose(A, C, atol=1e-8)


def test_regression_guards(rng):
    basis = nonlinear_basis(2, 3)
    X = np.vstack([rng.normal(size=50), np.zeros(50)])
    with pytest.raises(FitError):
        polynomial_regression(X, rng.normal(size=(3, 50)), basis)
    assert gram_condition(X) == np.inf
    # ridge makes the same problem solvable
    polynomial_regression(X, rng.normal(size=(3, 50)), basis, ridge=1e-6)
    with pytest.raises(DimensionError):
        polynomial_regression(rng.normal(size=(2, 5)), rng.normal(size=(2, 6)), basis)
    with pytest.raises(ValueError):
        polynomial_regression(rng.normal(size=(2, 50)), rng.normal(size=(2, 50)), basis, ridge=-1)


def test_zero_targets_give_zero_coefficients(rng):
    C0, C = polynomial_regression(rng.normal(size=(2, 30)), np.zeros((5, 30)), nonlinear_basis(2, 3))
    assert not np.any(C0) and not np.any(C)


def test_geometry_on_exact_quadratic_graph(rng):
    p, n = 6, 2
    V = _orthonormal(rng, p, n)
    Nrm = np.linalg.qr(np.hstack([V, rng.normal(size=(p, p - n))]))[0][:, n:]
    basis = nonlinear_basis(n, 2)
    Wn = Nrm @ rng.normal(size=(p - n, len(basis))) * 0.3
    X = rng.uniform(-1, 1, (n, 400))
    Y = V @ X + Wn @ evaluate_features(basis, X)
    geo = fit_geometry(Y, V.T @ Y, 2, V=V, equilibrium=np.full(p, 2.0))
    np.testing.assert_allclose(geo.linear_lift, V, atol=1e-10)
    np.testing.assert_allclose(geo.nonlinear_lift, Wn, atol=1e-10)
    x = np.array([0.3, -0.4])
    y = geo.reconstruct(x)
    np.testing.assert_allclose(geo.reduce(y), x, atol=1e-12)
    h = 1e-6
    fd = np.column_stack([(geo.reconstruct(x + h * e) - geo.reconstruct(x - h * e)) / (2 * h) for e in np.eye(n)])
    np.testing.assert_allclose(geo.lift_jacobian(x), fd, rtol=1e-6, atol=1e-9)
    inv = geo.invertibility_residuals()
    assert inv["flagged"] == 0 and inv["VtW0_minus_I"] < 1e-10
    with pytest.raises(DimensionError):
        geo.reduce(np.zeros(p + 1))


def test_invertibility_projection(rng):
    p, n = 5, 2
    V = _orthonormal(rng, p, n)
    X = rng.uniform(-1, 1, (n, 200))
    # a lift whose nonlinear part leaks into span(V) violates V^T W = 0
    Y = V @ X + V @ (0.5 * X**2) + rng.normal(size=(p, 1)) * X[:1] ** 3
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        raw = fit_geometry(Y, X, 3, V=V)
    assert raw.invertibility_residuals()["flagged"]
    fixed = fit_geometry(Y, X, 3, V=V, enforce_invertibility=True)
    res = fixed.invertibility_residuals()
    assert res["VtW0_minus_I"] < 1e-12 and res["VtW"] < 1e-12


def test_continuous_dynamics_from_exact_derivatives(rng):
    basis = nonlinear_basis(2, 3)
    R0 = np.array([[0.0, 1.0], [-4.0, -0.2]])
    R = rng.normal(size=(2, len(basis))) * 0.1
    X = rng.uniform(-1, 1, (2, 300))
    Xdot = R0 @ X + R @ evaluate_features(basis, X)
    dyn = fit_reduced_dynamics(X, Xdot, 3)
    np.testing.assert_allclose(dyn.linear_coeffs, R0, atol=1e-10)
    np.testing.assert_allclose(dyn.nonlinear_coeffs, R, atol=1e-10)
    x = np.array([0.2, -0.7])
    h = 1e-6
    fd = np.column_stack([(dyn(x + h * e) - dyn(x - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(dyn.jacobian(x), fd, rtol=1e-7, atol=1e-9)
    assert dyn.check_stability()


def test_discrete_dynamics_and_segment_pairs():
    A = np.array([[0.9, 0.1], [-0.1, 0.9]])
    X = np.empty((2, 20))
    X[:, 0] = [1.0, 0.0]
    for k in range(9):
        X[:, k + 1] = A @ X[:, k]
    X[:, 10] = [0.0, 1.0]
    for k in range(10, 19):
        X[:, k + 1] = A @ X[:, k]
    Xk, Xk1 = shift_pairs(X, [(0, 10), (10, 20)])
    assert Xk.shape == (2, 18)
    dyn = fit_discrete_dynamics(X, 1, dt=0.1, segments=[(0, 10), (10, 20)])
    np.testing.assert_allclose(dyn.linear_coeffs, A, atol=1e-12)
    ev = dyn.continuous_eigenvalues()
    np.testing.assert_allclose(np.sort_complex(np.exp(ev * 0.1)), np.sort_complex(np.linalg.eigvals(A)), atol=1e-12)
    with pytest.raises(ValueError):
        ReducedDynamics(A, np.zeros((2, 0)), nonlinear_basis(2, 1), "discrete")


def test_unstable_linear_part_warns():
    dyn = ReducedDynamics(np.array([[0.1]]), np.zeros((1, 0)), nonlinear_basis(1, 1))
    with pytest.warns(RuntimeWarning):
        assert not dyn.check_stability()


def test_rollout_marks_blowup_as_nan():
    dyn = ReducedDynamics(np.zeros((1, 1)), np.array([[1.0]]), nonlinear_basis(1, 2))
    with np.errstate(over="ignore", invalid="ignore"):
        out = rollout_reduced(dyn, np.array([10.0]), 50, 0.5)
    assert np.isnan(out[0, -1]) and out[0, 0] == 10.0


def test_benchmark_recovery_small():
    d = benchmark_data(2, 6, 3)
    spec = EmbeddingSpec(0, 6)
    data = assemble_regression_data(d.decay, spec, d.equilibrium)
    V, ratios = fit_pca(data.Y, 2)
    assert ratios[:2].sum() > 0.95
    assert np.max(principal_angles_deg(V, d.plant.tangent_basis)) < 2.0
    X = V.T @ data.Y
    dyn = fit_reduced_dynamics(X, V.T @ data.Ydot, 3)
    truth = d.plant.in_coordinates(V, 3, 3)
    assert np.linalg.norm(dyn.linear_coeffs - truth["R0"]) / np.linalg.norm(truth["R0"]) < 0.01
    assert np.linalg.norm(dyn.nonlinear_coeffs - truth["R"]) / np.linalg.norm(truth["R"]) < 0.01


def test_invariance_error_small_for_cubic_and_larger_for_linear():
    d = benchmark_data(2, 6, 3)
    spec = EmbeddingSpec(0, 6)
    train, held = d.decay[:-4], d.decay[-4:]
    data = assemble_regression_data(train, spec, d.equilibrium)
    V, _ = fit_pca(data.Y, 2)
    X = V.T @ data.Y
    reports = {}
    for order in (1, 3):
        geo = fit_geometry(data.Y, X, order, V=V, equilibrium=d.equilibrium)
        dyn = fit_reduced_dynamics(X, V.T @ data.Ydot, order)
        reports[order] = invariance_error(geo, dyn, held)
    assert reports[3].geometry["median"] < 1e-3 and reports[3].dynamics["median"] < 1e-3
    assert reports[3].geometry["median"] <= reports[1].geometry["median"]
    assert reports[3].dynamics["median"] <= reports[1].dynamics["median"]


def test_invariance_error_rejects_mismatched_discrete_step():
    dyn = ReducedDynamics(np.eye(1), np.zeros((1, 0)), nonlinear_basis(1, 1), "discrete", 0.5)
    geo = fit_geometry(np.vstack([np.linspace(1, 2, 10)]), np.vstack([np.linspace(1, 2, 10)]), 1, V=np.eye(1))
    tr = Trajectory(0.1 * np.arange(10), np.linspace(1, 2, 10))
    with pytest.raises(ValueError):
        invariance_error(geo, dyn, [tr])
