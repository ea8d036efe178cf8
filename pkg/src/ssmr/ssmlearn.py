"""Manifold geometry and autonomous reduced dynamics from decay data.

The tangent basis comes from an SVD of equilibrium-shifted data (no mean
centering: the fixed point is the origin of the chart). Lift and vector field
are polynomial least-squares fits over the same feature machinery.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import subspace_angles

from .datapipe import Trajectory
from .polyfeatures import (
    MultiIndexBasis,
    evaluate_features,
    feature_jacobian,
    nonlinear_basis,
)

INVERTIBILITY_TOL = 1e-6
GRAM_COND_LIMIT = 1e12


class FitError(ValueError):
    """Regression cannot be carried out reliably (rank deficiency, ill conditioning)."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class SSMGeometry:
    """Chart ``x = V^T (y - y_eq)`` and lift ``y = y_eq + W0 x + W x^{2:n_w}``."""

    tangent_basis: np.ndarray
    linear_lift: np.ndarray
    nonlinear_lift: np.ndarray
    lift_basis: MultiIndexBasis
    equilibrium: np.ndarray

    @property
    def n(self) -> int:
        return self.tangent_basis.shape[1]

    @property
    def p(self) -> int:
        return self.tangent_basis.shape[0]

    @property
    def order(self) -> int:
        return 1 if self.lift_basis.is_empty else self.lift_basis.max_order

    def reduce(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.p:
            raise DimensionError(f"observation has {y.shape[0]} rows, expected {self.p}")
        eq = self.equilibrium if y.ndim == 1 else self.equilibrium[:, None]
        return self.tangent_basis.T @ (y - eq)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise DimensionError(f"reduced state has {x.shape[0]} rows, expected {self.n}")
        eq = self.equilibrium if x.ndim == 1 else self.equilibrium[:, None]
        out = self.linear_lift @ x + eq
        if not self.lift_basis.is_empty:
            out = out + self.nonlinear_lift @ evaluate_features(self.lift_basis, x)
        return out

    def lift_jacobian(self, x: np.ndarray) -> np.ndarray:
        """``dw/dx`` of shape ``(p, n)`` at a single reduced state."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionError(f"expected reduced state of shape ({self.n},)")
        if self.lift_basis.is_empty:
            return self.linear_lift.copy()
        return self.linear_lift + self.nonlinear_lift @ feature_jacobian(self.lift_basis, x)

    def invertibility_residuals(self) -> dict:
        n = self.n
        r0 = float(np.max(np.abs(self.tangent_basis.T @ self.linear_lift - np.eye(n))))
        r1 = float(np.max(np.abs(self.tangent_basis.T @ self.nonlinear_lift))) if self.nonlinear_lift.size else 0.0
        return {"VtW0_minus_I": r0, "VtW": r1, "flagged": bool(max(r0, r1) > INVERTIBILITY_TOL)}


@dataclass(frozen=True)
class ReducedDynamics:
    """``x' = R0 x + R x^{2:n_r}`` (continuous) or ``x+ = R0 x + R x^{2:n_r}`` (discrete, step ``dt``)."""

    linear_coeffs: np.ndarray
    nonlinear_coeffs: np.ndarray
    dynamics_basis: MultiIndexBasis
    time_semantics: str = "continuous"
    dt: float | None = None

    def __post_init__(self):
        if self.time_semantics not in ("continuous", "discrete"):
            raise ValueError(f"unknown time semantics {self.time_semantics!r}")
        if self.time_semantics == "discrete" and not self.dt:
            raise ValueError("discrete dynamics need a step dt")

    @property
    def n(self) -> int:
        return self.linear_coeffs.shape[0]

    @property
    def order(self) -> int:
        return 1 if self.dynamics_basis.is_empty else self.dynamics_basis.max_order

    @property
    def is_linear(self) -> bool:
        return self.dynamics_basis.is_empty or not np.any(self.nonlinear_coeffs)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise DimensionError(f"state has {x.shape[0]} rows, expected {self.n}")
        out = self.linear_coeffs @ x
        if not self.dynamics_basis.is_empty:
            out = out + self.nonlinear_coeffs @ evaluate_features(self.dynamics_basis, x)
        return out

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.dynamics_basis.is_empty:
            return self.linear_coeffs.copy()
        return self.linear_coeffs + self.nonlinear_coeffs @ feature_jacobian(self.dynamics_basis, x)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.linear_coeffs)

    def continuous_eigenvalues(self) -> np.ndarray:
        """Linear spectrum in continuous time (log of the discrete map when needed)."""
        ev = self.eigenvalues().astype(complex)
        if self.time_semantics == "discrete":
            return np.log(ev) / self.dt
        return ev

    def check_stability(self) -> bool:
        ok = bool(np.all(self.continuous_eigenvalues().real < 0))
        if not ok:
            warnings.warn("learned linear part has eigenvalues with non-negative real part", RuntimeWarning, stacklevel=2)
        return ok


def fit_pca(Y: np.ndarray, n: int, weights: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``n`` left singular vectors of ``Y`` and the normalized squared singular values.

    Each column is signed so its largest-magnitude entry is positive.
    Optional positive per-coordinate ``weights`` (e.g. to balance position and
    velocity blocks) select the directions on ``diag(weights) Y``; they are
    mapped back and re-orthonormalized so ``V`` stays a projection basis.
    Ratios then refer to the weighted data.
    """
    Y = np.asarray(Y, dtype=float)
    p, K = Y.shape
    if n > p:
        raise FitError(f"cannot extract {n} directions from {p}-dimensional data")
    if K < p:
        raise FitError(f"need at least {p} samples, got {K}")
    w = None
    if weights is not None:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape != (p,) or np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise FitError(f"PCA weights must be {p} positive finite numbers")
        Y = w[:, None] * Y
    U, s, _ = np.linalg.svd(Y, full_matrices=False)
    if s[0] == 0 or s[n - 1] / s[0] < 1e-12:
        raise FitError("rank-deficient data: leading singular values collapse")
    V = U[:, :n].copy() if w is None else np.linalg.qr(U[:, :n] / w[:, None])[0]
    for j in range(n):
        k = np.argmax(np.abs(V[:, j]))
        if V[k, j] < 0:
            V[:, j] = -V[:, j]
    ratios = s**2 / np.sum(s**2)
    return V, ratios


def feature_matrix(X: np.ndarray, basis: MultiIndexBasis) -> np.ndarray:
    """Stacked regressors ``[X; X^{a:b}]``."""
    if basis.is_empty:
        return np.asarray(X, dtype=float)
    return np.vstack([X, evaluate_features(basis, X)])


def gram_condition(Phi: np.ndarray) -> float:
    """Condition number of the column-equilibrated Gram matrix of the regressors."""
    G = Phi @ Phi.T
    d = np.sqrt(np.diag(G))
    if np.any(d == 0):
        return np.inf
    ev = np.linalg.eigvalsh(G / np.outer(d, d))
    return np.inf if ev[0] <= 0 else float(ev[-1] / ev[0])


def polynomial_regression(X: np.ndarray, T: np.ndarray, basis: MultiIndexBasis, ridge: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``T ~ C0 X + C X^{basis}``; returns ``(C0, C)``."""
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float)
    if X.shape[1] != T.shape[1]:
        raise DimensionError(f"{X.shape[1]} regressor columns vs {T.shape[1]} target columns")
    n = X.shape[0]
    Phi = feature_matrix(X, basis)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if not np.any(T):
        return np.zeros((T.shape[0], n)), np.zeros((T.shape[0], len(basis)))
    if ridge == 0:
        cond = gram_condition(Phi)
        if cond > GRAM_COND_LIMIT:
            raise FitError(f"ill-conditioned regression: Gram condition number {cond:.3g}")
        coef = np.linalg.lstsq(Phi.T, T.T, rcond=None)[0].T
    else:
        G = Phi @ Phi.T + ridge * np.eye(Phi.shape[0])
        coef = np.linalg.solve(G, Phi @ T.T).T
    return coef[:, :n], coef[:, n:]


def fit_geometry(
    Y: np.ndarray,
    X: np.ndarray,
    n_w: int,
    V: np.ndarray | None = None,
    equilibrium: np.ndarray | None = None,
    ridge: float = 0.0,
    enforce_invertibility: bool = False,
) -> SSMGeometry:
    """Polynomial lift minimizing ``||Y - W0 X - W X^{2:n_w}||_F``.

    ``V`` defaults to an orthonormal basis fitted by :func:`fit_pca` on ``Y``.
    With ``enforce_invertibility`` the coefficients are projected so that
    ``V^T W0 = I`` and ``V^T W = 0``.
    """
    if n_w < 1:
        raise ValueError("lift order must be >= 1")
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if V is None:
        V, _ = fit_pca(Y, n)
    basis = nonlinear_basis(n, n_w)
    W0, W = polynomial_regression(X, Y, basis, ridge)
    if enforce_invertibility:
        W0 = W0 + V @ (np.eye(n) - V.T @ W0)
        W = W - V @ (V.T @ W)
    eq = np.zeros(Y.shape[0]) if equilibrium is None else np.asarray(equilibrium, dtype=float)
    geo = SSMGeometry(V, W0, W, basis, eq)
    if geo.invertibility_residuals()["flagged"]:
        warnings.warn("invertibility residuals of the fitted lift exceed 1e-6", RuntimeWarning, stacklevel=2)
    return geo


def fit_reduced_dynamics(X: np.ndarray, Xdot: np.ndarray, n_r: int, ridge: float = 0.0) -> ReducedDynamics:
    basis = nonlinear_basis(np.asarray(X).shape[0], n_r)
    R0, R = polynomial_regression(X, Xdot, basis, ridge)
    return ReducedDynamics(R0, R, basis, "continuous")


def shift_pairs(X: np.ndarray, segments: list[tuple[int, int]] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(X_k, X_{k+1})`` column pairs that stay inside each segment."""
    X = np.asarray(X, dtype=float)
    if segments is None:
        segments = [(0, X.shape[1])]
    cur = [X[:, a : b - 1] for a, b in segments if b - a >= 2]
    nxt = [X[:, a + 1 : b] for a, b in segments if b - a >= 2]
    return np.hstack(cur), np.hstack(nxt)


def fit_discrete_dynamics(
    X: np.ndarray,
    n_r: int,
    dt: float,
    segments: list[tuple[int, int]] | None = None,
    ridge: float = 0.0,
) -> ReducedDynamics:
    """One-step map ``x+ = R0 x + R x^{2:n_r}`` from time-ordered columns."""
    Xk, Xk1 = shift_pairs(X, segments)
    basis = nonlinear_basis(Xk.shape[0], n_r)
    R0, R = polynomial_regression(Xk, Xk1, basis, ridge)
    return ReducedDynamics(R0, R, basis, "discrete", dt)


def rk4_flow(f, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def rollout_reduced(dynamics: ReducedDynamics, x0: np.ndarray, steps: int, h: float) -> np.ndarray:
    """Autonomous rollout; returns ``(n, steps + 1)`` including ``x0``."""
    out = np.empty((dynamics.n, steps + 1))
    out[:, 0] = x0
    x = np.asarray(x0, dtype=float)
    for k in range(steps):
        if dynamics.time_semantics == "discrete":
            x = dynamics(x)
        else:
            x = rk4_flow(dynamics, x, h)
        if not np.all(np.isfinite(x)):
            out[:, k + 1 :] = np.nan
            break
        out[:, k + 1] = x
    return out


@dataclass
class InvarianceReport:
    geometry_residuals: np.ndarray
    dynamics_residuals: np.ndarray

    @staticmethod
    def _summary(v: np.ndarray) -> dict:
        v = np.where(np.isfinite(v), v, np.inf)
        return {"median": float(np.median(v)), "p95": float(np.percentile(v, 95))}

    @property
    def geometry(self) -> dict:
        return self._summary(self.geometry_residuals)

    @property
    def dynamics(self) -> dict:
        return self._summary(self.dynamics_residuals)

    def to_dict(self) -> dict:
        return {"geometry": self.geometry, "dynamics": self.dynamics}


def invariance_error(geometry: SSMGeometry, dynamics: ReducedDynamics, trajs: list[Trajectory]) -> InvarianceReport:
    """Per-sample lift residual ``|y - w(v(y))| / |y|`` and reduced rollout error.

    Trajectories must be embedded exactly like the training data; the
    equilibrium shift is applied here. Rollout errors are normalized by the
    largest reduced-state norm of each trajectory. Discrete dynamics must be
    sampled at the data sample period.
    """
    geo_res, dyn_res = [], []
    for tr in trajs:
        Y = tr.observations.T
        Ys = Y - geometry.equilibrium[:, None]
        X = geometry.reduce(Y)
        rec = geometry.reconstruct(X) - geometry.equilibrium[:, None]
        norms = np.linalg.norm(Ys, axis=0)
        ok = norms > 0
        geo_res.append(np.linalg.norm(Ys - rec, axis=0)[ok] / norms[ok])
        h = tr.sample_period
        if dynamics.time_semantics == "discrete" and abs(dynamics.dt - h) > 1e-12:
            raise ValueError("discrete dynamics step differs from the data sample period")
        pred = rollout_reduced(dynamics, X[:, 0], X.shape[1] - 1, h)
        scale = np.max(np.linalg.norm(X, axis=0))
        err = np.linalg.norm(pred - X, axis=0) / (scale if scale > 0 else 1.0)
        dyn_res.append(err)
    return InvarianceReport(np.concatenate(geo_res), np.concatenate(dyn_res))


def principal_angles_deg(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Principal angles between ``span(A)`` and ``span(B)`` in degrees."""
    return np.degrees(subspace_angles(A, B))
