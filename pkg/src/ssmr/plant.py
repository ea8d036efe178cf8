"""Synthetic plants: a second-order mechanical chain and a benchmark system with a known slow manifold.

Every plant is realized as a :class:`FirstOrderSystem`
``xdot = A x + f_nl(x) + eps * B u`` and integrated with fixed-step RK4 so
datasets are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, optimize
from scipy.stats import special_ortho_group

from .datapipe import Trajectory
from .polyfeatures import (
    MultiIndexBasis,
    evaluate_features,
    feature_directional,
    nonlinear_basis,
)

DEFAULT_DT = 1e-4


class PlantError(ValueError):
    """Invalid plant definition (singular mass matrix, unstable linearization, spectral gap...)."""


class NonFiniteStateError(FloatingPointError):
    """Integration produced NaN/Inf, usually a blow-up or an oversized step."""


# ---------------------------------------------------------------------------
# second-order mechanical plant


@dataclass(frozen=True)
class MechanicalPlant:
    """``M q'' + C q' + K q + F_int(q) = H u`` with odd cubic spring forces.

    ``springs`` rows are ``(i, j, k3)``: a cubic spring with force
    ``k3 (q_i - q_j)^3`` between coordinates ``i`` and ``j`` (``j = -1`` grounds it).
    """

    mass: np.ndarray
    damping: np.ndarray
    stiffness: np.ndarray
    springs: np.ndarray
    input_map: np.ndarray
    rayleigh: tuple[float, float] | None = None

    def __post_init__(self):
        M, C, K, H = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (self.mass, self.damping, self.stiffness, self.input_map))
        S = np.asarray(self.springs, dtype=float).reshape(-1, 3)
        for name, val in (("mass", M), ("damping", C), ("stiffness", K), ("input_map", H), ("springs", S)):
            object.__setattr__(self, name, val)
        N = M.shape[0]
        if M.shape != (N, N) or C.shape != (N, N) or K.shape != (N, N) or H.shape[0] != N:
            raise PlantError("matrix dimensions disagree")
        if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) <= 0:
            raise PlantError("mass matrix must be symmetric positive definite")
        if not np.allclose(K, K.T) or np.min(np.linalg.eigvalsh(K)) < -1e-10 * max(1.0, np.abs(K).max()):
            raise PlantError("stiffness matrix must be symmetric positive semidefinite")
        if self.rayleigh is not None:
            a, b = self.rayleigh
            if not np.allclose(C, a * M + b * K):
                raise PlantError("damping does not match the recorded Rayleigh coefficients")

    @property
    def dof(self) -> int:
        return self.mass.shape[0]

    @property
    def inputs(self) -> int:
        return self.input_map.shape[1]

    def _stretch(self, q: np.ndarray) -> np.ndarray:
        i = self.springs[:, 0].astype(int)
        j = self.springs[:, 1].astype(int)
        qi = q[i]
        qj = np.where((j >= 0).reshape((-1,) + (1,) * (q.ndim - 1)), q[np.maximum(j, 0)], 0.0)
        return qi - qj

    def internal_force(self, q: np.ndarray) -> np.ndarray:
        """``F_int(q)``; accepts ``(N,)`` or a column batch ``(N, K)``."""
        q = np.asarray(q, dtype=float)
        F = np.zeros_like(q)
        if self.springs.shape[0] == 0:
            return F
        k3 = self.springs[:, 2].reshape((-1,) + (1,) * (q.ndim - 1))
        f = k3 * self._stretch(q) ** 3
        i = self.springs[:, 0].astype(int)
        j = self.springs[:, 1].astype(int)
        np.add.at(F, i, f)
        grounded = j >= 0
        np.add.at(F, j[grounded], -f[grounded])
        return F

    def potential(self, q: np.ndarray) -> float:
        if self.springs.shape[0] == 0:
            return 0.0
        return float(np.sum(self.springs[:, 2] * self._stretch(np.asarray(q, dtype=float)) ** 4) / 4.0)

    def energy(self, q: np.ndarray, qdot: np.ndarray) -> float:
        return float(0.5 * qdot @ self.mass @ qdot + 0.5 * q @ self.stiffness @ q + self.potential(q))


def chain_plant(
    dof: int = 10,
    mass: float = 1.0,
    stiffness: float = 100.0,
    alpha: float = 2.5,
    beta: float = 0.01,
    cubic: float = 50.0,
    inputs: tuple[int, ...] = (-1,),
) -> MechanicalPlant:
    """Fixed-free spring-mass chain with Rayleigh damping and cubic springs on every link.

    ``inputs`` lists the masses that receive an actuator force.
    """
    M = mass * np.eye(dof)
    K = np.zeros((dof, dof))
    links = [(0, -1)] + [(i, i - 1) for i in range(1, dof)]
    for i, j in links:
        K[i, i] += stiffness
        if j >= 0:
            K[j, j] += stiffness
            K[i, j] -= stiffness
            K[j, i] -= stiffness
    springs = np.array([(i, j, cubic) for i, j in links], dtype=float) if cubic else np.zeros((0, 3))
    H = np.zeros((dof, len(inputs)))
    for c, i in enumerate(inputs):
        H[i % dof, c] = 1.0
    return MechanicalPlant(M, alpha * M + beta * K, K, springs, H, rayleigh=(alpha, beta))


# ---------------------------------------------------------------------------
# first-order systems


@dataclass(frozen=True)
class FirstOrderSystem:
    """``xdot = A x + f_nl(x) + epsilon * B u``; ``f_nl`` maps column batches to column batches."""

    linear_part: np.ndarray
    nonlinear_part: Callable[[np.ndarray], np.ndarray]
    control_matrix: np.ndarray
    epsilon: float = 1.0

    @property
    def state_dim(self) -> int:
        return self.linear_part.shape[0]

    @property
    def inputs(self) -> int:
        return self.control_matrix.shape[1]

    def rhs(self, x: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        dx = self.linear_part @ x + self.nonlinear_part(x)
        if u is not None:
            u = np.asarray(u, dtype=float)
            bu = self.control_matrix @ u
            if x.ndim == 2 and bu.ndim == 1:
                bu = bu[:, None]
            dx = dx + self.epsilon * bu
        return dx

    def check_invariants(self, fd_step: float = 1e-6) -> dict:
        """Spectral abscissa of ``A`` and value/Jacobian of ``f_nl`` at the origin."""
        n = self.state_dim
        zero = np.zeros(n)
        f0 = self.nonlinear_part(zero)
        jac = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = fd_step
            jac[:, i] = (self.nonlinear_part(e) - self.nonlinear_part(-e)) / (2 * fd_step)
        return {
            "abscissa": float(np.max(np.linalg.eigvals(self.linear_part).real)),
            "fnl_at_zero": float(np.max(np.abs(f0))),
            "fnl_jacobian_at_zero": float(np.max(np.abs(jac))),
        }


def _check_stable(A: np.ndarray) -> None:
    ev = np.linalg.eigvals(A)
    if np.max(ev.real) >= 0:
        raise PlantError(f"unstable linearization: eigenvalue with real part {np.max(ev.real):.3g}")


def assemble_first_order(plant: MechanicalPlant, epsilon: float = 1.0) -> FirstOrderSystem:
    N = plant.dof
    try:
        Minv = linalg.inv(plant.mass)
    except linalg.LinAlgError as exc:
        raise PlantError("singular mass matrix") from exc
    A = np.block([[np.zeros((N, N)), np.eye(N)], [-Minv @ plant.stiffness, -Minv @ plant.damping]])
    _check_stable(A)
    B = np.vstack([np.zeros((N, plant.inputs)), Minv @ plant.input_map])

    def f_nl(x: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x, dtype=float)
        out[N:] = -Minv @ plant.internal_force(x[:N])
        return out

    return FirstOrderSystem(A, f_nl, B, epsilon)


def linear_system(A: np.ndarray, B: np.ndarray | None = None) -> FirstOrderSystem:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.zeros((A.shape[0], 1)) if B is None else np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    return FirstOrderSystem(A, lambda x: np.zeros_like(x, dtype=float), B)


# ---------------------------------------------------------------------------
# integration


def step_rk4(system: FirstOrderSystem, x: np.ndarray, u: np.ndarray | None, dt: float) -> np.ndarray:
    """One classical RK4 step with ``u`` held constant; ``x`` may be a column batch."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = system.rhs(x, u)
    k2 = system.rhs(x + 0.5 * dt * k1, u)
    k3 = system.rhs(x + 0.5 * dt * k2, u)
    k4 = system.rhs(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteStateError("non-finite state after RK4 step")
    return out


def _substeps(sample_period: float, dt: float) -> int:
    ratio = sample_period / dt
    k = int(round(ratio))
    if k < 1 or abs(k - ratio) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"sample period {sample_period} is not an integer multiple of dt {dt}")
    return k


def _sample_count(duration: float, sample_period: float) -> int:
    return int(np.floor(duration / sample_period + 1e-9)) + 1


def _rollout(system, X0, duration, sample_period, dt, control_at=None):
    """Integrate a batch of columns ``X0`` (n_f, B); ``control_at(k)`` gives the (m, B) input at sample ``k``."""
    sub = _substeps(sample_period, dt)
    N = _sample_count(duration, sample_period)
    out = np.empty((N,) + X0.shape)
    x = X0.astype(float).copy()
    out[0] = x
    for k in range(1, N):
        u = None if control_at is None else control_at(k - 1)
        for _ in range(sub):
            x = step_rk4(system, x, u, dt)
        out[k] = x
    return out


def simulate_decay(
    system: FirstOrderSystem,
    x0: np.ndarray,
    duration: float,
    sample_period: float,
    dt: float = DEFAULT_DT,
) -> Trajectory | list[Trajectory]:
    """Unforced rollout sampled every ``sample_period``.

    ``x0`` of shape ``(n_f,)`` returns one trajectory; ``(B, n_f)`` returns
    ``B`` trajectories integrated together.
    """
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    X0 = x0[:, None] if single else x0.T
    states = _rollout(system, X0, duration, sample_period, dt)
    t = sample_period * np.arange(states.shape[0])
    trajs = [Trajectory(t, states[:, :, b], kind="decay") for b in range(states.shape[2])]
    return trajs[0] if single else trajs


@dataclass(frozen=True)
class ControlSchedule:
    """Piecewise-constant inputs: ``values[k]`` is applied on ``[k*hold, (k+1)*hold)``."""

    hold_period: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v.reshape(v.shape[0], -1))

    @property
    def duration(self) -> float:
        return self.hold_period * self.values.shape[0]

    @property
    def inputs(self) -> int:
        return self.values.shape[1]

    def at(self, t: float | np.ndarray) -> np.ndarray:
        k = np.floor(np.asarray(t) / self.hold_period + 1e-9).astype(int)
        k = np.clip(k, 0, self.values.shape[0] - 1)
        return self.values[k]


def simulate_controlled(
    system: FirstOrderSystem,
    x0: np.ndarray,
    controls: ControlSchedule | list[ControlSchedule],
    dt: float = DEFAULT_DT,
    sample_period: float | None = None,
    duration: float | None = None,
) -> Trajectory | list[Trajectory]:
    """Zero-order-hold rollout; the recorded control at sample ``k`` is the one applied from ``t_k`` on.

    ``sample_period`` defaults to the hold period and must divide it.
    """
    scheds = controls if isinstance(controls, (list, tuple)) else [controls]
    x0 = np.asarray(x0, dtype=float)
    X0 = np.tile(x0[:, None], (1, len(scheds))) if x0.ndim == 1 else x0.T
    hold = scheds[0].hold_period
    if any(abs(s.hold_period - hold) > 1e-12 for s in scheds):
        raise ValueError("batched schedules must share the hold period")
    sp = hold if sample_period is None else sample_period
    per_hold = _substeps(hold, sp)
    T = min(s.duration for s in scheds) if duration is None else duration
    if T > min(s.duration for s in scheds) + 1e-12:
        raise ValueError("control schedule does not cover the rollout horizon")
    U = np.stack([s.values for s in scheds], axis=-1)  # (holds, m, B)

    def control_at(k):
        return U[min(k // per_hold, U.shape[0] - 1)]

    states = _rollout(system, X0, T, sp, dt, control_at)
    t = sp * np.arange(states.shape[0])
    trajs = []
    for b, s in enumerate(scheds):
        trajs.append(Trajectory(t, states[:, :, b], controls=s.at(t), kind="controlled", hold_period=hold))
    return trajs if isinstance(controls, (list, tuple)) else trajs[0]


def static_equilibrium(system: FirstOrderSystem, u: np.ndarray) -> np.ndarray:
    """Solve ``A x + f_nl(x) + eps B u = 0`` starting from the linear steady state."""
    u = np.asarray(u, dtype=float)
    guess = -np.linalg.solve(system.linear_part, system.epsilon * system.control_matrix @ u)
    sol = optimize.root(lambda x: system.rhs(x, u), guess, method="hybr", tol=1e-13)
    # hybr reports "no progress" once it stalls at rounding level; judge by the residual
    scale = 1.0 + np.max(np.abs(system.control_matrix @ u)) * abs(system.epsilon)
    if not sol.success and np.max(np.abs(system.rhs(sol.x, u))) > 1e-10 * scale:
        raise PlantError(f"static preload solve failed: {sol.message}")
    return sol.x


def sample_decay_initial_conditions(
    system: "FirstOrderSystem | GroundTruthPlant",
    count: int,
    amplitude: float,
    seed: int,
    mode: str = "auto",
    off_manifold: float = 0.0,
) -> list[np.ndarray]:
    """Displaced initial states for decay experiments, generated in antipodal pairs.

    ``mode="preload"`` holds a random constant input through ``B`` and takes
    the resulting static deflection (``amplitude`` bounds the input entries).
    ``mode="manifold"`` (benchmark plants only) places the reduced state on a
    sphere of radius ``amplitude`` and lifts it onto the known manifold, plus
    an optional transverse offset of relative size ``off_manifold``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    bench = system if isinstance(system, GroundTruthPlant) else None
    fo = bench.system if bench is not None else system
    if mode == "auto":
        mode = "manifold" if bench is not None else "preload"
    out: list[np.ndarray] = []
    while len(out) < count:
        if mode == "preload":
            u = rng.uniform(-amplitude, amplitude, fo.inputs)
            x = static_equilibrium(fo, u) if amplitude else np.zeros(fo.state_dim)
            xm = static_equilibrium(fo, -u) if amplitude else np.zeros(fo.state_dim)
        elif mode == "manifold":
            if bench is None:
                raise ValueError("manifold initial conditions need a benchmark plant")
            d = rng.normal(size=bench.reduced_dim)
            d *= amplitude / np.linalg.norm(d)
            off = rng.normal(size=bench.transverse_dim) * off_manifold * amplitude
            x = bench.full_state(d, bench.lift(d) + off)
            xm = bench.full_state(-d, bench.lift(-d) + off)
        else:
            raise ValueError(f"unknown initial-condition mode {mode!r}")
        out.append(x)
        if len(out) < count:
            out.append(xm)
    return out


# ---------------------------------------------------------------------------
# benchmark plant with a known invariant manifold


@dataclass(frozen=True)
class GroundTruthPlant:
    """Slow reduced system ``x' = R0 x + R x^{2:3} + Bx u`` and transverse state ``s``.

    ``s' = Lam (s - phi(x)) + Dphi(x) x' + Bs u`` with quadratic lift
    ``phi(x) = Ws x^{2:2}``, so the graph ``s = phi(x)`` is exactly invariant
    when ``u = 0``. Observed coordinates are ``y = Q [x; s]`` for a random
    rotation ``Q``. The reduced state is modal: pairs ``(q_i, p_i)`` with
    ``q_i' = w_i p_i``.
    """

    R0: np.ndarray
    R: np.ndarray
    dyn_basis: MultiIndexBasis
    Ws: np.ndarray
    lift_basis: MultiIndexBasis
    fast_decay: np.ndarray
    rotation: np.ndarray
    Bx: np.ndarray
    Bs: np.ndarray
    frequencies: np.ndarray
    decay_rates: np.ndarray
    system: FirstOrderSystem = field(repr=False)

    @property
    def reduced_dim(self) -> int:
        return self.R0.shape[0]

    @property
    def full_dim(self) -> int:
        return self.rotation.shape[0]

    @property
    def transverse_dim(self) -> int:
        return self.full_dim - self.reduced_dim

    @property
    def inputs(self) -> int:
        return self.Bx.shape[1]

    @property
    def tangent_basis(self) -> np.ndarray:
        return self.rotation[:, : self.reduced_dim]

    def reduced_rhs(self, x: np.ndarray) -> np.ndarray:
        return self.R0 @ x + self.R @ evaluate_features(self.dyn_basis, x)

    def lift(self, x: np.ndarray) -> np.ndarray:
        return self.Ws @ evaluate_features(self.lift_basis, x)

    def full_state(self, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        return self.rotation @ np.concatenate([x, s], axis=0)

    def split(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = self.rotation.T @ y
        return z[: self.reduced_dim], z[self.reduced_dim :]

    def manifold_residual(self, y: np.ndarray) -> np.ndarray:
        """``||s - phi(x)||`` for a state or a column batch."""
        x, s = self.split(y)
        return np.linalg.norm(s - self.lift(x), axis=0)

    def true_geometry(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(V*, W0*, W*)`` in observed coordinates, with ``W*`` over ``lift_basis``."""
        n = self.reduced_dim
        Q1, Q2 = self.rotation[:, :n], self.rotation[:, n:]
        return Q1, Q1, Q2 @ self.Ws

    def in_coordinates(self, V: np.ndarray, lift_order: int = 2, dyn_order: int = 3, seed: int = 0) -> dict:
        """True model re-expressed in the reduced coordinates ``xi = V^T y``.

        Valid when ``span(V)`` equals the true tangent space, which then makes
        ``xi = P^T x`` with ``P = Q1^T V``. Polynomial identities are
        recovered exactly by interpolation at random points.
        """
        n = self.reduced_dim
        Q1 = self.tangent_basis
        P = Q1.T @ V
        Pinv_T = np.linalg.inv(P.T)
        rng = np.random.default_rng(seed)
        dyn = nonlinear_basis(n, dyn_order)
        geo = nonlinear_basis(n, lift_order)
        Xi = rng.uniform(-1, 1, (n, 6 * (n + max(len(dyn), len(geo)))))
        Xx = Pinv_T @ Xi

        def interp(target, basis):
            Phi = np.vstack([Xi, evaluate_features(basis, Xi)])
            coef = np.linalg.lstsq(Phi.T, target.T, rcond=None)[0].T
            return coef[:, :n], coef[:, n:]

        R0, R = interp(P.T @ self.reduced_rhs(Xx), dyn)
        _, _, Wstar = self.true_geometry()
        Y = Q1 @ Xx + self.rotation[:, n:] @ self.lift(Xx)
        W0, W = interp(Y, geo)
        return {"R0": R0, "R": R, "W0": W0, "W": W, "B_r": P.T @ self.Bx, "P": P,
                "dyn_basis": dyn, "lift_basis": geo}


def build_benchmark_plant(
    n: int,
    n_f: int,
    seed: int,
    inputs: int = 2,
    freq_range: tuple[float, float] = (2 * np.pi * 3.0, 2 * np.pi * 6.0),
    decay_range: tuple[float, float] = (3.0, 5.0),
    gap_range: tuple[float, float] = (30.0, 60.0),
    nonlinearity: float = 0.5,
    lift_scale: float = 0.2,
    control_leak: float = 0.02,
    rotate: bool = True,
    min_gap: float = 5.0,
) -> GroundTruthPlant:
    """Random benchmark plant with an exactly invariant quadratic slow manifold.

    Each oscillatory pair has frequency in ``freq_range`` and decay rate in
    ``decay_range``; pairs interact through hardening cubic couplings
    ``nonlinearity * w_i w_j q_i q_j^2`` derived from a quartic potential.
    Transverse rates are ``gap_range`` times the fastest reduced decay rate.
    ``lift_scale * n`` is the RMS size of the quadratic graph coefficients
    over all transverse coordinates together.
    """
    if n < 2 or n % 2:
        raise PlantError("reduced dimension must be even and >= 2 (oscillatory pairs)")
    if n_f < 2 * n + 2:
        raise PlantError("full dimension must be at least 2n + 2")
    if inputs < 1:
        raise PlantError("need at least one input")
    rng = np.random.default_rng(seed)
    pairs = n // 2
    w = np.sort(rng.uniform(*freq_range, pairs))
    sig = rng.uniform(*decay_range, pairs)

    R0 = np.zeros((n, n))
    for i in range(pairs):
        R0[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = [[0.0, w[i]], [-w[i], -2.0 * sig[i]]]
    red_eigs = np.linalg.eigvals(R0)

    # V_nl = 1/4 sum kappa_ij q_i^2 q_j^2 with kappa symmetric >= 0; p_i' -= (1/w_i) dV/dq_i
    nu = rng.uniform(0.5, 1.0, (pairs, pairs)) * nonlinearity
    kappa = 0.5 * (nu + nu.T) * np.outer(w, w)
    dyn = nonlinear_basis(n, 3)
    R = np.zeros((n, len(dyn)))
    index = {e: j for j, e in enumerate(dyn.exponents)}
    for i in range(pairs):
        for j in range(pairs):
            e = [0] * n
            e[2 * i] += 1
            e[2 * j] += 2
            R[2 * i + 1, index[tuple(e)]] -= kappa[i, j] / w[i]

    n_s = n_f - n
    slowest_fast = np.max(np.abs(red_eigs.real))
    rates = rng.uniform(*gap_range, n_s) * slowest_fast
    if np.min(rates) < min_gap * slowest_fast:
        raise PlantError(f"spectral-gap violation: transverse rate {np.min(rates):.3g} < {min_gap}x {slowest_fast:.3g}")
    Lam = -np.sort(rates)

    geo = nonlinear_basis(n, 2)
    # quadratic monomials of a unit-size state shrink like 1/n; the factor n and the
    # 1/sqrt(n_s) row normalization keep the curvature comparable across (n, n_f)
    Ws = rng.normal(size=(n_s, len(geo))) * (lift_scale * n) / np.sqrt(n_s * len(geo))

    Bx = np.zeros((n, inputs))
    # orthonormal mixing keeps the static input-to-output gain well conditioned
    if pairs <= inputs:
        g = np.linalg.qr(rng.normal(size=(inputs, pairs)))[0].T
    else:
        g = np.linalg.qr(rng.normal(size=(pairs, inputs)))[0]
    for i in range(pairs):
        Bx[2 * i + 1] = w[i] * g[i]
    Bs = rng.normal(size=(n_s, inputs)) * control_leak * np.mean(w) / np.sqrt(n_s)

    Q = special_ortho_group.rvs(n_f, random_state=rng) if rotate else np.eye(n_f)
    Q1, Q2 = Q[:, :n], Q[:, n:]
    A = Q @ linalg.block_diag(R0, np.diag(Lam)) @ Q.T
    B = Q @ np.vstack([Bx, Bs])

    # only the coupling monomials are nonzero; evaluate those alone
    live = np.flatnonzero(np.any(R != 0, axis=0))
    dyn_live = MultiIndexBasis.from_list(n, [dyn.exponents[j] for j in live])
    R_live = R[:, live]

    def f_nl(y: np.ndarray) -> np.ndarray:
        x = Q1.T @ y
        vec = y.ndim == 1
        if vec:
            x = x[:, None]
        fx = R_live @ evaluate_features(dyn_live, x)
        xdot = R0 @ x + fx
        sdot_nl = -Lam[:, None] * (Ws @ evaluate_features(geo, x)) + Ws @ feature_directional(geo, x, xdot)
        out = Q1 @ fx + Q2 @ sdot_nl
        return out[:, 0] if vec else out

    system = FirstOrderSystem(A, f_nl, B, 1.0)
    _check_stable(A)
    return GroundTruthPlant(
        R0=R0, R=R, dyn_basis=dyn, Ws=Ws, lift_basis=geo, fast_decay=np.diag(Lam), rotation=Q,
        Bx=Bx, Bs=Bs, frequencies=w, decay_rates=sig, system=system,
    )
