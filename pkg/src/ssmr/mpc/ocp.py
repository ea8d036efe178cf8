"""Reduced optimal control: RK4 discretization, linearization, LOCP assembly and SCP.

The decision vector of every LOCP is ``[x_1..x_N, u_1..u_{N-1}, sigma_2..sigma_N]``
where ``sigma_k`` are the nonnegative slacks softening the performance polytope
(the measured first node carries no slack).
Dynamics equalities stay hard; trust regions are infinity-norm boxes on state
deviations from the nominal trajectory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..controllearn import SSMRModel
from .qp import INFEASIBLE, OPTIMAL, InfeasibleError, QPProblem, solve_qp


class ConfigError(ValueError):
    pass


class NoProgressError(RuntimeError):
    """Trust region collapsed without an acceptable step."""


class SCPFailure(RuntimeError):
    """The QP subproblem could not be solved to optimality."""


@dataclass(frozen=True)
class TrustRegion:
    initial: float | None = None
    shrink: float = 0.5
    grow: float = 2.0
    accept: float = 0.1
    minimum: float = 1e-10
    maximum: float = 1e6


@dataclass(frozen=True)
class OCPConfig:
    Q: np.ndarray
    R: np.ndarray
    horizon: int
    dt: float
    Q_f: np.ndarray | None = None
    rollout_horizon: int = 1
    control_polytope: tuple[np.ndarray, np.ndarray] | None = None
    performance_polytope: tuple[np.ndarray, np.ndarray] | None = None
    soft_penalty: float | None = None
    trust_region: TrustRegion = field(default_factory=TrustRegion)
    scp_tolerance: float = 1e-4
    scp_max_iters: int = 20

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        Qf = Q if self.Q_f is None else np.atleast_2d(np.asarray(self.Q_f, dtype=float))
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Q_f", Qf)
        for name, M, lo in (("Q", Q, -1e-10), ("Q_f", Qf, -1e-10), ("R", R, 1e-8)):
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
                raise ConfigError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(M)) < lo:
                raise ConfigError(f"{name} is not {'positive definite' if name == 'R' else 'PSD'}")
        if Qf.shape != Q.shape:
            raise ConfigError("Q_f and Q shapes differ")
        if self.horizon < 2:
            raise ConfigError("horizon must be >= 2")
        if not 1 <= self.rollout_horizon <= self.horizon:
            raise ConfigError("need 1 <= rollout_horizon <= horizon")
        if self.dt <= 0 or self.scp_tolerance <= 0:
            raise ConfigError("dt and scp_tolerance must be positive")
        for name in ("control_polytope", "performance_polytope"):
            poly = getattr(self, name)
            if poly is not None:
                M, b = poly
                M = np.atleast_2d(np.asarray(M, dtype=float))
                b = np.asarray(b, dtype=float).ravel()
                if M.shape[0] != b.shape[0]:
                    raise ConfigError(f"{name}: {M.shape[0]} rows vs {b.shape[0]} bounds")
                object.__setattr__(self, name, (M, b))
        if self.soft_penalty is None:
            object.__setattr__(self, "soft_penalty", 1e4 * float(np.max(np.linalg.eigvalsh(Q))))
        if self.soft_penalty <= 0:
            raise ConfigError("soft penalty must be positive")

    @property
    def control_period(self) -> float:
        return self.rollout_horizon * self.dt


def box_polytope(low, high) -> tuple[np.ndarray, np.ndarray]:
    """``low <= v <= high`` as ``(M, b)``; infinite bounds are dropped."""
    low = np.asarray(low, dtype=float).ravel()
    high = np.asarray(high, dtype=float).ravel()
    d = low.shape[0]
    rows, rhs = [], []
    for i in range(d):
        if np.isfinite(high[i]):
            e = np.zeros(d)
            e[i] = 1.0
            rows.append(e)
            rhs.append(high[i])
        if np.isfinite(low[i]):
            e = np.zeros(d)
            e[i] = -1.0
            rows.append(e)
            rhs.append(-low[i])
    return np.array(rows).reshape(-1, d), np.array(rhs)


# ---------------------------------------------------------------------------
# discretization


class DiscreteModel:
    """``x+ = r_d(x, u)``: one RK4 step of the learned vector field under zero-order hold.

    Jacobians are propagated through the four stages by the chain rule.
    Discrete-time learned models pass through unchanged.
    """

    def __init__(self, model: SSMRModel, dt: float):
        if dt <= 0:
            raise ConfigError("dt must be positive")
        self.model = model
        self.dt = dt
        self.passthrough = model.dynamics.time_semantics == "discrete"
        if self.passthrough and abs(model.dynamics.dt - dt) > 1e-12:
            raise ConfigError(f"discrete model step {model.dynamics.dt} differs from dt {dt}")

    @property
    def is_affine(self) -> bool:
        return self.model.is_affine

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        f, h = self.model.rhs, self.dt
        if self.passthrough:
            return f(x, u)
        k1 = f(x, u)
        k2 = f(x + 0.5 * h * k1, u)
        k3 = f(x + 0.5 * h * k2, u)
        k4 = f(x + h * k3, u)
        return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def step_with_jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(r_d(x,u), dr_d/dx, dr_d/du)``."""
        m = self.model
        B = m.control_matrix
        if self.passthrough:
            return m.rhs(x, u), m.jacobian_x(x), B.copy()
        h = self.dt
        I = np.eye(m.n)
        x1 = x
        k1 = m.rhs(x1, u)
        J1 = m.jacobian_x(x1)
        dk1x, dk1u = J1, B
        x2 = x + 0.5 * h * k1
        k2 = m.rhs(x2, u)
        J2 = m.jacobian_x(x2)
        dk2x = J2 @ (I + 0.5 * h * dk1x)
        dk2u = J2 @ (0.5 * h * dk1u) + B
        x3 = x + 0.5 * h * k2
        k3 = m.rhs(x3, u)
        J3 = m.jacobian_x(x3)
        dk3x = J3 @ (I + 0.5 * h * dk2x)
        dk3u = J3 @ (0.5 * h * dk2u) + B
        x4 = x + h * k3
        k4 = m.rhs(x4, u)
        J4 = m.jacobian_x(x4)
        dk4x = J4 @ (I + h * dk3x)
        dk4u = J4 @ (h * dk3u) + B
        xn = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        Ax = I + (h / 6.0) * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)
        Bu = (h / 6.0) * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)
        return xn, Ax, Bu

    def rollout(self, x0: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """States ``x_1..x_N`` (rows) from ``x_1 = x0`` under ``N - 1`` controls."""
        xs = [np.asarray(x0, dtype=float)]
        for u in controls:
            xs.append(self(xs[-1], u))
        return np.array(xs)


def discretize_dynamics(model: SSMRModel, dt: float) -> DiscreteModel:
    return DiscreteModel(model, dt)


# ---------------------------------------------------------------------------
# linearization


@dataclass(frozen=True)
class LinearizedStep:
    """``x_{k+1} ~ A x + B u + d`` and ``z ~ H x + c`` around ``(x_k, u_k)``.

    ``B`` is the input Jacobian of the discretized dynamics; ``A``, ``B`` and
    ``d`` are ``None`` for the terminal node, which has no outgoing transition.
    """

    H: np.ndarray
    c: np.ndarray
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    d: np.ndarray | None = None


def linearize(model: SSMRModel, r_d: DiscreteModel, x_k: np.ndarray, u_k: np.ndarray | None) -> LinearizedStep:
    x_k = np.asarray(x_k, dtype=float)
    H = model.performance_jacobian(x_k)
    c = model.performance(x_k) - H @ x_k
    if u_k is None:
        return LinearizedStep(H=H, c=c)
    u_k = np.asarray(u_k, dtype=float)
    xn, A, B = r_d.step_with_jacobians(x_k, u_k)
    d = xn - A @ x_k - B @ u_k
    return LinearizedStep(H=H, c=c, A=A, B=B, d=d)


# ---------------------------------------------------------------------------
# LOCP


def _check_control_polytope(config: OCPConfig, m: int) -> None:
    """A zero-cost feasibility probe of ``M_u u <= b_u``."""
    if config.control_polytope is None:
        return
    Mu, bu = config.control_polytope
    if Mu.shape[1] != m:
        raise ConfigError(f"control polytope has {Mu.shape[1]} columns, expected {m}")
    if np.all(bu >= 0):
        return
    probe = solve_qp(QPProblem(np.zeros((m, m)), np.zeros(m), G=Mu, h=bu))
    if probe.status == INFEASIBLE:
        raise InfeasibleError("control polytope is empty")


def _interior_point(Mu: np.ndarray, bu: np.ndarray) -> np.ndarray:
    """Point maximizing the normalized margin to every face of ``M_u u <= b_u`` (margin capped at 1)."""
    m = Mu.shape[1]
    norms = np.linalg.norm(Mu, axis=1)
    G = np.vstack([np.hstack([Mu, norms[:, None]]), np.eye(1, m + 1, m)])
    q = np.zeros(m + 1)
    q[-1] = -1.0
    res = solve_qp(QPProblem(1e-9 * np.eye(m + 1), q, G=G, h=np.concatenate([bu, [1.0]])))
    if res.status != OPTIMAL or res.x[-1] <= 0:
        raise InfeasibleError("control polytope has no interior")
    return res.x[:m]


def enforce_control_polytope(U: np.ndarray, polytope: tuple[np.ndarray, np.ndarray] | None) -> np.ndarray:
    """Make controls satisfy ``M_u u <= b_u`` exactly in floating point.

    Interior-point solutions can sit a rounding error outside an active
    face. Single-variable rows are clipped; any remaining violation is
    removed by pulling ``u`` toward an interior point.
    """
    U = np.array(U, dtype=float, copy=True)
    if polytope is None:
        return U
    Mu, bu = polytope
    single = np.count_nonzero(Mu, axis=1) == 1
    for i in np.flatnonzero(single):
        j = int(np.flatnonzero(Mu[i])[0])
        lim = bu[i] / Mu[i, j]
        U[..., j] = np.minimum(U[..., j], lim) if Mu[i, j] > 0 else np.maximum(U[..., j], lim)
    flat = U.reshape(-1, Mu.shape[1])
    bad = np.flatnonzero(np.any(flat @ Mu.T > bu, axis=1))
    if bad.size:
        c = _interior_point(Mu, bu)
        for k in bad:
            d = flat[k] - c
            rate = Mu @ d
            up = rate > 0
            theta = float(np.clip(np.min((bu[up] - Mu[up] @ c) / rate[up], initial=1.0), 0.0, 1.0))
            for _ in range(64):
                v = c + theta * d
                # margin covers any summation order used to re-check the product
                tol = 8 * np.finfo(float).eps * (np.abs(Mu) @ np.abs(v) + np.abs(bu))
                if not np.any(Mu @ v > bu - tol):
                    break
                theta *= 1 - 1e-12 if theta > 0.999 else 0.5
            else:
                theta = 0.0
            flat[k] = c + theta * d
    return flat.reshape(U.shape)


def build_locp(
    model: SSMRModel,
    steps: list[LinearizedStep],
    x_init: np.ndarray,
    reference: np.ndarray,
    config: OCPConfig,
    trust_radius: float | None,
    nominal: np.ndarray | None = None,
    constraint_shift: np.ndarray | None = None,
) -> QPProblem:
    """Convex QP for one SCP iteration.

    ``steps`` has ``N`` entries (the last without dynamics), ``reference``
    is ``(N, o)``, ``nominal`` the ``(N, n)`` state trajectory the trust
    region is centred on. ``trust_radius=None`` disables the trust region.
    ``constraint_shift`` (``(N, o)``) offsets the linearized performance
    output inside the polytope rows only; it carries second-order corrections.
    """
    N = config.horizon
    n, m, o = model.n, model.m, model.o
    reference = np.asarray(reference, dtype=float).reshape(N, o)
    if len(steps) != N:
        raise ConfigError(f"expected {N} linearized steps, got {len(steps)}")
    _check_control_polytope(config, m)
    perf = config.performance_polytope
    nz = 0 if perf is None else perf[0].shape[0]
    nx, nu = N * n, (N - 1) * m
    nv = nx + nu + (N - 1) * nz
    xi = lambda k: slice(k * n, (k + 1) * n)
    ui = lambda k: slice(nx + k * m, nx + (k + 1) * m)
    # x_1 is the measured state and cannot be influenced, so slacks start at k = 2
    si = lambda k: slice(nx + nu + (k - 1) * nz, nx + nu + k * nz)

    P = np.zeros((nv, nv))
    q = np.zeros(nv)
    const = 0.0
    for k in range(N):
        W = config.Q_f if k == N - 1 else config.Q
        H, c = steps[k].H, steps[k].c
        e = c - reference[k]
        P[xi(k), xi(k)] += 2.0 * H.T @ W @ H
        q[xi(k)] += 2.0 * H.T @ W @ e
        const += float(e @ W @ e)
        if k < N - 1:
            P[ui(k), ui(k)] += 2.0 * config.R
        if nz and k > 0:
            q[si(k)] = config.soft_penalty

    A_rows, b_rows = [], []
    row = np.zeros((n, nv))
    row[:, xi(0)] = np.eye(n)
    A_rows.append(row)
    b_rows.append(np.asarray(x_init, dtype=float))
    for k in range(N - 1):
        st = steps[k]
        row = np.zeros((n, nv))
        row[:, xi(k + 1)] = np.eye(n)
        row[:, xi(k)] = -st.A
        row[:, ui(k)] = -st.B
        A_rows.append(row)
        b_rows.append(st.d)

    G_rows, h_rows = [], []
    if config.control_polytope is not None:
        Mu, bu = config.control_polytope
        for k in range(N - 1):
            g = np.zeros((Mu.shape[0], nv))
            g[:, ui(k)] = Mu
            G_rows.append(g)
            h_rows.append(bu)
    if nz:
        Mz, bz = perf
        for k in range(1, N):
            g = np.zeros((nz, nv))
            g[:, xi(k)] = Mz @ steps[k].H
            g[:, si(k)] = -np.eye(nz)
            G_rows.append(g)
            c = steps[k].c if constraint_shift is None else steps[k].c + constraint_shift[k]
            h_rows.append(bz - Mz @ c)
            g = np.zeros((nz, nv))
            g[:, si(k)] = -np.eye(nz)
            G_rows.append(g)
            h_rows.append(np.zeros(nz))
    if trust_radius is not None and np.isfinite(trust_radius):
        if nominal is None:
            raise ConfigError("trust region needs a nominal trajectory")
        for k in range(1, N):
            for sign in (1.0, -1.0):
                g = np.zeros((n, nv))
                g[:, xi(k)] = sign * np.eye(n)
                G_rows.append(g)
                h_rows.append(trust_radius + sign * nominal[k])

    layout = {"N": N, "n": n, "m": m, "nz": nz, "nx": nx, "nu": nu}
    return QPProblem(
        P, q,
        np.vstack(A_rows), np.concatenate(b_rows),
        np.vstack(G_rows) if G_rows else None,
        np.concatenate(h_rows) if h_rows else None,
        constant=const,
        layout=layout,
    )


def unpack(prob: QPProblem, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    L = prob.layout
    N, n, m, nz, nx, nu = L["N"], L["n"], L["m"], L["nz"], L["nx"], L["nu"]
    return v[:nx].reshape(N, n), v[nx : nx + nu].reshape(N - 1, m), v[nx + nu :].reshape(N - 1, nz)


# ---------------------------------------------------------------------------
# SCP


@dataclass
class SCPResult:
    states: np.ndarray
    controls: np.ndarray
    cost: float
    iterations: int
    converged: bool
    cost_trace: list[float]
    qp_time: float
    slack_max: float
    trust_radius: float | None
    # per iteration: (accepted, ratio, radius used, step 2-norm)
    history: list = field(default_factory=list)


def true_cost(model: SSMRModel, states: np.ndarray, controls: np.ndarray, reference: np.ndarray, config: OCPConfig) -> float:
    """Nonlinear objective with the exact performance map and the l1 soft-constraint penalty."""
    N = states.shape[0]
    z = model.performance(states.T).T
    e = z - reference
    J = 0.0
    for k in range(N):
        W = config.Q_f if k == N - 1 else config.Q
        J += float(e[k] @ W @ e[k])
        if k < N - 1:
            J += float(controls[k] @ config.R @ controls[k])
    if config.performance_polytope is not None:
        Mz, bz = config.performance_polytope
        J += config.soft_penalty * float(np.sum(np.maximum(0.0, z[1:] @ Mz.T - bz)))
    return J


def _safe_cost(model, states, controls, reference, config) -> float:
    if not np.all(np.isfinite(states)):
        return np.inf
    return true_cost(model, states, controls, reference, config)


def default_trust_radius(model: SSMRModel) -> float:
    """10% of the reduced-state amplitude seen in training (1.0 when unknown)."""
    amp = float(model.provenance.get("reduced_amplitude", 1.0) or 1.0)
    return 0.1 * amp


def scp_solve(
    model: SSMRModel,
    x_init: np.ndarray,
    reference: np.ndarray,
    config: OCPConfig,
    warm_start: np.ndarray | None = None,
    r_d: DiscreteModel | None = None,
) -> SCPResult:
    """Sequential convex programming with trust regions.

    A step is accepted when the achieved decrease of the nonlinear cost is at
    least ``accept`` times the decrease predicted by the LOCP. Accepted
    iterates are always dynamically feasible rollouts, so the accepted-cost
    trace is non-increasing.
    """
    N = config.horizon
    r_d = r_d or discretize_dynamics(model, config.dt)
    x_init = np.asarray(x_init, dtype=float)
    reference = np.asarray(reference, dtype=float).reshape(N, model.o)
    if warm_start is not None:
        u_nom = np.asarray(warm_start, dtype=float).reshape(N - 1, model.m)
    else:
        u_nom = np.zeros((N - 1, model.m))
    x_nom = r_d.rollout(x_init, u_nom)
    if not np.all(np.isfinite(x_nom)):
        u_nom = np.zeros((N - 1, model.m))
        x_nom = r_d.rollout(x_init, u_nom)
    J_nom = true_cost(model, x_nom, u_nom, reference, config)
    tr = config.trust_region
    affine = r_d.is_affine
    radius = None if affine else (tr.initial if tr.initial is not None else default_trust_radius(model))
    trace = [J_nom]
    qp_time = 0.0
    slack_max = 0.0
    converged = False
    history: list = []
    it = 0
    while it < config.scp_max_iters:
        it += 1
        steps = [linearize(model, r_d, x_nom[k], u_nom[k] if k < N - 1 else None) for k in range(N)]
        prob = build_locp(model, steps, x_init, reference, config, radius, x_nom)
        t0 = time.perf_counter()
        res = solve_qp(prob)
        qp_time += time.perf_counter() - t0
        if res.status != OPTIMAL:
            raise SCPFailure(f"LOCP solve ended with status {res.status}")
        x_c, u_c, sl = unpack(prob, res.x)
        pred_red = J_nom - res.objective
        if pred_red <= 1e-12 * max(1.0, abs(J_nom)):
            converged = True
            slack_max = float(np.max(sl, initial=0.0))
            break
        x_roll = r_d.rollout(x_init, u_c)
        J_c = _safe_cost(model, x_roll, u_c, reference, config)
        ratio = (J_nom - J_c) / pred_red
        if ratio < tr.accept and config.performance_polytope is not None and np.isfinite(J_c):
            # second-order correction: the curvature of z pushed the rollout over a
            # constraint the linearization respected; re-solve with the true offset
            shift = model.performance(x_roll.T).T - np.array([st.H @ xr + st.c for st, xr in zip(steps, x_roll)])
            prob2 = build_locp(model, steps, x_init, reference, config, radius, x_nom, constraint_shift=shift)
            t0 = time.perf_counter()
            res2 = solve_qp(prob2)
            qp_time += time.perf_counter() - t0
            if res2.status == OPTIMAL:
                x2, u2, sl2 = unpack(prob2, res2.x)
                x_roll2 = r_d.rollout(x_init, u2)
                J2 = _safe_cost(model, x_roll2, u2, reference, config)
                ratio2 = (J_nom - J2) / pred_red
                if ratio2 >= tr.accept:
                    x_c, u_c, sl, x_roll, J_c, ratio = x2, u2, sl2, x_roll2, J2, ratio2
        step = float(np.linalg.norm(x_c - x_nom))
        history.append((bool(ratio >= tr.accept), float(ratio), radius, step))
        if ratio >= tr.accept:
            active = radius is not None and np.max(np.abs(x_c - x_nom)) >= radius * (1 - 1e-6)
            x_nom, u_nom, J_nom = x_roll, u_c, J_c
            trace.append(J_nom)
            slack_max = float(np.max(sl, initial=0.0))
            if radius is not None and ratio > 0.75 and active:
                radius = min(radius * tr.grow, tr.maximum)
            if step < config.scp_tolerance or (affine and not active):
                converged = True
                break
        else:
            if radius is None:
                # affine models cannot disagree with their own linearization
                raise SCPFailure("step rejected on an affine model")
            # shrink relative to the rejected step so an inactive box still bites
            radius = tr.shrink * min(radius, float(np.max(np.abs(x_c - x_nom))))
            if radius < tr.minimum:
                raise NoProgressError("trust region underflow without an accepted step")
            if len(trace) > 1 and radius * np.sqrt(x_nom.size) < config.scp_tolerance:
                # every step the box still admits would pass the convergence test
                converged = True
                break
    return SCPResult(
        states=x_nom,
        controls=u_nom,
        cost=J_nom,
        iterations=it,
        converged=converged,
        cost_trace=trace,
        qp_time=qp_time,
        slack_max=slack_max,
        trust_radius=radius,
        history=history,
    )
