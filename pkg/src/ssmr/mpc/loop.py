"""Receding-horizon closed loop around a full-order plant, references and logs."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..controllearn import SSMRModel
from ..plant import FirstOrderSystem, NonFiniteStateError, step_rk4
from .ocp import NoProgressError, OCPConfig, SCPFailure, discretize_dynamics, enforce_control_polytope, scp_solve
from .qp import InfeasibleError

Reference = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# references


def _plane(o: int, axes, center) -> tuple[int, int, np.ndarray]:
    a, b = axes
    if not (0 <= a < o and 0 <= b < o and a != b):
        raise ValueError(f"plane axes {axes} invalid for {o} performance outputs")
    c = np.zeros(o) if center is None else np.asarray(center, dtype=float).ravel()
    if c.shape[0] != o:
        raise ValueError("center has the wrong dimension")
    return a, b, c


def reference_figure_eight(amplitudes, period: float, axes=(0, 1), center=None, o: int = 2) -> Reference:
    """Lissajous figure eight: ``(A sin(wt), B sin(2wt))`` in the chosen plane.

    The returned callable maps times of shape ``(K,)`` to ``(K, o)`` samples
    (a scalar time gives ``(o,)``).
    """
    if period <= 0:
        raise ValueError("period must be positive")
    A, B = (float(v) for v in np.broadcast_to(np.asarray(amplitudes, dtype=float), (2,)))
    a, b, c = _plane(o, axes, center)
    w = 2 * math.pi / period

    def ref(t):
        t = np.asarray(t, dtype=float)
        out = np.broadcast_to(c, t.shape + (o,)).copy()
        out[..., a] += A * np.sin(w * t)
        out[..., b] += B * np.sin(2 * w * t)
        return out

    return ref


def reference_circle(radius: float, period: float, axes=(0, 1), center=None, o: int = 2) -> Reference:
    """``center + radius (sin(wt), cos(wt))`` in the chosen plane."""
    if period <= 0:
        raise ValueError("period must be positive")
    a, b, c = _plane(o, axes, center)
    w = 2 * math.pi / period

    def ref(t):
        t = np.asarray(t, dtype=float)
        out = np.broadcast_to(c, t.shape + (o,)).copy()
        out[..., a] += radius * np.sin(w * t)
        out[..., b] += radius * np.cos(w * t)
        return out

    return ref


def reference_constant(value) -> Reference:
    v = np.asarray(value, dtype=float).ravel()

    def ref(t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(v, t.shape + v.shape).copy()

    return ref


def dominant_period(model: SSMRModel) -> float:
    """Period of the slowest-decaying oscillatory pair of the learned linear part."""
    ev = model.dynamics.continuous_eigenvalues()
    osc = ev[np.abs(ev.imag) > 1e-9]
    if osc.size == 0:
        raise ValueError("learned linear part has no oscillatory eigenvalues")
    slow = osc[np.argmax(osc.real)]
    return float(2 * math.pi / abs(slow.imag))


# ---------------------------------------------------------------------------
# log


@dataclass
class ClosedLoopLog:
    """One row per solve, spaced by the control period ``N_r * dt``."""

    t: np.ndarray
    z: np.ndarray
    zbar: np.ndarray
    u: np.ndarray
    scp_iters: np.ndarray
    qp_ms: np.ndarray
    slack_max: np.ndarray
    x_reduced: np.ndarray | None = None
    predicted: list = field(default_factory=list)
    faults: int = 0
    max_state: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.t.shape[0]

    def check(self, period: float) -> None:
        if len(self) > 1 and np.max(np.abs(np.diff(self.t) - period)) > 1e-9:
            raise ValueError("log timestamps are not uniform at the control period")

    def to_csv(self) -> str:
        o, m = self.z.shape[1], self.u.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"z_{i + 1}" for i in range(o)] + [f"zbar_{i + 1}" for i in range(o)]
                   + [f"u_{i + 1}" for i in range(m)] + ["scp_iters", "qp_ms", "slack_max"])
        for k in range(len(self)):
            row = [self.t[k], *self.z[k], *self.zbar[k], *self.u[k]]
            w.writerow([f"{v:.12g}" for v in row] + [int(self.scp_iters[k]), f"{self.qp_ms[k]:.4f}", f"{self.slack_max[k]:.6g}"])
        return buf.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path: str | Path) -> "ClosedLoopLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        o = sum(1 for h in head if h.startswith("z_"))
        m = sum(1 for h in head if h.startswith("u_"))
        return cls(
            t=body[:, 0], z=body[:, 1 : 1 + o], zbar=body[:, 1 + o : 1 + 2 * o],
            u=body[:, 1 + 2 * o : 1 + 2 * o + m], scp_iters=body[:, -3].astype(int),
            qp_ms=body[:, -2], slack_max=body[:, -1],
        )

    def summary(self, transient: float = 0.0) -> dict:
        mse = tracking_mse(self, transient)
        ms = self.qp_ms
        return {
            "mse": mse["total"],
            "mse_axes": mse["axes"],
            "steps": len(self),
            "faults": self.faults,
            "max_abs_state": self.max_state,
            "scp_iters_mean": float(np.mean(self.scp_iters)) if len(self) else 0.0,
            "slack_max": float(np.max(self.slack_max, initial=0.0)),
            "qp_ms_mean": float(np.mean(ms)) if len(self) else 0.0,
            "qp_ms_p50": float(np.percentile(ms, 50)) if len(self) else 0.0,
            "qp_ms_p95": float(np.percentile(ms, 95)) if len(self) else 0.0,
            "qp_ms_total": float(np.sum(ms)),
            **self.meta,
        }


def tracking_mse(log: ClosedLoopLog, transient: float = 0.0) -> dict:
    """Mean of ``||z - zbar||^2`` over rows with ``t >= t_0 + transient``, plus per-axis means."""
    if len(log) == 0:
        raise ValueError("empty log")
    keep = log.t >= log.t[0] + transient - 1e-12
    if not np.any(keep):
        raise ValueError("transient window covers the whole log")
    e2 = (log.z[keep] - log.zbar[keep]) ** 2
    return {"total": float(np.mean(np.sum(e2, axis=1))), "axes": [float(v) for v in np.mean(e2, axis=0)]}


def write_summary(path: str | Path, summaries: dict) -> None:
    Path(path).write_text(json.dumps(summaries, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# loop


def _substeps(period: float, dt: float) -> int:
    k = int(round(period / dt))
    if k < 1 or abs(k * dt - period) > 1e-9 * period:
        raise ValueError(f"period {period} is not an integer multiple of the plant step {dt}")
    return k


class _Observer:
    """Raw plant observations, delay-embedded when the model asks for it."""

    def __init__(self, model: SSMRModel, observe, sample_period: float | None):
        self.model = model
        self.observe = observe
        emb = model.embedding
        self.delays = 0 if emb is None else emb.delays
        self.stride = 1 if emb is None else emb.stride
        self.sample_period = sample_period
        self.history: deque = deque(maxlen=self.delays * self.stride + 1)

    def record(self, state: np.ndarray) -> None:
        self.history.append(np.asarray(self.observe(state), dtype=float))

    def embedded(self) -> np.ndarray:
        cur = self.history[-1]
        if self.delays == 0:
            return cur
        parts = [cur]
        for d in range(1, self.delays + 1):
            # before enough history exists, pad with the oldest sample
            idx = max(len(self.history) - 1 - d * self.stride, 0)
            parts.append(self.history[idx])
        return np.concatenate(parts)


def run_receding_horizon(
    plant: FirstOrderSystem,
    model: SSMRModel,
    reference: Reference,
    config: OCPConfig,
    duration: float,
    x0: np.ndarray | None = None,
    plant_dt: float = 1e-3,
    observe: Callable[[np.ndarray], np.ndarray] | None = None,
    performance: Callable[[np.ndarray], np.ndarray] | None = None,
    sample_period: float | None = None,
    warm_start: bool = True,
    max_state: float = 1e6,
) -> ClosedLoopLog:
    """Closed loop: every ``N_r * dt`` observe, reduce, solve, apply ``N_r`` controls.

    ``observe`` maps a plant state to the raw observation (identity by
    default); ``performance`` maps a raw observation to the achieved ``z``
    (default ``C (y - y_eq) + z_eq``). With a delay embedding, raw
    observations are buffered every ``sample_period`` (the embedding's data
    rate, defaulting to ``plant_dt``). Two consecutive SCP failures count as
    a controller fault; the fault step applies zero control.
    """
    observe = observe or (lambda s: s)
    C, y_eq, z_eq = model.performance_selector, model.geometry.equilibrium, model.performance_equilibrium
    if performance is None:
        performance = lambda y: C @ (y[: C.shape[1]] - y_eq) + z_eq
    N, Nr, dt = config.horizon, config.rollout_horizon, config.dt
    Tc = Nr * dt
    per_dt = _substeps(dt, plant_dt)
    sp = plant_dt if sample_period is None else sample_period
    per_sample = _substeps(sp, plant_dt)
    if per_dt % per_sample:
        raise ValueError("the control step must be a multiple of the observation sample period")
    steps = int(np.floor(duration / Tc + 1e-9))
    m = model.m
    r_d = discretize_dynamics(model, dt)
    obs = _Observer(model, observe, sp)
    state = np.zeros(plant.state_dim) if x0 is None else np.asarray(x0, dtype=float).copy()
    obs.record(state)
    if obs.embedded().shape[0] != model.p:
        raise ValueError(f"observation dimension {obs.embedded().shape[0]} != model p = {model.p}")

    t_log, z_log, zb_log, u_log, it_log, ms_log, sl_log, x_log, pred = [], [], [], [], [], [], [], [], []
    faults, fail_streak, peak = 0, 0, 0.0
    errors: dict[str, int] = {}
    prev_u: np.ndarray | None = None
    t = 0.0
    for k in range(steps):
        t = k * Tc
        y = obs.embedded()
        x_init = model.reduce_observation(y)
        zbar = reference(t + dt * np.arange(N))
        ws = None
        if warm_start and prev_u is not None:
            ws = np.vstack([prev_u[Nr:], np.repeat(prev_u[-1:], min(Nr, N - 1), axis=0)])[: N - 1]
        res = None
        for attempt in (ws, None) if ws is not None else (None,):
            try:
                res = scp_solve(model, x_init, zbar, config, warm_start=attempt, r_d=r_d)
                break
            except (SCPFailure, NoProgressError, InfeasibleError, np.linalg.LinAlgError, FloatingPointError) as exc:
                key = f"{type(exc).__name__}: {exc}"
                errors[key] = errors.get(key, 0) + 1
                fail_streak += 1
        if res is None:
            if fail_streak >= 2:
                faults += 1
            controls = np.zeros((Nr, m))
            prev_u = None
            iters, qp_ms, slack = 0, 0.0, float("nan")
            pred.append(None)
        else:
            fail_streak = 0
            controls = res.controls[:Nr] if Nr <= N - 1 else np.vstack([res.controls, np.repeat(res.controls[-1:], Nr - N + 1, axis=0)])
            controls = enforce_control_polytope(controls, config.control_polytope)
            prev_u = res.controls
            iters, qp_ms, slack = res.iterations, 1e3 * res.qp_time, res.slack_max
            pred.append(res.states)
        t_log.append(t)
        z_log.append(performance(obs.history[-1]))
        zb_log.append(zbar[0])
        u_log.append(controls[0])
        it_log.append(iters)
        ms_log.append(qp_ms)
        sl_log.append(slack)
        x_log.append(x_init)
        # apply N_r controls under zero-order hold
        for j in range(Nr):
            u = controls[j]
            for s in range(per_dt):
                try:
                    state = step_rk4(plant, state, u, plant_dt)
                except NonFiniteStateError:
                    state = np.full_like(state, np.inf)
                    break
                if (s + 1) % per_sample == 0:
                    obs.record(state)
            peak = max(peak, float(np.max(np.abs(state))))
            if not np.all(np.isfinite(state)) or peak > max_state:
                break
        if not np.all(np.isfinite(state)) or peak > max_state:
            break
    log = ClosedLoopLog(
        t=np.array(t_log), z=np.array(z_log).reshape(-1, model.o), zbar=np.array(zb_log).reshape(-1, model.o),
        u=np.array(u_log).reshape(-1, m), scp_iters=np.array(it_log, dtype=int), qp_ms=np.array(ms_log),
        slack_max=np.array(sl_log), x_reduced=np.array(x_log), predicted=pred, faults=faults, max_state=peak,
        meta={"diverged": bool(not np.isfinite(peak) or peak > max_state), "solver_errors": errors},
    )
    log.check(Tc)
    return log


def run_zero_control(
    plant: FirstOrderSystem,
    reference: Reference,
    performance: Callable[[np.ndarray], np.ndarray],
    period: float,
    duration: float,
    x0: np.ndarray | None = None,
    plant_dt: float = 1e-3,
    m: int | None = None,
) -> ClosedLoopLog:
    """Open-loop baseline with ``u = 0``, logged on the same grid as the closed loop."""
    per = _substeps(period, plant_dt)
    steps = int(np.floor(duration / period + 1e-9))
    m = plant.inputs if m is None else m
    state = np.zeros(plant.state_dim) if x0 is None else np.asarray(x0, dtype=float).copy()
    ts, zs = [], []
    for k in range(steps):
        ts.append(k * period)
        zs.append(performance(state))
        for _ in range(per):
            state = step_rk4(plant, state, None, plant_dt)
    ts = np.array(ts)
    z = np.array(zs)
    return ClosedLoopLog(
        t=ts, z=z, zbar=reference(ts).reshape(z.shape), u=np.zeros((steps, m)),
        scp_iters=np.zeros(steps, dtype=int), qp_ms=np.zeros(steps), slack_max=np.zeros(steps),
        max_state=float(np.max(np.abs(state))),
    )
