"""Control matrix regression on reduced coordinates and the assembled controlled model.

The learned model is ``x' = R0 x + R x^{2:n_r} + B_r u`` with performance
output ``z = C w(x) + z_eq``. Its JSON document is the single artifact handed
from fitting to control.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datapipe import EmbeddingSpec
from .plant import ControlSchedule
from .polyfeatures import MultiIndexBasis
from .ssmlearn import DimensionError, ReducedDynamics, SSMGeometry

EXCITATION_COND_LIMIT = 1e10


class ExcitationError(ValueError):
    """Controls are not exciting enough to identify ``B_r``."""


def random_control_sequence(
    m: int,
    duration: float,
    hold_period: float,
    bounds,
    seed: int,
    plant_dt: float | None = None,
) -> ControlSchedule:
    """Uniform random piecewise-constant inputs within ``bounds = (low, high)``."""
    if plant_dt is not None:
        ratio = hold_period / plant_dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError("hold period must be an integer multiple of the plant step")
    low, high = (np.broadcast_to(np.asarray(b, dtype=float), (m,)) for b in bounds)
    if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high))) or np.any(high < low):
        raise ValueError("control bounds must be finite with low <= high")
    holds = int(np.ceil(duration / hold_period - 1e-9))
    rng = np.random.default_rng(seed)
    return ControlSchedule(hold_period, rng.uniform(low, high, size=(holds, m)))


@dataclass
class ControlFit:
    B_r: np.ndarray
    residual_before: float
    residual_after: float


def fit_control_matrix(
    X_u: np.ndarray,
    Xdot_u: np.ndarray,
    U: np.ndarray,
    dynamics: ReducedDynamics,
) -> ControlFit:
    """Least squares ``B_r = argmin ||Xdot_u - r_aut(X_u) - B_r U||_F``.

    For discrete-time dynamics ``Xdot_u`` holds the successor states and the
    regression explains the one-step residual instead.
    """
    X_u = np.asarray(X_u, dtype=float)
    Xdot_u = np.asarray(Xdot_u, dtype=float)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if not (X_u.shape[1] == Xdot_u.shape[1] == U.shape[1]):
        raise DimensionError("X_u, Xdot_u and U must have the same column count")
    G = U @ U.T
    ev = np.linalg.eigvalsh(G)
    if ev[0] <= 0 or ev[-1] / ev[0] > EXCITATION_COND_LIMIT:
        raise ExcitationError("rank-deficient excitation: U U^T is (nearly) singular")
    resid = Xdot_u - dynamics(X_u)
    B = np.linalg.solve(G, U @ resid.T).T
    return ControlFit(
        B_r=B,
        residual_before=float(np.linalg.norm(resid)),
        residual_after=float(np.linalg.norm(resid - B @ U)),
    )


def _num(a) -> list:
    """Nested lists with values rounded to 15 significant digits."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 0:
        return float(f"{float(arr):.15g}")
    return [_num(v) for v in arr]


@dataclass(frozen=True)
class SSMRModel:
    geometry: SSMGeometry
    dynamics: ReducedDynamics
    control_matrix: np.ndarray
    performance_selector: np.ndarray
    performance_equilibrium: np.ndarray
    embedding: EmbeddingSpec | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.dynamics.n

    @property
    def m(self) -> int:
        return self.control_matrix.shape[1]

    @property
    def o(self) -> int:
        return self.performance_selector.shape[0]

    @property
    def p(self) -> int:
        return self.geometry.p

    @property
    def is_affine(self) -> bool:
        """True when both the vector field and the performance map are affine in ``x``."""
        return self.dynamics.is_linear and (self.geometry.lift_basis.is_empty or not np.any(self.geometry.nonlinear_lift))

    def autonomous(self, x: np.ndarray) -> np.ndarray:
        return self.dynamics(x)

    def rhs(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """``r(x, u)``; ``u = 0`` reproduces the autonomous field exactly."""
        u = np.asarray(u, dtype=float)
        out = self.dynamics(x)
        if np.any(u):
            bu = self.control_matrix @ u
            out = out + (bu if out.ndim == bu.ndim else bu[:, None])
        return out

    def jacobian_x(self, x: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        return self.dynamics.jacobian(x)

    def jacobian_u(self, x: np.ndarray | None = None, u: np.ndarray | None = None) -> np.ndarray:
        return self.control_matrix

    def performance(self, x: np.ndarray) -> np.ndarray:
        """``z = C w(x) + z_eq`` where ``w`` already includes ``y_eq``."""
        C = self.performance_selector
        y = self.geometry.reconstruct(x)
        zeq = self.performance_equilibrium
        shift = C @ self.geometry.equilibrium
        if y.ndim == 2:
            return C @ y - shift[:, None] + zeq[:, None]
        return C @ y - shift + zeq

    def performance_jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.performance_selector @ self.geometry.lift_jacobian(x)

    def reduce_observation(self, y: np.ndarray) -> np.ndarray:
        return self.geometry.reduce(y)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        g, d = self.geometry, self.dynamics
        return {
            "format": "ssmr-model/1",
            "n": self.n,
            "p": self.p,
            "m": self.m,
            "o": self.o,
            "n_w": g.order,
            "n_r": d.order,
            "time_semantics": d.time_semantics,
            "dt": d.dt,
            "embedding": None if self.embedding is None else self.embedding.to_dict(),
            "y_eq": _num(g.equilibrium),
            "z_eq": _num(self.performance_equilibrium),
            "lift_exponents": g.lift_basis.to_list(),
            "dynamics_exponents": d.dynamics_basis.to_list(),
            "V": _num(g.tangent_basis),
            "W0": _num(g.linear_lift),
            "W": _num(g.nonlinear_lift),
            "R0": _num(d.linear_coeffs),
            "R": _num(d.nonlinear_coeffs),
            "B_r": _num(self.control_matrix),
            "C": _num(self.performance_selector),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SSMRModel":
        n, p = int(doc["n"]), int(doc["p"])

        def mat(key, rows, cols):
            return np.asarray(doc[key], dtype=float).reshape(rows, cols)

        lift = MultiIndexBasis.from_list(n, doc["lift_exponents"])
        dynb = MultiIndexBasis.from_list(n, doc["dynamics_exponents"])
        geo = SSMGeometry(
            tangent_basis=mat("V", p, n),
            linear_lift=mat("W0", p, n),
            nonlinear_lift=mat("W", p, len(lift)),
            lift_basis=lift,
            equilibrium=np.asarray(doc["y_eq"], dtype=float),
        )
        dyn = ReducedDynamics(
            linear_coeffs=mat("R0", n, n),
            nonlinear_coeffs=mat("R", n, len(dynb)),
            dynamics_basis=dynb,
            time_semantics=doc["time_semantics"],
            dt=doc.get("dt"),
        )
        emb = doc.get("embedding")
        return assemble_model(
            geo,
            dyn,
            mat("B_r", n, int(doc["m"])),
            mat("C", int(doc["o"]), p),
            np.asarray(doc["z_eq"], dtype=float),
            embedding=None if emb is None else EmbeddingSpec.from_dict(emb),
            provenance=doc.get("provenance", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "SSMRModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def assemble_model(
    geometry: SSMGeometry,
    dynamics: ReducedDynamics,
    B_r: np.ndarray,
    C: np.ndarray,
    z_eq: np.ndarray,
    embedding: EmbeddingSpec | None = None,
    provenance: dict | None = None,
) -> SSMRModel:
    B_r = np.atleast_2d(np.asarray(B_r, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    z_eq = np.asarray(z_eq, dtype=float).ravel()
    n, p = geometry.n, geometry.p
    if dynamics.n != n:
        raise DimensionError(f"dynamics dimension {dynamics.n} != geometry dimension {n}")
    if B_r.shape[0] != n:
        raise DimensionError(f"B_r has {B_r.shape[0]} rows, expected {n}")
    if C.shape[1] != p:
        raise DimensionError(f"C has {C.shape[1]} columns, expected {p}")
    if z_eq.shape[0] != C.shape[0]:
        raise DimensionError(f"z_eq has {z_eq.shape[0]} entries, expected {C.shape[0]}")
    if embedding is not None and embedding.embedded_dim != p:
        raise DimensionError(f"embedding dimension {embedding.embedded_dim} != p = {p}")
    return SSMRModel(geometry, dynamics, B_r, C, z_eq, embedding, dict(provenance or {}))
