"""End-to-end fitting chain shared by the command line and the acceptance checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controllearn import SSMRModel, assemble_model, fit_control_matrix
from .datapipe import EmbeddingSpec, Trajectory, assemble_regression_data
from .plant import GroundTruthPlant
from .ssmlearn import fit_discrete_dynamics, fit_geometry, fit_pca, fit_reduced_dynamics


class StageError(RuntimeError):
    """An error raised inside a named pipeline stage."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass
class FitOutcome:
    model: SSMRModel
    variance_ratios: np.ndarray
    invertibility: dict
    control_residuals: tuple[float, float]


def benchmark_selector(bench: GroundTruthPlant, outputs: int = 2) -> np.ndarray:
    """Performance rows ``z_a = q_a + s_a`` in observed coordinates.

    ``q_a`` is the position coordinate of reduced pair ``a`` (cycled when
    there are fewer pairs than outputs) and ``s_a`` a transverse coordinate,
    so ``z`` sees both the slow motion and the curvature of the manifold.
    """
    n = bench.reduced_dim
    Q = bench.rotation
    rows = []
    for a in range(outputs):
        q = 2 * (a % (n // 2))
        rows.append(Q[:, q] + Q[:, n + a])
    return np.array(rows)


def fit_model(
    decay: list[Trajectory],
    controlled: list[Trajectory],
    n: int,
    n_w: int,
    n_r: int,
    equilibrium: np.ndarray,
    selector: np.ndarray,
    embedding: EmbeddingSpec | None = None,
    ridge: float = 0.0,
    time_semantics: str = "continuous",
    z_eq: np.ndarray | None = None,
    provenance: dict | None = None,
    pca_weights: np.ndarray | None = None,
) -> FitOutcome:
    """PCA, lift, autonomous dynamics and control matrix in one pass.

    Errors are re-raised as :class:`StageError` carrying the stage name.
    ``pca_weights`` (one per raw coordinate) are repeated across delay blocks.
    """
    spec = embedding or EmbeddingSpec(0, decay[0].dim)
    mode = "derivative" if time_semantics == "continuous" else "none"
    stage = "assemble-decay"
    try:
        d = assemble_regression_data(decay, spec, equilibrium, mode=mode)
        stage = "pca"
        w = None if pca_weights is None else np.tile(np.asarray(pca_weights, dtype=float), spec.delays + 1)
        V, ratios = fit_pca(d.Y, n, w)
        X = V.T @ d.Y
        stage = "geometry"
        geo = fit_geometry(d.Y, X, n_w, V=V, equilibrium=spec_equilibrium(equilibrium, spec), ridge=ridge)
        stage = "dynamics"
        if time_semantics == "continuous":
            dyn = fit_reduced_dynamics(X, V.T @ d.Ydot, n_r, ridge)
        else:
            dyn = fit_discrete_dynamics(X, n_r, d.sample_period, d.segments, ridge)
        stage = "assemble-controlled"
        dc = assemble_regression_data(controlled, spec, equilibrium, mode="hold" if time_semantics == "continuous" else "shift")
        stage = "control-matrix"
        Xu = V.T @ dc.Y
        target = V.T @ (dc.Ydot if time_semantics == "continuous" else dc.Y_next)
        cf = fit_control_matrix(Xu, target, dc.U, dyn)
        stage = "assemble-model"
        prov = dict(provenance or {})
        prov.setdefault("reduced_amplitude", float(np.max(np.abs(X))))
        prov.setdefault("variance_ratio", float(np.sum(ratios[:n])))
        C = np.asarray(selector, dtype=float)
        C_emb = np.hstack([C, np.zeros((C.shape[0], spec.embedded_dim - C.shape[1]))])
        zq = C_emb @ geo.equilibrium if z_eq is None else z_eq
        model = assemble_model(geo, dyn, cf.B_r, C_emb, zq, embedding=spec if spec.delays else None, provenance=prov)
    except Exception as exc:
        raise StageError(stage, exc) from exc
    return FitOutcome(model, ratios, geo.invertibility_residuals(), (cf.residual_before, cf.residual_after))


def spec_equilibrium(equilibrium: np.ndarray, spec: EmbeddingSpec) -> np.ndarray:
    """Equilibrium of the embedded observation (repeated for each delay block)."""
    return np.tile(np.asarray(equilibrium, dtype=float), spec.delays + 1)

