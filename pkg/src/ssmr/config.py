"""Declarative pipeline configuration (YAML) with strict parsing and round-tripping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .mpc.ocp import OCPConfig, TrustRegion, box_polytope


class ConfigFileError(ValueError):
    pass


@dataclass
class PlantSection:
    kind: str = "benchmark"  # benchmark | chain
    n: int = 4
    n_f: int = 20
    seed: int = 3
    inputs: int = 2
    nonlinearity: float = 0.5
    lift_scale: float = 0.2
    control_leak: float = 0.02
    gap_range: list = field(default_factory=lambda: [30.0, 60.0])
    # chain-only parameters
    dof: int = 10
    cubic: float = 50.0
    plant_dt: float = 1e-3


@dataclass
class DataSection:
    decay_count: int = 44
    decay_duration: float = 4.0
    decay_amplitude: float = 1.0
    sample_period: float = 1e-3
    controlled_count: int = 4
    controlled_duration: float = 3.0
    truncation: float = 0.0
    # decay initial conditions: auto | preload | manifold (auto = manifold on the benchmark, preload otherwise)
    decay_mode: str = "auto"
    delays: int = 0
    stride: int = 1
    holdout_fraction: float = 0.2
    seed: int = 0


@dataclass
class FitSection:
    n: int = 4
    n_w: int = 3
    n_r: int = 3
    ridge: float = 0.0
    time_semantics: str = "continuous"
    # observed coordinates used as performance outputs; empty = benchmark default
    performance: list = field(default_factory=list)
    outputs: int = 2
    # per-coordinate PCA weights on the raw observation; empty = unweighted
    pca_weights: list = field(default_factory=list)


@dataclass
class ControlFitSection:
    bounds: list = field(default_factory=lambda: [-1.0, 1.0])
    hold_period: float = 0.01
    seed: int = 100


@dataclass
class TaskSpec:
    name: str
    kind: str  # figure-eight | circle | near-resonance | constant
    params: dict = field(default_factory=dict)


@dataclass
class MPCSection:
    Q: float = 1.0
    Q_f: float | None = None
    R: float = 1e-4
    horizon: int = 3
    # extra horizons to sweep in the control stage (the first entry is ``horizon``)
    horizons: list = field(default_factory=list)
    dt: float = 0.01
    rollout_horizon: int = 1
    control_bound: float | None = 1.0
    performance_bound: float | None = None
    soft_penalty: float | None = None
    trust_initial: float | None = None
    trust_shrink: float = 0.5
    trust_grow: float = 2.0
    trust_accept: float = 0.1
    scp_tolerance: float = 1e-4
    scp_max_iters: int = 20
    duration: float = 3.0
    transient: float = 0.5
    tasks: list = field(default_factory=lambda: default_tasks())

    def horizon_list(self) -> list[int]:
        out = [int(self.horizon)]
        for h in self.horizons:
            if int(h) not in out:
                out.append(int(h))
        return out

    def ocp(self, o: int, m: int, horizon: int | None = None, task: "TaskSpec | None" = None) -> OCPConfig:
        """Concrete OCP configuration for ``o`` outputs and ``m`` inputs.

        A task may carry its own performance box as ``z_low`` / ``z_high``
        lists (``null`` entries are unbounded); it overrides ``performance_bound``.
        """
        cp = None
        if self.control_bound is not None:
            cp = box_polytope([-self.control_bound] * m, [self.control_bound] * m)
        pp = None
        if self.performance_bound is not None:
            pp = box_polytope([-self.performance_bound] * o, [self.performance_bound] * o)
        if task is not None and ("z_low" in task.params or "z_high" in task.params):
            low = _bounds(task.params.get("z_low"), o, -np.inf)
            high = _bounds(task.params.get("z_high"), o, np.inf)
            pp = box_polytope(low, high)
            if pp[0].shape[0] == 0:
                pp = None
        return OCPConfig(
            Q=self.Q * np.eye(o),
            Q_f=None if self.Q_f is None else self.Q_f * np.eye(o),
            R=self.R * np.eye(m),
            horizon=horizon or self.horizon,
            dt=self.dt,
            rollout_horizon=self.rollout_horizon,
            control_polytope=cp,
            performance_polytope=pp,
            soft_penalty=self.soft_penalty,
            trust_region=TrustRegion(self.trust_initial, self.trust_shrink, self.trust_grow, self.trust_accept),
            scp_tolerance=self.scp_tolerance,
            scp_max_iters=self.scp_max_iters,
        )


@dataclass
class OutputSection:
    directory: str = "out"
    plots: bool = True
    # wall-clock QP times in logs; disable for byte-identical reruns
    timing: bool = True


@dataclass
class PipelineConfig:
    plant: PlantSection = field(default_factory=PlantSection)
    data: DataSection = field(default_factory=DataSection)
    fit: FitSection = field(default_factory=FitSection)
    control_fit: ControlFitSection = field(default_factory=ControlFitSection)
    mpc: MPCSection = field(default_factory=MPCSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def from_dict(cls, doc: dict | None) -> "PipelineConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigFileError("config root must be a mapping")
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(doc) - set(known)
        if unknown:
            raise ConfigFileError(f"unknown config sections: {sorted(unknown)}")
        sections = {
            "plant": PlantSection, "data": DataSection, "fit": FitSection,
            "control_fit": ControlFitSection, "mpc": MPCSection, "output": OutputSection,
        }
        kw = {}
        for name, typ in sections.items():
            kw[name] = _section(typ, doc.get(name) or {}, name)
        kw["mpc"].tasks = [_task(t) for t in kw["mpc"].tasks]
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, text: str) -> "PipelineConfig":
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigFileError(f"malformed YAML: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_yaml(Path(path).read_text())

    def validate(self) -> None:
        p, d, f, m = self.plant, self.data, self.fit, self.mpc
        if p.kind not in ("benchmark", "chain"):
            raise ConfigFileError(f"unknown plant kind {p.kind!r}")
        if f.time_semantics not in ("continuous", "discrete"):
            raise ConfigFileError(f"unknown time semantics {f.time_semantics!r}")
        if min(f.n_w, f.n_r) < 1 or f.n < 1:
            raise ConfigFileError("fit orders and dimension must be >= 1")
        if d.decay_count < 1 or d.controlled_count < 1:
            raise ConfigFileError("trajectory counts must be >= 1")
        if not 0 <= d.holdout_fraction < 1:
            raise ConfigFileError("holdout fraction must lie in [0, 1)")
        if d.decay_mode not in ("auto", "preload", "manifold"):
            raise ConfigFileError(f"unknown decay mode {d.decay_mode!r}")
        if any(float(w) <= 0 for w in f.pca_weights):
            raise ConfigFileError("PCA weights must be positive")
        for t in m.tasks:
            if t.kind not in ("figure-eight", "circle", "near-resonance", "constant"):
                raise ConfigFileError(f"unknown task kind {t.kind!r}")
        if len({t.name for t in m.tasks}) != len(m.tasks):
            raise ConfigFileError("task names must be unique")
        if any(int(h) < 2 for h in m.horizon_list()):
            raise ConfigFileError("horizons must be >= 2")
        if len(p.gap_range) != 2 or not 0 < p.gap_range[0] <= p.gap_range[1]:
            raise ConfigFileError("gap_range must be [low, high] with 0 < low <= high")
        if len(self.control_fit.bounds) != 2 or self.control_fit.bounds[0] >= self.control_fit.bounds[1]:
            raise ConfigFileError("control_fit.bounds must be [low, high] with low < high")


def _section(typ, doc, name):
    if not isinstance(doc, dict):
        raise ConfigFileError(f"section {name!r} must be a mapping")
    allowed = {f.name for f in fields(typ)}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigFileError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return typ(**doc)
    except TypeError as exc:
        raise ConfigFileError(f"section {name!r}: {exc}") from exc


def _task(t) -> TaskSpec:
    if isinstance(t, TaskSpec):
        return t
    if not isinstance(t, dict) or "name" not in t or "kind" not in t:
        raise ConfigFileError("each task needs 'name' and 'kind'")
    extra = set(t) - {"name", "kind", "params"}
    if extra:
        raise ConfigFileError(f"unknown task keys: {sorted(extra)}")
    return TaskSpec(str(t["name"]), str(t["kind"]), dict(t.get("params") or {}))


def _bounds(v, o: int, fill: float) -> list[float]:
    if v is None:
        return [fill] * o
    v = list(v)
    if len(v) != o:
        raise ConfigFileError(f"performance bounds need {o} entries, got {len(v)}")
    return [fill if b is None else float(b) for b in v]


def default_tasks() -> list[TaskSpec]:
    """Figure eight (free and constrained), circle, and a circle at the learned dominant period."""
    return [
        TaskSpec("figure-eight", "figure-eight", {"amplitudes": [0.6, 0.36], "period": 1.0}),
        TaskSpec("figure-eight-constrained", "figure-eight",
                 {"amplitudes": [0.6, 0.36], "period": 1.0, "z_low": [-0.45, None], "z_high": [0.45, None]}),
        TaskSpec("circle", "circle", {"radius": 0.6, "period": 1.0}),
        TaskSpec("near-resonance", "near-resonance", {"radius": 0.6}),
    ]
