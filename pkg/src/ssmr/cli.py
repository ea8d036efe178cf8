"""Command-line driver: data generation, fitting, validation, closed-loop control and reports.

Every command reads the YAML config plus whatever earlier commands wrote into
the output directory, so each stage can be re-run on its own.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import report as report_mod
from .config import ConfigFileError, PipelineConfig, TaskSpec
from .controllearn import SSMRModel, random_control_sequence
from .datapipe import (
    DatasetManifest,
    EmbeddingSpec,
    Trajectory,
    check_embedding_dimension,
    embed,
    estimate_equilibrium,
    file_sha256,
    read_trajectory_csv,
    split_holdout,
    truncate_transient,
    write_trajectory_csv,
)
from .mpc.loop import (
    dominant_period,
    reference_circle,
    reference_figure_eight,
    reference_constant,
    run_receding_horizon,
    run_zero_control,
    write_summary,
)
from .pipeline import StageError, benchmark_selector, fit_model
from .plant import (
    FirstOrderSystem,
    GroundTruthPlant,
    assemble_first_order,
    build_benchmark_plant,
    chain_plant,
    sample_decay_initial_conditions,
    simulate_controlled,
    simulate_decay,
)
from .ssmlearn import invariance_error, principal_angles_deg

CONTROLLERS = ("ssmr", "linear")


# ---------------------------------------------------------------------------
# shared helpers


def build_plant(cfg: PipelineConfig) -> tuple[FirstOrderSystem, GroundTruthPlant | None]:
    p = cfg.plant
    if p.kind == "benchmark":
        bench = build_benchmark_plant(
            p.n, p.n_f, p.seed, inputs=p.inputs, nonlinearity=p.nonlinearity, lift_scale=p.lift_scale,
            control_leak=p.control_leak, gap_range=tuple(p.gap_range),
        )
        return bench.system, bench
    chain = chain_plant(p.dof, cubic=p.cubic, inputs=tuple(range(-p.inputs, 0)))
    return assemble_first_order(chain), None


def performance_selector(cfg: PipelineConfig, system: FirstOrderSystem, bench: GroundTruthPlant | None) -> np.ndarray:
    """Rows mapping a raw observation to the performance output ``z``."""
    f = cfg.fit
    p = system.state_dim
    if f.performance:
        C = np.zeros((len(f.performance), p))
        for r, i in enumerate(f.performance):
            C[r, int(i)] = 1.0
        return C
    if bench is not None:
        return benchmark_selector(bench, f.outputs)
    # chain: positions of the last masses
    dof = p // 2
    C = np.zeros((f.outputs, p))
    for r in range(f.outputs):
        C[r, dof - f.outputs + r] = 1.0
    return C


def _stage(name: str, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _dirs(out: Path) -> dict:
    return {"data": out / "data", "control": out / "control", "report": out / "report"}


def _write_effective_config(cfg: PipelineConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "effective_config.yaml")


def _embedding(manifest: DatasetManifest, raw_dim: int) -> EmbeddingSpec:
    e = manifest.embedding
    return EmbeddingSpec(int(e.get("delays", 0)), raw_dim, int(e.get("stride", 1)))


def _load_set(out: Path, manifest: DatasetManifest, kind: str, split: str | None) -> list[Trajectory]:
    hold = manifest.hold_period if kind == "controlled" else None
    trajs = []
    for name in manifest.files(kind, split):
        path = out / "data" / name
        entry = next(e for e in manifest.entries if e["file"] == name)
        if "sha256" in entry and file_sha256(path) != entry["sha256"]:
            raise ValueError(f"{name}: checksum differs from the manifest")
        tr = read_trajectory_csv(path, kind=kind, hold_period=hold)
        if kind == "decay" and manifest.truncation:
            tr = truncate_transient(tr, manifest.truncation)
        trajs.append(tr)
    if not trajs:
        raise ValueError(f"manifest lists no {kind} trajectories" + (f" in split {split!r}" if split else ""))
    return trajs


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(cfg: PipelineConfig, out: Path) -> DatasetManifest:
    """Simulate the decay and controlled sets and write CSVs plus ``manifest.json``."""
    d, c = cfg.data, cfg.control_fit
    system, bench = _stage("plant", build_plant, cfg)
    ddir = _dirs(out)["data"]
    ddir.mkdir(parents=True, exist_ok=True)
    dt = cfg.plant.plant_dt

    def decay():
        target = bench if bench is not None else system
        x0 = sample_decay_initial_conditions(target, d.decay_count, d.decay_amplitude, d.seed, mode=d.decay_mode)
        return simulate_decay(system, np.array(x0), d.decay_duration, d.sample_period, dt=dt)

    def controlled():
        scheds = [
            random_control_sequence(system.inputs, d.controlled_duration, c.hold_period, c.bounds, c.seed + i, plant_dt=dt)
            for i in range(d.controlled_count)
        ]
        return simulate_controlled(system, np.zeros(system.state_dim), scheds, dt=dt, sample_period=d.sample_period,
                                   duration=d.controlled_duration)

    dec = _stage("simulate-decay", decay)
    ctr = _stage("simulate-controlled", controlled)
    train, held = split_holdout(dec, d.holdout_fraction, paired=True)
    entries = []
    for i, tr in enumerate(dec):
        name = f"decay_{i:03d}.csv"
        write_trajectory_csv(ddir / name, tr)
        entries.append({"file": name, "kind": "decay", "split": "train" if i < len(train) else "holdout",
                        "sha256": file_sha256(ddir / name)})
    for i, tr in enumerate(ctr):
        name = f"controlled_{i:03d}.csv"
        write_trajectory_csv(ddir / name, tr)
        entries.append({"file": name, "kind": "controlled", "split": "train", "sha256": file_sha256(ddir / name)})
    manifest = DatasetManifest(
        entries=entries,
        sample_period=d.sample_period,
        control_sample_period=d.sample_period,
        hold_period=c.hold_period,
        truncation=int(round(d.truncation / d.sample_period)),
        embedding={"delays": d.delays, "stride": d.stride},
        paired=True,
        holdout_fraction=d.holdout_fraction,
    )
    manifest.save(ddir / "manifest.json")
    print(f"wrote {len(dec)} decay ({len(held)} held out) and {len(ctr)} controlled trajectories to {ddir}")
    return manifest


def cmd_fit(cfg: PipelineConfig, out: Path) -> dict[str, SSMRModel]:
    """Fit the configured model and its linear baseline; write ``model.json`` and ``model_linear.json``."""
    manifest = _stage("load-data", DatasetManifest.load, out / "data" / "manifest.json")
    decay = _stage("load-data", _load_set, out, manifest, "decay", "train")
    controlled = _stage("load-data", _load_set, out, manifest, "controlled", None)
    system, bench = _stage("plant", build_plant, cfg)
    C = performance_selector(cfg, system, bench)
    spec = _embedding(manifest, decay[0].dim)
    y_eq = estimate_equilibrium(decay)
    f = cfg.fit
    prov = {
        "data": {e["file"]: e["sha256"] for e in manifest.entries if "sha256" in e},
        "manifest_sha256": file_sha256(out / "data" / "manifest.json"),
        "plant": {"kind": cfg.plant.kind, "seed": cfg.plant.seed},
    }
    models = {}
    for label, n_w, n_r in (("ssmr", f.n_w, f.n_r), ("linear", 1, 1)):
        res = fit_model(decay, controlled, f.n, n_w, n_r, y_eq, C, embedding=spec, ridge=f.ridge,
                        time_semantics=f.time_semantics, provenance={**prov, "orders": [n_w, n_r]},
                        pca_weights=f.pca_weights or None)
        models[label] = res.model
        path = out / ("model.json" if label == "ssmr" else "model_linear.json")
        res.model.save(path)
        ratios = ", ".join(f"{v:.4f}" for v in res.variance_ratios[: f.n])
        inv = ", ".join(f"{k}={v:.3g}" for k, v in res.invertibility.items())
        print(f"{label}: orders (n_w={n_w}, n_r={n_r}) variance ratios [{ratios}] invertibility {inv}")
        print(f"{label}: control residual {res.control_residuals[0]:.4g} -> {res.control_residuals[1]:.4g}; wrote {path}")
    return models


def _spectrum(ev: np.ndarray) -> list[list[float]]:
    ev = ev[np.lexsort((ev.imag, ev.real))]
    return [[float(f"{v.real:.12g}"), float(f"{v.imag:.12g}")] for v in ev]


def cmd_validate(cfg: PipelineConfig, out: Path) -> dict:
    """Held-out residuals, learned spectrum, slowest-mode period and embedding verdict."""
    manifest = _stage("load-data", DatasetManifest.load, out / "data" / "manifest.json")
    held = _stage("load-data", _load_set, out, manifest, "decay", "holdout")
    report: dict = {"holdout_trajectories": len(held)}
    for label, name in (("ssmr", "model.json"), ("linear", "model_linear.json")):
        model = _stage("load-model", SSMRModel.load, out / name)
        spec = model.embedding or EmbeddingSpec(0, model.p)
        trajs = [embed(t, spec) for t in held] if spec.delays else held
        inv = _stage("invariance", invariance_error, model.geometry, model.dynamics, trajs)
        verdict = check_embedding_dimension(model.p, model.n, spec.raw_dim)
        entry = {
            "orders": [model.geometry.order, model.dynamics.order],
            "residuals": {k: {q: float(f"{v:.12g}") for q, v in d.items()} for k, d in inv.to_dict().items()},
            "spectrum": _spectrum(model.dynamics.continuous_eigenvalues()),
            "variance_ratio": model.provenance.get("variance_ratio"),
            "embedding": {"admissible": verdict.admissible, "p": verdict.p, "n": verdict.n, "min_delays": verdict.min_delays},
        }
        try:
            entry["slowest_mode_period"] = float(f"{dominant_period(model):.12g}")
        except ValueError:
            entry["slowest_mode_period"] = None
        report[label] = entry
    _, bench = _stage("plant", build_plant, cfg)
    model = SSMRModel.load(out / "model.json")
    if bench is not None and model.embedding is None:
        angle = float(np.max(principal_angles_deg(model.geometry.tangent_basis, bench.tangent_basis)))
        report["ground_truth"] = {
            "tangent_angle_deg": float(f"{angle:.6g}"),
            "spectrum": _spectrum(np.linalg.eigvals(bench.R0)),
        }
    path = out / "validation.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    g = report["ssmr"]["residuals"]
    print(f"validation: geometry median {g['geometry']['median']:.3g}, dynamics median {g['dynamics']['median']:.3g}; wrote {path}")
    return report


def task_reference(task: TaskSpec, o: int, model: SSMRModel):
    """Reference callable for a task; near-resonance uses the learned dominant period."""
    p = task.params
    axes = tuple(p.get("axes", (0, 1)))
    center = p.get("center")
    if task.kind == "figure-eight":
        return reference_figure_eight(p.get("amplitudes", [0.6, 0.36]), float(p.get("period", 1.0)), axes, center, o)
    if task.kind == "circle":
        return reference_circle(float(p.get("radius", 0.6)), float(p.get("period", 1.0)), axes, center, o)
    if task.kind == "near-resonance":
        return reference_circle(float(p.get("radius", 0.6)), dominant_period(model), axes, center, o)
    value = p.get("value", [0.0] * o)
    return reference_constant(np.asarray(value, dtype=float))


def cmd_control(cfg: PipelineConfig, out: Path) -> dict:
    """Closed-loop runs for every task, controller and horizon; logs plus ``summary.json``."""
    mpc = cfg.mpc
    models = {
        "ssmr": _stage("load-model", SSMRModel.load, out / "model.json"),
        "linear": _stage("load-model", SSMRModel.load, out / "model_linear.json"),
    }
    system, bench = _stage("plant", build_plant, cfg)
    C = performance_selector(cfg, system, bench)
    raw = C.shape[1]
    perf = lambda y: C @ y[:raw]
    cdir = _dirs(out)["control"]
    cdir.mkdir(parents=True, exist_ok=True)
    o, m = C.shape[0], system.inputs
    sp = cfg.data.sample_period
    summary: dict = {"transient": mpc.transient, "duration": mpc.duration, "dt": mpc.dt,
                     "horizons": mpc.horizon_list(), "timing": cfg.output.timing, "tasks": {}}
    for task in mpc.tasks:
        ref = _stage(f"reference:{task.name}", task_reference, task, o, models["ssmr"])
        entry: dict = {"kind": task.kind, "params": task.params, "controllers": {}}
        zero = _stage(f"zero:{task.name}", run_zero_control, system, ref, perf, mpc.dt * mpc.rollout_horizon,
                      mpc.duration, None, cfg.plant.plant_dt, m)
        zero.save_csv(cdir / f"{task.name}__zero.csv")
        entry["zero"] = zero.summary(mpc.transient)
        for label in CONTROLLERS:
            entry["controllers"][label] = {}
            for N in mpc.horizon_list():
                ocp = _stage(f"ocp:{task.name}", mpc.ocp, o, m, N, task)
                log = _stage(f"control:{task.name}:{label}:N{N}", run_receding_horizon, system, models[label], ref,
                             ocp, mpc.duration, None, cfg.plant.plant_dt, None, perf, sp)
                if not cfg.output.timing:
                    log.qp_ms = np.zeros_like(log.qp_ms)
                fname = f"{task.name}__{label}__N{N}.csv"
                log.save_csv(cdir / fname)
                s = log.summary(mpc.transient)
                s["log"] = fname
                s["control_max_abs"] = float(np.max(np.abs(log.u), initial=0.0))
                if ocp.control_polytope is not None:
                    Mu, bu = ocp.control_polytope
                    s["control_bound_violations"] = int(np.sum(np.any(log.u @ Mu.T > bu, axis=1)))
                if ocp.performance_polytope is not None:
                    Mz, bz = ocp.performance_polytope
                    keep = log.t >= log.t[0] + mpc.transient - 1e-12
                    s["constraint_violation_max"] = float(np.max(log.z[keep] @ Mz.T - bz, initial=0.0))
                    s["slack_max_after_transient"] = float(np.nanmax(log.slack_max[keep], initial=0.0))
                entry["controllers"][label][f"N={N}"] = s
                print(f"{task.name} {label} N={N}: mse {s['mse']:.4g} (zero {entry['zero']['mse']:.4g}) faults {s['faults']}")
        summary["tasks"][task.name] = entry
    write_summary(cdir / "summary.json", summary)
    return summary


def cmd_report(cfg: PipelineConfig, out: Path) -> list[Path]:
    """Tracking plots per task plus a markdown table read from ``summary.json``."""
    return report_mod.write_report(out / "control", out / "report", plots=cfg.output.plots)


COMMANDS = {
    "generate-data": cmd_generate_data,
    "fit": cmd_fit,
    "validate": cmd_validate,
    "control": cmd_control,
    "report": cmd_report,
}


def run_all(cfg: PipelineConfig, out: Path) -> None:
    for fn in COMMANDS.values():
        fn(cfg, out)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="ssmr", description="Learn reduced models from data and control with them.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "all"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None, help="YAML config (defaults apply when omitted)")
        sp.add_argument("--out", type=Path, default=None, help="output directory (overrides output.directory)")
    args = parser.parse_args(argv)
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    except (ConfigFileError, OSError) as exc:
        print(f"ssmr: [config] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    out = args.out or Path(cfg.output.directory)
    try:
        _write_effective_config(cfg, out)
        if args.command == "all":
            run_all(cfg, out)
        else:
            COMMANDS[args.command](cfg, out)
    except StageError as exc:
        print(f"ssmr: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"ssmr: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
