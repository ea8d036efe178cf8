"""Shared benchmark data: built once per session and reused by several test modules."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pytest

from ssmr.controllearn import SSMRModel, random_control_sequence
from ssmr.datapipe import Trajectory, estimate_equilibrium
from ssmr.pipeline import benchmark_selector, fit_model
from ssmr.plant import GroundTruthPlant, build_benchmark_plant, sample_decay_initial_conditions, simulate_controlled, simulate_decay


@dataclass
class BenchmarkData:
    plant: GroundTruthPlant
    decay: list[Trajectory]
    controlled: list[Trajectory]
    equilibrium: np.ndarray
    selector: np.ndarray


@lru_cache(maxsize=None)
def benchmark_data(n: int = 4, n_f: int = 20, seed: int = 3, count: int = 44, duration: float = 4.0,
                   controlled_count: int = 4) -> BenchmarkData:
    plant = build_benchmark_plant(n, n_f, seed)
    x0 = np.array(sample_decay_initial_conditions(plant, count, 1.0, 0))
    decay = simulate_decay(plant.system, x0, duration, 1e-3, dt=1e-3)
    scheds = [random_control_sequence(plant.inputs, 3.0, 0.01, (-1.0, 1.0), 100 + i) for i in range(controlled_count)]
    controlled = simulate_controlled(plant.system, np.zeros(n_f), scheds, dt=1e-3, sample_period=1e-3)
    return BenchmarkData(plant, decay, controlled, estimate_equilibrium(decay), benchmark_selector(plant))


@lru_cache(maxsize=None)
def benchmark_models(n: int = 4, n_f: int = 20, seed: int = 3) -> tuple[SSMRModel, SSMRModel]:
    """Cubic model and linear baseline fitted on the same benchmark data."""
    d = benchmark_data(n, n_f, seed)
    cubic = fit_model(d.decay, d.controlled, n, 3, 3, d.equilibrium, d.selector).model
    linear = fit_model(d.decay, d.controlled, n, 1, 1, d.equilibrium, d.selector).model
    return cubic, linear


@pytest.fixture(scope="session")
def bench4() -> BenchmarkData:
    return benchmark_data()


@pytest.fixture(scope="session")
def models4() -> tuple[SSMRModel, SSMRModel]:
    return benchmark_models()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# acceptance verdicts, printed as one PASS/FAIL line each at the end of the session
ACCEPTANCE: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
