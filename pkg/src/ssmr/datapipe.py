"""Trajectory containers and the preprocessing that feeds the regressions.

Observations are stored one sample per row (``(N, p)``), matching the CSV
layout. The assembled regression matrices are column-per-sample (``(p, K)``).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SAMPLING_TOL = 1e-9


class DataError(ValueError):
    """Malformed, inconsistent or too-short trajectory data."""


@dataclass(frozen=True)
class Trajectory:
    timestamps: np.ndarray
    observations: np.ndarray
    controls: np.ndarray | None = None
    kind: str = "decay"
    # hold period of the control schedule, when the data came from one
    hold_period: float | None = None

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        y = np.asarray(self.observations, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "observations", y)
        if t.ndim != 1 or y.shape[0] != t.shape[0]:
            raise DataError(f"timestamps {t.shape} and observations {y.shape} disagree")
        if self.controls is not None:
            u = np.asarray(self.controls, dtype=float)
            if u.ndim == 1:
                u = u[:, None]
            if u.shape[0] != t.shape[0]:
                raise DataError(f"controls {u.shape} not aligned with {t.shape[0]} timestamps")
            object.__setattr__(self, "controls", u)
        if self.kind not in ("decay", "controlled"):
            raise DataError(f"unknown trajectory kind {self.kind!r}")
        if len(t) > 1:
            gaps = np.diff(t)
            if np.any(gaps <= 0):
                raise DataError("timestamps must be strictly increasing")
            if np.max(np.abs(gaps - gaps[0])) > SAMPLING_TOL:
                raise DataError("non-uniform sampling")

    def __len__(self) -> int:
        return self.timestamps.shape[0]

    @property
    def dim(self) -> int:
        return self.observations.shape[1]

    @property
    def sample_period(self) -> float:
        if len(self) < 2:
            raise DataError("sample period undefined for fewer than 2 samples")
        return float(self.timestamps[1] - self.timestamps[0])

    def with_observations(self, obs: np.ndarray) -> "Trajectory":
        return replace(self, observations=obs)


@dataclass(frozen=True)
class EmbeddingSpec:
    """Delay embedding: sample ``k`` stacks ``y_k, y_{k-stride}, ..., y_{k-d*stride}``."""

    delays: int
    raw_dim: int
    stride: int = 1

    def __post_init__(self):
        if self.delays < 0 or self.stride < 1 or self.raw_dim < 1:
            raise DataError(f"invalid embedding {self}")

    @property
    def embedded_dim(self) -> int:
        return self.raw_dim * (self.delays + 1)

    @property
    def lag(self) -> int:
        """Leading samples consumed by the embedding."""
        return self.delays * self.stride

    def admissible(self, n: int) -> bool:
        return self.embedded_dim >= 2 * n + 1

    def to_dict(self) -> dict:
        return {"delays": self.delays, "raw_dim": self.raw_dim, "stride": self.stride, "order": "current-first"}

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingSpec":
        return cls(delays=int(d["delays"]), raw_dim=int(d["raw_dim"]), stride=int(d.get("stride", 1)))


@dataclass(frozen=True)
class EmbeddingVerdict:
    admissible: bool
    p: int
    n: int
    # smallest delay count that satisfies p >= 2n+1 for the given raw dimension
    min_delays: int


def check_embedding_dimension(p: int, n: int, raw_dim: int | None = None) -> EmbeddingVerdict:
    if p < 1 or n < 1:
        raise DataError("p and n must be positive")
    raw = p if raw_dim is None else raw_dim
    need = 2 * n + 1
    min_d = max(0, -(-need // raw) - 1)
    return EmbeddingVerdict(admissible=p >= need, p=p, n=n, min_delays=min_d)


def truncate_transient(traj: Trajectory, drop: int) -> Trajectory:
    if drop < 0:
        raise DataError("drop must be non-negative")
    if drop >= len(traj):
        raise DataError(f"truncating {drop} samples empties a {len(traj)}-sample trajectory")
    if drop == 0:
        return traj
    return replace(
        traj,
        timestamps=traj.timestamps[drop:],
        observations=traj.observations[drop:],
        controls=None if traj.controls is None else traj.controls[drop:],
    )


def embed_array(obs: np.ndarray, spec: EmbeddingSpec) -> np.ndarray:
    """Delay-stack an ``(N, raw_dim)`` array into ``(N - lag, embedded_dim)``."""
    obs = np.asarray(obs, dtype=float)
    N = obs.shape[0]
    lag = spec.lag
    if obs.shape[1] != spec.raw_dim:
        raise DataError(f"raw dimension {obs.shape[1]} != {spec.raw_dim}")
    if N <= lag:
        raise DataError(f"trajectory of {N} samples too short for {spec.delays} delays (stride {spec.stride})")
    blocks = [obs[lag - j * spec.stride : N - j * spec.stride] for j in range(spec.delays + 1)]
    return np.hstack(blocks)


def embed(traj: Trajectory, spec: EmbeddingSpec) -> Trajectory:
    if spec.delays == 0:
        if traj.dim != spec.raw_dim:
            raise DataError(f"raw dimension {traj.dim} != {spec.raw_dim}")
        return traj
    lag = spec.lag
    return replace(
        traj,
        timestamps=traj.timestamps[lag:],
        observations=embed_array(traj.observations, spec),
        controls=None if traj.controls is None else traj.controls[lag:],
    )


def finite_difference_array(x: np.ndarray, h: float, axis: int = 0) -> np.ndarray:
    """Second-order accurate derivative along ``axis``: central inside, one-sided at the ends."""
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    N = x.shape[0]
    if N < 3:
        raise DataError(f"need at least 3 samples for finite differencing, got {N}")
    d = np.empty_like(x)
    d[1:-1] = (x[2:] - x[:-2]) / (2.0 * h)
    d[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * h)
    d[-1] = (3.0 * x[-1] - 4.0 * x[-2] + x[-3]) / (2.0 * h)
    return np.moveaxis(d, 0, axis)


def finite_difference(traj: Trajectory) -> np.ndarray:
    """Derivative samples of shape ``(N, p)`` aligned 1:1 with the trajectory."""
    if len(traj) < 3:
        raise DataError(f"need at least 3 samples for finite differencing, got {len(traj)}")
    return finite_difference_array(traj.observations, traj.sample_period)


def hold_segments(traj: Trajectory) -> list[tuple[slice, bool]]:
    """Index ranges over which the recorded control is constant.

    Each range also includes the sample at the next switching instant (when
    there is one) so the state reached under the hold closes its segment; the
    flag says whether that closing sample is present.
    """
    if traj.controls is None or traj.hold_period is None:
        return [(slice(0, len(traj)), False)]
    per = traj.hold_period / traj.sample_period
    steps = int(round(per))
    if steps < 1 or abs(steps - per) > 1e-6:
        raise DataError("hold period must be an integer multiple of the sample period")
    # align to the schedule grid even after truncation/embedding shifts
    offset = int(round(traj.timestamps[0] / traj.sample_period)) % steps
    bounds = list(range(0 if offset == 0 else steps - offset, len(traj), steps))
    if not bounds or bounds[0] != 0:
        bounds.insert(0, 0)
    segs = []
    for a, b in zip(bounds, bounds[1:] + [None]):
        if b is None:
            segs.append((slice(a, len(traj)), False))
        else:
            segs.append((slice(a, b + 1), True))
    return segs


def hold_aware_difference(traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives for a zero-order-hold controlled trajectory.

    Stencils never straddle a control switch. Returns ``(indices, derivs)``:
    the sample indices that received a derivative (each aligned with the
    control active from that sample onward) and the ``(K, p)`` derivatives.
    """
    h = traj.sample_period
    idx, out = [], []
    for seg, closed in hold_segments(traj):
        block = traj.observations[seg]
        if block.shape[0] < 3:
            continue
        d = finite_difference_array(block, h)
        # the closing sample's right-derivative belongs to the next hold
        keep = block.shape[0] - 1 if closed else block.shape[0]
        idx.extend(range(seg.start, seg.start + keep))
        out.append(d[:keep])
    if not out:
        raise DataError("no hold segment long enough for differencing")
    return np.asarray(idx), np.vstack(out)


@dataclass
class RegressionData:
    """Column-per-sample matrices ready for least squares.

    ``Y`` holds equilibrium-shifted, embedded observations; ``Ydot`` their
    time derivatives (or, for shift pairs, ``Y_next``); ``U`` aligned controls.
    ``segments`` records the column ranges belonging to each input trajectory.
    """

    Y: np.ndarray
    Ydot: np.ndarray | None = None
    Y_next: np.ndarray | None = None
    U: np.ndarray | None = None
    segments: list[tuple[int, int]] = field(default_factory=list)
    sample_period: float = 0.0


def _check_consistent(trajs: list[Trajectory]) -> float:
    if not trajs:
        raise DataError("no trajectories supplied")
    raw = trajs[0].dim
    h = trajs[0].sample_period
    for tr in trajs[1:]:
        if tr.dim != raw:
            raise DataError(f"inconsistent dims: {tr.dim} vs {raw}")
        if abs(tr.sample_period - h) > SAMPLING_TOL:
            raise DataError(f"inconsistent sampling: {tr.sample_period} vs {h}")
    return h


def assemble_regression_data(
    trajs: list[Trajectory],
    spec: EmbeddingSpec,
    equilibrium: np.ndarray,
    mode: str = "derivative",
) -> RegressionData:
    """Shift by ``equilibrium``, embed, and concatenate trajectories column-wise.

    ``mode`` is ``"derivative"`` (finite differences), ``"shift"`` (pairs
    ``(Y_k, Y_{k+1})``), ``"hold"`` (hold-aware differences for controlled
    data) or ``"none"`` (observations only). No pair straddles a boundary.
    """
    h = _check_consistent(trajs)
    eq = np.asarray(equilibrium, dtype=float).ravel()
    if eq.shape[0] != spec.raw_dim or trajs[0].dim != spec.raw_dim:
        raise DataError(f"inconsistent dims: equilibrium {eq.shape[0]}, data {trajs[0].dim}, spec {spec.raw_dim}")
    Ys, Ds, Ns, Us, segs = [], [], [], [], []
    col = 0
    has_u = all(tr.controls is not None for tr in trajs)
    for tr in trajs:
        shifted = tr.with_observations(tr.observations - eq)
        emb = embed(shifted, spec)
        Yk = emb.observations
        Uk = emb.controls
        if mode == "derivative":
            Dk = finite_difference(emb)
        elif mode == "hold":
            idx, Dk = hold_aware_difference(emb)
            Yk = Yk[idx]
            Uk = None if Uk is None else Uk[idx]
        elif mode == "shift":
            Ns.append(Yk[1:])
            Yk = Yk[:-1]
            Uk = None if Uk is None else Uk[:-1]
            Dk = None
        elif mode == "none":
            Dk = None
        else:
            raise DataError(f"unknown assembly mode {mode!r}")
        Ys.append(Yk)
        if Dk is not None:
            Ds.append(Dk)
        if has_u:
            Us.append(Uk)
        segs.append((col, col + Yk.shape[0]))
        col += Yk.shape[0]
    return RegressionData(
        Y=np.vstack(Ys).T,
        Ydot=np.vstack(Ds).T if Ds else None,
        Y_next=np.vstack(Ns).T if Ns else None,
        U=np.vstack(Us).T if has_u else None,
        segments=segs,
        sample_period=h,
    )


def estimate_equilibrium(trajs: list[Trajectory], tail: int = 50) -> np.ndarray:
    """Mean of the last ``tail`` samples of the longest trajectory."""
    if not trajs:
        raise DataError("no trajectories supplied")
    longest = max(trajs, key=len)
    return longest.observations[-min(tail, len(longest)) :].mean(axis=0)


def transient_drop(sample_period: float, fastest_period: float, multiple: float = 3.0) -> int:
    """Default truncation: ``multiple`` times the fastest retained time scale, in samples."""
    return int(np.ceil(multiple * fastest_period / sample_period))


def split_holdout(trajs: list, fraction: float = 0.2, paired: bool = False) -> tuple[list, list]:
    """Hold out the last ``fraction`` of trajectories.

    With ``paired`` (antipodal initial-condition pairs) the held-out count is
    rounded up to an even number so no pair is split across the two sets.
    """
    held = int(round(fraction * len(trajs)))
    if paired and held % 2:
        held += 1
    held = min(held, len(trajs) - 1)
    if held <= 0:
        return list(trajs), []
    return list(trajs[:-held]), list(trajs[-held:])


# ---------------------------------------------------------------------------
# file formats


def _fmt(v: float) -> str:
    return f"{v:.15g}"


def write_trajectory_csv(path: str | Path, traj: Trajectory) -> None:
    p = traj.dim
    m = 0 if traj.controls is None else traj.controls.shape[1]
    header = ["t"] + [f"y_{i + 1}" for i in range(p)] + [f"u_{i + 1}" for i in range(m)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(len(traj)):
            row = [_fmt(traj.timestamps[k])] + [_fmt(v) for v in traj.observations[k]]
            if m:
                row += [_fmt(v) for v in traj.controls[k]]
            w.writerow(row)


def read_trajectory_csv(path: str | Path, kind: str = "decay", hold_period: float | None = None) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0].strip() != "t":
        raise DataError(f"{path}: first column must be 't'")
    data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    ycols = [i for i, h in enumerate(header) if h.strip().startswith("y_")]
    ucols = [i for i, h in enumerate(header) if h.strip().startswith("u_")]
    return Trajectory(
        timestamps=data[:, 0],
        observations=data[:, ycols],
        controls=data[:, ucols] if ucols else None,
        kind=kind,
        hold_period=hold_period,
    )


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class DatasetManifest:
    """JSON manifest: trajectory files, kinds, sampling and preprocessing actually applied."""

    entries: list[dict]
    sample_period: float
    control_sample_period: float | None = None
    hold_period: float | None = None
    truncation: int = 0
    embedding: dict = field(default_factory=lambda: {"delays": 0, "stride": 1})
    paired: bool = False
    holdout_fraction: float = 0.2

    def files(self, kind: str, split: str | None = None) -> list[str]:
        return [e["file"] for e in self.entries if e["kind"] == kind and (split is None or e.get("split") == split)]

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())
