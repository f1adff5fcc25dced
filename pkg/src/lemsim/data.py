"""Time-series ingestion and the synthetic prosumer data generator.

The generator substitutes for unavailable metering data: 12 prosumer
archetypes (double-peak demand with autocorrelated noise, rooftop PV as a
daylight bell under a shared cloud process) are cycled across nodes with
per-node scale variation. All randomness is drawn from one seeded
generator, so a seed fully determines the output.

File schema (delimited text, one row per node per step):
    timestamp,node_id,phase,demand_kw,pv_kw
with phase in {a, b, c} and kW values carrying six significant digits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import InputError

SCHEMA = ["timestamp", "node_id", "phase", "demand_kw", "pv_kw"]
PHASE_NAMES = "abc"

# Daylight window of the generator's PV bell (hours).
PV_DAWN_H = 6.2
PV_DUSK_H = 19.8


@dataclass(eq=False)
class TimeSeriesSet:
    node_ids: list[int]
    phases: np.ndarray  # (N,) prosumer phase index per node
    start: np.datetime64
    step_min: int
    demand_kw: np.ndarray  # (T, N)
    pv_kw: np.ndarray  # (T, N)

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=int)
        self.demand_kw = np.asarray(self.demand_kw, dtype=float)
        self.pv_kw = np.asarray(self.pv_kw, dtype=float)
        n = len(self.node_ids)
        if self.demand_kw.shape != self.pv_kw.shape or self.demand_kw.shape[1] != n:
            raise InputError("demand/pv arrays misaligned with node list")
        if len(self.phases) != n:
            raise InputError("phase assignment misaligned with node list")
        if np.any(self.demand_kw < 0) or np.any(self.pv_kw < 0):
            raise InputError("demand and pv must be >= 0")

    @property
    def n_steps(self) -> int:
        return self.demand_kw.shape[0]

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def times(self) -> np.ndarray:
        return self.start + np.arange(self.n_steps) * np.timedelta64(self.step_min, "m")

    def minute_of_day(self, t: int) -> int:
        minutes = (self.start - self.start.astype("datetime64[D]")).astype(
            "timedelta64[m]"
        ).astype(int)
        return int((minutes + t * self.step_min) % 1440)

    def resample(self, to_step_min: int) -> "TimeSeriesSet":
        """Downsample by block mean; `to_step_min` must be a multiple."""
        if to_step_min == self.step_min:
            return self
        if to_step_min % self.step_min:
            raise InputError(
                f"cannot resample {self.step_min}-min data to {to_step_min}-min"
            )
        block = to_step_min // self.step_min
        t_out = self.n_steps // block
        if t_out == 0:
            raise InputError("series shorter than one output step")
        trim = t_out * block
        shape = (t_out, block, self.n_nodes)
        return TimeSeriesSet(
            node_ids=list(self.node_ids),
            phases=self.phases.copy(),
            start=self.start,
            step_min=to_step_min,
            demand_kw=self.demand_kw[:trim].reshape(shape).mean(axis=1),
            pv_kw=self.pv_kw[:trim].reshape(shape).mean(axis=1),
        )


@dataclass
class SynthParams:
    step_min: int = 1
    start: str = "2024-06-02"  # a Sunday; summer for strong PV
    demand_scale: float = 1.0
    pv_scale: float = 1.0
    phase_pv_scale: tuple = (1.0, 1.0, 1.0)
    node_spread: float = 0.1  # per-node multiplier half-range
    cloud_vol: float = 0.05
    cloud_floor: float = 0.25
    noise_scale: float = 1.0
    demand_floor_kw: float = 0.02
    extra: dict = field(default_factory=dict)


# 12 prosumer archetypes: (base, morning, midday, evening, noise, pv_kwp), kW.
ARCHETYPES = [
    (0.10, 0.35, 0.40, 0.70, 0.045, 0.9),
    (0.14, 0.20, 0.55, 0.95, 0.060, 1.3),
    (0.08, 0.45, 0.30, 0.60, 0.040, 0.7),
    (0.12, 0.30, 0.50, 0.80, 0.055, 1.1),
    (0.16, 0.25, 0.65, 1.05, 0.070, 1.5),
    (0.09, 0.40, 0.35, 0.65, 0.045, 0.8),
    (0.11, 0.28, 0.45, 0.75, 0.050, 1.0),
    (0.15, 0.22, 0.60, 1.00, 0.065, 1.4),
    (0.10, 0.38, 0.42, 0.72, 0.048, 0.9),
    (0.13, 0.26, 0.52, 0.88, 0.058, 1.2),
    (0.07, 0.42, 0.28, 0.55, 0.038, 0.6),
    (0.12, 0.32, 0.48, 0.82, 0.052, 1.1),
]


def _bell(hours: np.ndarray, center_h: float, width_h: float) -> np.ndarray:
    return np.exp(-0.5 * ((hours - center_h) / width_h) ** 2)


def _ar1(rng: np.random.Generator, n: int, phi: float, sigma: float) -> np.ndarray:
    noise = rng.normal(0.0, sigma, size=n)
    out = np.empty(n)
    acc = 0.0
    scale = np.sqrt(1.0 - phi**2)
    for i in range(n):
        acc = phi * acc + scale * noise[i]
        out[i] = acc
    return out


def generate_synthetic(
    seed: int, n_nodes: int, days: int, params: SynthParams | None = None
) -> TimeSeriesSet:
    """Synthesize per-node demand and PV series, 12 archetypes cycled."""
    if n_nodes < 1 or days < 1:
        raise InputError("n_nodes and days must be >= 1")
    params = params or SynthParams()
    if params.step_min < 1 or 1440 % params.step_min:
        raise InputError("step_min must divide a day")
    rng = np.random.default_rng(seed)
    steps_per_day = 1440 // params.step_min
    t_total = days * steps_per_day

    minute = (np.arange(t_total) * params.step_min) % 1440
    hours = minute / 60.0
    day_index = (np.arange(t_total) * params.step_min) // 1440
    weekend = ((day_index + _start_dow(params.start)) % 7) >= 5

    # One shared cloud field: PV across the feeder sees the same sky.
    cloudiness = np.abs(_ar1(rng, t_total, phi=0.995, sigma=params.cloud_vol))
    cloud = np.clip(1.0 - cloudiness, params.cloud_floor, 1.0)

    span = PV_DUSK_H - PV_DAWN_H
    x = (hours - PV_DAWN_H) / span
    pv_shape_base = np.where((x > 0) & (x < 1), np.sin(np.pi * np.clip(x, 0, 1)) ** 1.4, 0.0)

    phases = rng.integers(0, 3, size=n_nodes)
    node_mult = 1.0 + rng.uniform(-params.node_spread, params.node_spread, size=n_nodes)

    demand = np.empty((t_total, n_nodes))
    pv = np.empty((t_total, n_nodes))
    for i in range(n_nodes):
        base, morning, midday, evening, noise_kw, pv_kwp = ARCHETYPES[i % len(ARCHETYPES)]
        shape = (
            base
            + morning * _bell(hours, 7.6, 1.1)
            + midday * _bell(hours, 12.8, 2.2)
            + evening * _bell(hours, 19.2, 1.7)
        )
        shape = shape * np.where(weekend, 1.07, 1.0)
        noise = _ar1(rng, t_total, phi=0.97, sigma=noise_kw * params.noise_scale)
        demand[:, i] = np.clip(
            params.demand_scale * node_mult[i] * shape + noise,
            params.demand_floor_kw,
            None,
        )
        pv[:, i] = (
            params.pv_scale
            * params.phase_pv_scale[phases[i]]
            * node_mult[i]
            * pv_kwp
            * pv_shape_base
            * cloud
        )

    return TimeSeriesSet(
        node_ids=list(range(n_nodes)),
        phases=phases,
        start=np.datetime64(params.start),
        step_min=params.step_min,
        demand_kw=demand,
        pv_kw=pv,
    )


def _start_dow(start: str) -> int:
    # numpy weekday: days since 1970-01-01 (a Thursday); Monday == 0.
    return (np.datetime64(start).astype("datetime64[D]").astype(int) + 3) % 7


def write_timeseries(ts: TimeSeriesSet, path: str | Path) -> None:
    """Long-format delimited text with units in the column headers."""
    times = ts.times()
    with open(path, "w") as fh:
        fh.write(",".join(SCHEMA) + "\n")
        for t in range(ts.n_steps):
            stamp = np.datetime_as_string(times[t], unit="m")
            for j, node in enumerate(ts.node_ids):
                fh.write(
                    f"{stamp},{node},{PHASE_NAMES[ts.phases[j]]},"
                    f"{ts.demand_kw[t, j]:.6g},{ts.pv_kw[t, j]:.6g}\n"
                )


def ingest_timeseries(path: str | Path, resolution_min: int = 1) -> TimeSeriesSet:
    """Load, validate, and (if needed) downsample a time-series file."""
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"{path} does not parse: {exc}") from exc
    if list(frame.columns) != SCHEMA:
        raise InputError(
            f"{path}: schema mismatch, expected columns {SCHEMA}, got {list(frame.columns)}"
        )
    if frame[["demand_kw", "pv_kw"]].lt(0).any().any():
        raise InputError(f"{path}: negative demand or pv values")

    frame["timestamp"] = pd.to_datetime(frame["timestamp"])
    stamps = pd.Index(sorted(frame["timestamp"].unique()))
    if len(stamps) < 2:
        raise InputError(f"{path}: need at least two time steps")
    deltas = np.diff(stamps.values).astype("timedelta64[m]").astype(int)
    step = int(deltas.min())
    if step <= 0:
        raise InputError(f"{path}: non-increasing timestamps")
    gaps = stamps[1:][deltas != step]
    if len(gaps):
        preview = ", ".join(str(g) for g in gaps[:4])
        raise InputError(f"{path}: sampling gaps before {preview}")

    node_ids = sorted(frame["node_id"].unique())
    demand = frame.pivot(index="timestamp", columns="node_id", values="demand_kw")
    pv = frame.pivot(index="timestamp", columns="node_id", values="pv_kw")
    if demand.isna().any().any() or pv.isna().any().any():
        missing = demand.isna().sum().sum() + pv.isna().sum().sum()
        raise InputError(f"{path}: {missing} missing node/step records")
    demand = demand[node_ids]
    pv = pv[node_ids]

    phase_map = frame.groupby("node_id")["phase"].first()
    phases = np.array([PHASE_NAMES.index(str(phase_map[n]).lower()) for n in node_ids])

    ts = TimeSeriesSet(
        node_ids=[int(n) for n in node_ids],
        phases=phases,
        start=np.datetime64(stamps[0]),
        step_min=step,
        demand_kw=demand.to_numpy(),
        pv_kw=pv.to_numpy(),
    )
    if resolution_min != step:
        if resolution_min < step:
            raise InputError(
                f"{path}: file resolution {step} min coarser than requested "
                f"{resolution_min} min"
            )
        ts = ts.resample(resolution_min)
    return ts
