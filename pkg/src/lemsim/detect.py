"""Two-level threshold detector on forecast residuals.

Node level: a node is flagged when its residual exceeds k times the
forecast interquantile spread (floored) for m consecutive steps. Feeder
level: the measured PCC import is compared against the aggregated median
forecasts net of a loss allowance; persistent mismatch beyond theta kW
raises the feeder flag. Thresholds are relative to forecast uncertainty,
so the flag pattern is invariant to joint rescaling of residuals and
spreads (while the scale floor stays inactive).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .forecast import QuantileForecast

DEFAULT_K = 4.0
DEFAULT_M = 3
DEFAULT_SCALE_FLOOR_KW = 0.05


@dataclass(eq=False)
class ResidualSeries:
    node_id: int
    target: str
    times: np.ndarray  # absolute minutes
    residual: np.ndarray  # measured - median forecast, kW
    scale: np.ndarray  # interquantile spread q90 - q10, kW

    def __post_init__(self):
        self.times = np.asarray(self.times)
        self.residual = np.asarray(self.residual, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if not (len(self.times) == len(self.residual) == len(self.scale)):
            raise InputError("residual series components misaligned")
        if np.any(self.scale < 0):
            raise InputError("interquantile scale must be >= 0")


@dataclass(frozen=True)
class NodeFlag:
    onset: int  # time value at which the persistence requirement is met
    count: int  # total consecutive exceedances in the run


@dataclass(eq=False)
class DetectionReport:
    node_flags: dict[int, list[NodeFlag]]
    feeder_onset: int | None
    feeder_mismatch: np.ndarray  # kW
    thresholds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "node_flags": {
                str(node): [{"onset_min": f.onset, "count": f.count} for f in flags]
                for node, flags in sorted(self.node_flags.items())
            },
            "feeder_onset_min": self.feeder_onset,
            "thresholds": dict(self.thresholds),
        }


def node_residuals(
    forecast: QuantileForecast, measured: np.ndarray, times=None
) -> ResidualSeries:
    """Elementwise residual against the median and interquantile scale."""
    measured = np.asarray(measured, dtype=float)
    if len(measured) != forecast.quantiles.shape[0]:
        raise InputError(
            f"measured series ({len(measured)}) misaligned with forecast "
            f"({forecast.quantiles.shape[0]} steps)"
        )
    if times is None:
        times = forecast.start_min + forecast.step_min * np.arange(len(measured))
    return ResidualSeries(
        node_id=forecast.node_id,
        target=forecast.target,
        times=np.asarray(times),
        residual=measured - forecast.median,
        scale=forecast.spread,
    )


def _flag_runs(exceed: np.ndarray, times: np.ndarray, m: int) -> list[NodeFlag]:
    flags = []
    run = 0
    for i, hit in enumerate(exceed):
        run = run + 1 if hit else 0
        if run and (i + 1 == len(exceed) or not exceed[i + 1]):
            if run >= m:
                flags.append(NodeFlag(onset=int(times[i - run + m]), count=run))
            run = 0
    return flags


def detect_node(
    residuals: ResidualSeries,
    k: float = DEFAULT_K,
    m: int = DEFAULT_M,
    scale_floor: float = DEFAULT_SCALE_FLOOR_KW,
) -> list[NodeFlag]:
    """Flag runs of m consecutive residuals beyond k times the scale."""
    if k <= 0:
        raise InputError("k must be > 0")
    if m < 1:
        raise InputError("m must be >= 1")
    threshold = k * np.maximum(residuals.scale, scale_floor)
    exceed = np.abs(residuals.residual) > threshold
    return _flag_runs(exceed, residuals.times, m)


def detect_feeder(
    pcc_measured: np.ndarray,
    node_forecasts: list[QuantileForecast],
    loss_allowance: np.ndarray,
    theta: float,
    m: int = DEFAULT_M,
    times=None,
) -> tuple[int | None, np.ndarray]:
    """Aggregate-vs-PCC mismatch check.

    mismatch_t = sum_phases(pcc) - (sum demand medians - sum pv medians)
                 - loss_allowance; the flag needs m consecutive steps with
    |mismatch| > theta.
    """
    pcc_measured = np.atleast_2d(np.asarray(pcc_measured, dtype=float))
    horizon = pcc_measured.shape[0]
    loss_allowance = np.broadcast_to(
        np.asarray(loss_allowance, dtype=float), (horizon,)
    )
    agg = np.zeros(horizon)
    for fc in node_forecasts:
        if fc.quantiles.shape[0] != horizon:
            raise InputError(
                f"forecast for node {fc.node_id} misaligned with PCC horizon"
            )
        if fc.target == "demand":
            agg += fc.median
        elif fc.target == "pv":
            agg -= fc.median
        else:
            raise InputError(f"unknown forecast target {fc.target!r}")
    mismatch = pcc_measured.sum(axis=1) - agg - loss_allowance
    if times is None:
        times = np.arange(horizon)
    exceed = np.abs(mismatch) > theta
    flags = _flag_runs(exceed, np.asarray(times), m)
    return (flags[0].onset if flags else None), mismatch
