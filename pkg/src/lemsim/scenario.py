"""Closed-loop 24-hour simulation: forecast, clear, attack, detect, mitigate.

The timeline runs 15-minute market intervals with 1-minute measurement and
detection sub-steps. Each interval issues hour-ahead forecasts from the
measured history, clears the primary market, then simulates the true power
flow minute by minute with any attack applied. The first persistent feeder
mismatch triggers mitigation: the coefficient update runs on measured vs
scheduled PCC, attacked nodes lose their PV capacity, and the market is
re-dispatched within the same interval. Mitigated coefficients stay in
force for the rest of the horizon (configurable).

Everything is driven by one seed: data synthesis, federated training,
flexibility and resilience-score draws. Replaying a config reproduces the
result bit for bit.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import SynthParams, TimeSeriesSet, generate_synthetic, ingest_timeseries
from .detect import NodeFlag
from .errors import InputError
from .forecast import (
    HORIZONS,
    ModelParams,
    QuantileForecast,
    feature_matrix,
    make_training_set,
    n_features_for,
    predict_quantiles,
    train_federated,
)
from .market import (
    Bid,
    Coefficients,
    MitigationContext,
    assemble_acopf,
    clear_market,
    mitigate_redispatch,
    participation_directions,
)
from .netmodel import Network, load_network
from .powerflow import InjectionSet, solve_power_flow

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

SCHEMA_VERSION = 1
MINUTES_PER_DAY = 1440
PRODUCTS = (
    ("demand", "day-ahead"),
    ("pv", "day-ahead"),
    ("demand", "hour-ahead"),
    ("pv", "hour-ahead"),
)


@dataclass(eq=False)
class AttackEvent:
    targets: list[int] | str  # bus ids, or "all" for every PV-equipped node
    start_min: int  # minute of the simulated day
    duration_min: int
    kind: str = "pv-dos"

    def __post_init__(self):
        if self.kind != "pv-dos":
            raise InputError(f"unsupported attack kind {self.kind!r}")
        if not 0 <= self.start_min < MINUTES_PER_DAY:
            raise InputError("attack start must fall within the simulated day")
        if self.duration_min < 1:
            raise InputError("attack duration must be >= 1 minute")

    def active(self, minute: int) -> bool:
        return self.start_min <= minute < self.start_min + self.duration_min


def apply_attack(
    injections: InjectionSet, event: AttackEvent, t_min: int, positions: list[int] | None = None
) -> InjectionSet:
    """Zero the PV component of targeted rows while the event is active."""
    if not event.active(t_min):
        return injections
    if injections.pv is None:
        raise InputError("injections carry no PV component to attack")
    targets = positions if positions is not None else event.targets
    if isinstance(targets, str):
        raise InputError("attack targets must be resolved to node positions")
    s = injections.s.copy()
    pv = injections.pv.copy()
    n = s.shape[0]
    for pos in targets:
        if not 0 <= pos < n:
            raise InputError(f"attack target {pos} is not a network node")
        s[pos] -= pv[pos]
        pv[pos] = 0.0
    return InjectionSet(s=s, pv=pv)


@dataclass(eq=False)
class ScenarioConfig:
    network: Network
    seed: int = 42
    interval_min: int = 15
    solver: str = "central"
    mitigation_enabled: bool = True
    mitigation_persist: bool = True
    # data
    train_days: int = 28
    synth: SynthParams = field(default_factory=SynthParams)
    timeseries_path: str | None = None
    # forecasting
    fl_rounds: int = 12
    fl_epochs: int = 8
    fl_lr: float = 0.5
    fl_clients: int = 12
    # detector
    detect_k: float = 4.0
    detect_m: int = 3
    detect_theta_kw: float = 12.5
    detect_scale_floor_kw: float = 0.05
    # market
    alpha: float = 0.5
    beta: float = 0.6
    xi: float = 1.0
    mu_kw: float = 10.0
    rs_range: tuple = (0.5, 1.0)
    flex_range: tuple = (0.2, 0.4)
    attacks: list[AttackEvent] = field(default_factory=list)

    def __post_init__(self):
        if MINUTES_PER_DAY % self.interval_min:
            raise InputError("interval must divide the day")
        if not 0 <= self.flex_range[0] <= self.flex_range[1] <= 1:
            raise InputError("flex_range must satisfy 0 <= lo <= hi <= 1")


def _parse_clock(text: str) -> int:
    try:
        hh, mm = text.split(":")
        minute = int(hh) * 60 + int(mm)
    except ValueError:
        raise InputError(f"cannot parse clock time {text!r}") from None
    if not 0 <= minute < MINUTES_PER_DAY:
        raise InputError(f"clock time {text!r} outside the day")
    return minute


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Read the scenario configuration document (TOML)."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read scenario config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"scenario config {path} does not parse: {exc}") from exc

    sc = doc.get("scenario", {})
    net_section = doc.get("network", {})
    if "path" not in net_section:
        raise InputError("scenario config needs [network] path")
    network = load_network((path.parent / net_section["path"]).resolve())

    data = doc.get("data", {})
    synth_doc = dict(data.get("synth", {}))
    if "phase_pv_scale" in synth_doc:
        synth_doc["phase_pv_scale"] = tuple(synth_doc["phase_pv_scale"])
    synth = SynthParams(**synth_doc)

    fc = doc.get("forecast", {})
    det = doc.get("detector", {})
    mkt = doc.get("market", {})

    attacks = []
    for ad in doc.get("attack", []):
        start = ad.get("start", "12:30")
        start_min = _parse_clock(start) if isinstance(start, str) else int(start)
        attacks.append(
            AttackEvent(
                targets=ad.get("targets", "all"),
                start_min=start_min,
                duration_min=int(ad.get("duration_min", MINUTES_PER_DAY - start_min)),
                kind=ad.get("kind", "pv-dos"),
            )
        )

    return ScenarioConfig(
        network=network,
        seed=int(sc.get("seed", 42)),
        interval_min=int(sc.get("interval_min", 15)),
        solver=sc.get("solver", "central"),
        mitigation_enabled=bool(sc.get("mitigation", True)),
        mitigation_persist=bool(sc.get("mitigation_persist", True)),
        train_days=int(data.get("train_days", 28)),
        synth=synth,
        timeseries_path=data.get("path"),
        fl_rounds=int(fc.get("rounds", 12)),
        fl_epochs=int(fc.get("epochs_per_round", 8)),
        fl_lr=float(fc.get("lr", 0.5)),
        fl_clients=int(fc.get("clients", 12)),
        detect_k=float(det.get("k", 4.0)),
        detect_m=int(det.get("m", 3)),
        detect_theta_kw=float(det.get("theta_kw", 12.5)),
        detect_scale_floor_kw=float(det.get("scale_floor_kw", 0.05)),
        alpha=float(mkt.get("alpha", 0.5)),
        beta=float(mkt.get("beta", 0.6)),
        xi=float(mkt.get("xi", 1.0)),
        mu_kw=float(mkt.get("mu", 10.0)),
        rs_range=tuple(mkt.get("rs_range", (0.5, 1.0))),
        flex_range=tuple(mkt.get("flex_range", (0.2, 0.4))),
        attacks=attacks,
    )


@dataclass(eq=False)
class SimulationResult:
    schema_version: int
    seed: int
    node_ids: list[int]
    node_phases: np.ndarray  # (n,)
    # minute-resolution traces over the simulated day
    pcc_kw: np.ndarray  # (1440, 3)
    losses_kw: np.ndarray  # (1440, 3)
    mismatch_kw: np.ndarray  # (1440,)
    detection_state: np.ndarray  # (1440,) 0 nominal, 1 flagged, 2 mitigated
    # interval-resolution dispatch records
    g_sched_kw: np.ndarray  # (n_intervals, n)
    c_sched_kw: np.ndarray  # (n_intervals, n)
    objective: np.ndarray  # (n_intervals,)
    pcc_linear_kw: np.ndarray  # (n_intervals, 3)
    coeff_state: list[str]  # "nominal" | "mitigated" per interval
    # detection output
    node_flags: dict[int, list[NodeFlag]]
    feeder_onset_min: int | None
    events: list[dict]
    pv_snapshot_kw: np.ndarray  # (n,) delivered PV at the snapshot minute
    snapshot_min: int
    dayahead_demand_kw: np.ndarray  # (96,) aggregate median forecast
    dayahead_pv_kw: np.ndarray  # (96,)
    summary: dict

    def total_import_at(self, minute: int) -> float:
        return float(self.pcc_kw[minute].sum())

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "node_ids": list(map(int, self.node_ids)),
            "node_phases": self.node_phases.tolist(),
            "minutes": {
                "pcc_kw": self.pcc_kw.tolist(),
                "losses_kw": self.losses_kw.tolist(),
                "mismatch_kw": self.mismatch_kw.tolist(),
                "detection_state": self.detection_state.tolist(),
            },
            "intervals": {
                "g_sched_kw": self.g_sched_kw.tolist(),
                "c_sched_kw": self.c_sched_kw.tolist(),
                "objective": self.objective.tolist(),
                "pcc_linear_kw": self.pcc_linear_kw.tolist(),
                "coeff_state": list(self.coeff_state),
            },
            "detection": {
                "node_flags": {
                    str(nid): [{"onset_min": f.onset, "count": f.count} for f in flags]
                    for nid, flags in sorted(self.node_flags.items())
                },
                "feeder_onset_min": self.feeder_onset_min,
            },
            "events": self.events,
            "pv_snapshot_kw": self.pv_snapshot_kw.tolist(),
            "snapshot_min": self.snapshot_min,
            "dayahead_demand_kw": self.dayahead_demand_kw.tolist(),
            "dayahead_pv_kw": self.dayahead_pv_kw.tolist(),
            "summary": self.summary,
        }


def prepare_dataset(config: ScenarioConfig) -> TimeSeriesSet:
    """Synthesize (or load) the 1-minute dataset covering training + eval."""
    prosumers = [
        b.id for i, b in enumerate(config.network.buses)
        if i != config.network.slack_index
    ]
    if config.timeseries_path:
        ts = ingest_timeseries(config.timeseries_path, resolution_min=1)
        if set(ts.node_ids) != set(prosumers):
            raise InputError("time-series node ids do not match the network prosumers")
        return ts
    days = config.train_days + 2  # warmup day + evaluation day
    ts = generate_synthetic(config.seed, len(prosumers), days, config.synth)
    ts.node_ids = list(prosumers)
    return ts


def train_products(
    config: ScenarioConfig, dataset: TimeSeriesSet, log: list | None = None
) -> dict[tuple[str, str], ModelParams]:
    """Train the four federated forecast products on the training window."""
    n_clients = min(config.fl_clients, dataset.n_nodes)
    train_steps_1m = config.train_days * MINUTES_PER_DAY
    models = {}
    for k, (target, horizon) in enumerate(PRODUCTS):
        _, step_min = HORIZONS[horizon]
        source = dataset if step_min == 1 else dataset.resample(step_min)
        steps = train_steps_1m // step_min
        clients = []
        for cid in range(n_clients):
            series = (source.demand_kw if target == "demand" else source.pv_kw)[
                :steps, cid
            ]
            clients.append(
                make_training_set(series, cid, target, horizon, step_min)
            )
        product_log = [] if log is not None else None
        models[(target, horizon)] = train_federated(
            clients,
            rounds=config.fl_rounds,
            epochs_per_round=config.fl_epochs,
            lr=config.fl_lr,
            seed=config.seed + k,
            log=product_log,
        )
        if log is not None:
            log.append({"product": f"{target}/{horizon}", "rounds": product_log})
    return models


class _RunCounter:
    """Streaming persistence counter mirroring detect._flag_runs."""

    def __init__(self, m: int):
        self.m = m
        self.run = 0
        self.flags: list[NodeFlag] = []

    def step(self, exceeded: bool, minute: int) -> bool:
        """Returns True the moment the persistence requirement is met."""
        if exceeded:
            self.run += 1
            if self.run == self.m:
                self.flags.append(NodeFlag(onset=minute, count=self.run))
                return True
            if self.run > self.m and self.flags:
                last = self.flags[-1]
                self.flags[-1] = NodeFlag(onset=last.onset, count=self.run)
        else:
            self.run = 0
        return False


def run_timeline(
    config: ScenarioConfig,
    dataset: TimeSeriesSet | None = None,
    models: dict | None = None,
) -> SimulationResult:
    """Simulate the evaluation day end to end."""
    network = config.network
    slack = network.slack_index
    positions = [i for i in range(network.n_bus) if i != slack]
    node_ids = [network.buses[i].id for i in positions]
    n = len(positions)

    if dataset is None:
        dataset = prepare_dataset(config)
    if dataset.step_min != 1:
        raise InputError("simulation needs 1-minute source data")
    if dataset.n_nodes != n:
        raise InputError("dataset node count does not match network prosumers")
    if models is None:
        models = train_products(config, dataset)

    day0 = (config.train_days + 1) * MINUTES_PER_DAY
    if dataset.n_steps < day0 + MINUTES_PER_DAY:
        raise InputError("dataset too short for training + warmup + evaluation day")

    phases = dataset.phases
    rng = np.random.default_rng([config.seed, 7])
    r_flex = rng.uniform(*config.flex_range, size=n)
    rs = rng.uniform(*config.rs_range, size=n)

    # Subscribed demand level per node: peak of the 15-minute training means.
    d15 = dataset.resample(15)
    subscribed = d15.demand_kw[: config.train_days * 96].max(axis=0)

    coeffs_nominal = Coefficients(
        node_ids=list(node_ids),
        alpha=np.full((n, 3), config.alpha),
        beta=np.full((n, 3), config.beta),
        xi=np.full(3, config.xi),
        mu=config.mu_kw,
        rs=rs,
    )

    # Resolve attack targets to dataset/node positions.
    pv_equipped = [j for j in range(n) if dataset.pv_kw[:, j].any()]
    resolved_attacks = []
    for event in config.attacks:
        if isinstance(event.targets, str):
            if event.targets != "all":
                raise InputError(f"unknown attack target set {event.targets!r}")
            tpos = list(pv_equipped)
        else:
            id_to_j = {nid: j for j, nid in enumerate(node_ids)}
            tpos = []
            for nid in event.targets:
                if nid not in id_to_j:
                    raise InputError(f"attack target {nid} is not a prosumer node")
                j = id_to_j[nid]
                if j not in pv_equipped:
                    raise InputError(f"attack target {nid} is not PV-equipped")
                tpos.append(j)
        resolved_attacks.append((event, tpos))

    # Measured history (training + warmup prefix is ground truth).
    meas_demand = dataset.demand_kw.copy()
    meas_pv = dataset.pv_kw.copy()

    hour_models = {t: models[(t, "hour-ahead")] for t in ("demand", "pv")}

    # Day-ahead products issued at the evaluation-day midnight (aggregates).
    da_demand = np.zeros(96)
    da_pv = np.zeros(96)
    issue15 = day0 // 15
    for j in range(n):
        for target, acc in (("demand", da_demand), ("pv", da_pv)):
            series = (d15.demand_kw if target == "demand" else d15.pv_kw)[:, j]
            x = feature_matrix(
                series, issue15, 96, 15, target == "pv", issue15 * 15
            )
            acc += predict_quantiles(models[(target, "day-ahead")], x).median

    n_intervals = MINUTES_PER_DAY // config.interval_min
    pcc_kw = np.zeros((MINUTES_PER_DAY, 3))
    losses_kw = np.zeros((MINUTES_PER_DAY, 3))
    mismatch_kw = np.zeros(MINUTES_PER_DAY)
    detection_state = np.zeros(MINUTES_PER_DAY, dtype=np.int8)
    g_sched_kw = np.zeros((n_intervals, n))
    c_sched_kw = np.zeros((n_intervals, n))
    objective = np.zeros(n_intervals)
    pcc_linear_kw = np.zeros((n_intervals, 3))
    coeff_state: list[str] = []

    pv_counters = {node_ids[j]: _RunCounter(config.detect_m) for j in range(n)}
    demand_counters = {node_ids[j]: _RunCounter(config.detect_m) for j in range(n)}
    feeder_counter = _RunCounter(config.detect_m)
    feeder_onset = None
    mitigated = False
    coeffs_in_force = coeffs_nominal
    attacked_nodes: set[int] = set()
    events: list[dict] = []
    for event, tpos in resolved_attacks:
        events.append(
            {
                "type": "attack-start",
                "minute": event.start_min,
                "targets": [node_ids[j] for j in tpos],
            }
        )

    snapshot_min = (
        max(0, min(e.start_min for e, _ in resolved_attacks) - 1)
        if resolved_attacks
        else 12 * 60
    )
    pv_snapshot = np.zeros(n)

    steps_per_interval = config.interval_min

    for t_int in range(n_intervals):
        issue = day0 + t_int * config.interval_min

        # Hour-ahead forecasts per node from the measured history.
        fc_demand: list[QuantileForecast] = []
        fc_pv: list[QuantileForecast] = []
        for j in range(n):
            for target, series, acc in (
                ("demand", meas_demand[:, j], fc_demand),
                ("pv", meas_pv[:, j], fc_pv),
            ):
                x = feature_matrix(series, issue, 60, 1, target == "pv", issue)
                acc.append(
                    predict_quantiles(
                        hour_models[target], x, node_id=node_ids[j],
                        start_min=issue - day0,
                    )
                )

        # Interval-mean forecasts drive the clearing.
        d_hat = np.array(
            [fc_demand[j].median[:steps_per_interval].mean() for j in range(n)]
        )
        d_hat = np.clip(d_hat, 0.0, None)
        g_hat = np.array(
            [fc_pv[j].median[:steps_per_interval].mean() for j in range(n)]
        )
        g_hat = np.clip(g_hat, 0.0, None)
        if mitigated:
            for nid in attacked_nodes:
                g_hat[node_ids.index(nid)] = 0.0

        demand_arr = np.zeros((network.n_bus, 3))
        bids = []
        for j in range(n):
            pos, ph = positions[j], int(phases[j])
            demand_arr[pos, ph] = d_hat[j]
            flex = min(r_flex[j] * subscribed[j], d_hat[j])
            bids.append(
                Bid(
                    node_id=node_ids[j],
                    phase=ph,
                    flexibility_kw=flex,
                    pv_capacity_kw=g_hat[j],
                )
            )

        problem = assemble_acopf(network, bids, coeffs_in_force, demand_arr)
        dispatch = clear_market(problem, config.solver)
        scheduled_pcc = dispatch.pcc.copy()
        allowance = float(dispatch.losses.sum())

        for tau in range(steps_per_interval):
            minute = t_int * config.interval_min + tau
            gi = day0 + minute

            d_true = dataset.demand_kw[gi]
            pv_avail = dataset.pv_kw[gi]
            load = np.zeros((network.n_bus, 3))
            pv_net = np.zeros((network.n_bus, 3))
            for j in range(n):
                pos, ph = positions[j], int(phases[j])
                load[pos, ph] = max(d_true[j] - dispatch.c[pos, ph], 0.0)
                pv_net[pos, ph] = min(dispatch.g[pos, ph], pv_avail[j])

            inj = InjectionSet(
                s=network.kw_to_pu(pv_net - load).astype(complex),
                pv=network.kw_to_pu(pv_net),
            )
            for event, tpos in resolved_attacks:
                inj = apply_attack(inj, event, minute, [positions[j] for j in tpos])

            flow = solve_power_flow(network, inj)
            pcc_kw[minute] = flow.pcc
            losses_kw[minute] = flow.losses

            pv_delivered = np.array(
                [
                    network.pu_to_kw(inj.pv[positions[j], int(phases[j])])
                    for j in range(n)
                ]
            )
            meas_demand[gi] = d_true
            meas_pv[gi] = pv_delivered
            if minute == snapshot_min:
                pv_snapshot = pv_delivered.copy()

            # Node-level residual detection.
            for j in range(n):
                nid = node_ids[j]
                pv_med = fc_pv[j].median[tau]
                pv_scale = max(
                    fc_pv[j].spread[tau], config.detect_scale_floor_kw
                )
                pv_counters[nid].step(
                    abs(pv_delivered[j] - pv_med) > config.detect_k * pv_scale,
                    minute,
                )
                d_med = fc_demand[j].median[tau]
                d_scale = max(
                    fc_demand[j].spread[tau], config.detect_scale_floor_kw
                )
                demand_counters[nid].step(
                    abs(d_true[j] - d_med) > config.detect_k * d_scale, minute
                )

            agg = sum(fc_demand[j].median[tau] for j in range(n)) - sum(
                fc_pv[j].median[tau] for j in range(n)
            )
            mismatch_kw[minute] = flow.pcc.sum() - agg - allowance
            feeder_hit = feeder_counter.step(
                abs(mismatch_kw[minute]) > config.detect_theta_kw, minute
            )
            if feeder_hit and feeder_onset is None:
                feeder_onset = minute
                events.append({"type": "feeder-flag", "minute": minute})

            if (
                feeder_onset is not None
                and config.mitigation_enabled
                and not mitigated
            ):
                flagged_pv = {
                    nid for nid, counter in pv_counters.items() if counter.flags
                }
                if flagged_pv:
                    attacked_nodes = flagged_pv
                else:
                    attacked_nodes = {
                        node_ids[j] for j in range(n) if g_hat[j] > 0
                    }
                ctx = MitigationContext(
                    p_pcc_forecast=scheduled_pcc,
                    p_pcc_measured=flow.pcc.copy(),
                    delta_dirs=participation_directions(bids, node_ids),
                )
                dispatch, mit_coeffs = mitigate_redispatch(
                    network,
                    bids,
                    coeffs_in_force,
                    ctx,
                    demand_arr,
                    attacked_nodes,
                    config.solver,
                )
                coeffs_in_force = mit_coeffs
                mitigated = True
                events.append(
                    {
                        "type": "mitigation",
                        "minute": minute,
                        "attacked_nodes": sorted(attacked_nodes),
                        "mean_gamma": float(
                            np.mean(mit_coeffs.alpha / coeffs_nominal.alpha)
                        ),
                    }
                )

            detection_state[minute] = (
                2 if mitigated else (1 if feeder_onset is not None else 0)
            )

        g_sched_kw[t_int] = [
            dispatch.g[positions[j], int(phases[j])] for j in range(n)
        ]
        c_sched_kw[t_int] = [
            dispatch.c[positions[j], int(phases[j])] for j in range(n)
        ]
        objective[t_int] = dispatch.objective
        pcc_linear_kw[t_int] = dispatch.pcc_linear
        coeff_state.append("mitigated" if mitigated else "nominal")

        if mitigated and not config.mitigation_persist:
            coeffs_in_force = coeffs_nominal

    node_flags = {}
    for nid in node_ids:
        flags = list(pv_counters[nid].flags) + list(demand_counters[nid].flags)
        if flags:
            node_flags[nid] = sorted(flags, key=lambda f: f.onset)

    summary = {
        "total_import_kwh": float(pcc_kw.sum() / 60.0),
        "total_losses_kwh": float(losses_kw.sum() / 60.0),
        "peak_import_kw": float(pcc_kw.sum(axis=1).max()),
        "total_curtailment_kw_intervals": float(c_sched_kw.sum()),
        "feeder_onset_min": feeder_onset,
        "n_node_flags": int(sum(len(v) for v in node_flags.values())),
        "mitigated": bool(mitigated),
    }

    return SimulationResult(
        schema_version=SCHEMA_VERSION,
        seed=config.seed,
        node_ids=node_ids,
        node_phases=phases.copy(),
        pcc_kw=pcc_kw,
        losses_kw=losses_kw,
        mismatch_kw=mismatch_kw,
        detection_state=detection_state,
        g_sched_kw=g_sched_kw,
        c_sched_kw=c_sched_kw,
        objective=objective,
        pcc_linear_kw=pcc_linear_kw,
        coeff_state=coeff_state,
        node_flags=node_flags,
        feeder_onset_min=feeder_onset,
        events=events,
        pv_snapshot_kw=pv_snapshot,
        snapshot_min=snapshot_min,
        dayahead_demand_kw=da_demand,
        dayahead_pv_kw=da_pv,
        summary=summary,
    )


def variant(config: ScenarioConfig, **changes) -> ScenarioConfig:
    """Config copy with field overrides (deep-copies mutable members)."""
    base = copy.copy(config)
    base.attacks = list(config.attacks)
    return replace(base, **changes)
