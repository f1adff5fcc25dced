"""Federated quantile forecasting of prosumer demand and PV.

Each client trains a shared linear multi-quantile regressor on its own
lag/calendar features by full-batch subgradient descent on the mean
pinball loss (one head per quantile level, backtracking step control so
the training loss never increases). Rounds of broadcast -> local train ->
sample-weighted averaging produce one global model per forecast product:
day-ahead and hour-ahead, demand and PV. Crossing quantiles are repaired
by per-step sorting; PV forecasts clip at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, SolverError

QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)
MEDIAN_IDX = QUANTILES.index(0.5)

# Product shapes: day-ahead runs in 15-minute steps, hour-ahead in 1-minute.
HORIZONS = {"day-ahead": (96, 15), "hour-ahead": (60, 1)}

# Daylight window for the deterministic clear-sky proxy (hours).
SUNRISE_H = 6.2
SUNSET_H = 19.8


def clearsky_factor(minute_of_day) -> np.ndarray:
    """Deterministic clear-sky bell in [0, 1] over the daylight window."""
    t = np.asarray(minute_of_day, dtype=float) / 60.0
    span = SUNSET_H - SUNRISE_H
    x = (t - SUNRISE_H) / span
    bell = np.where((x > 0) & (x < 1), np.sin(np.pi * np.clip(x, 0, 1)) ** 1.3, 0.0)
    return bell


def pinball_loss(pred, actual, q: float):
    """Asymmetric quantile loss; zero iff pred equals actual."""
    if not 0.0 < q < 1.0:
        raise InputError(f"quantile level must lie in (0, 1), got {q}")
    err = np.asarray(actual, dtype=float) - np.asarray(pred, dtype=float)
    return np.where(err >= 0, q * err, (q - 1.0) * err)


@dataclass(eq=False)
class ModelParams:
    """Flat weight vector for the shared multi-quantile linear regressor."""

    weights: np.ndarray  # flat, length n_heads * n_features
    n_features: int
    target: str  # "demand" | "pv"
    horizon: str  # "day-ahead" | "hour-ahead"
    quantiles: tuple = QUANTILES

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.weights.size != len(self.quantiles) * self.n_features:
            raise InputError("weight vector does not match head/feature counts")
        if not np.all(np.isfinite(self.weights)):
            raise InputError("model weights must be finite")
        if self.horizon not in HORIZONS:
            raise InputError(f"unknown horizon {self.horizon!r}")

    @property
    def w(self) -> np.ndarray:
        return self.weights.reshape(len(self.quantiles), self.n_features)


@dataclass(eq=False)
class LocalDataset:
    client_id: int
    features: np.ndarray  # (m, d)
    targets: np.ndarray  # (m,)
    resolution_min: int
    target: str = "demand"
    horizon: str = "day-ahead"

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if len(self.targets) < 1:
            raise InputError(f"client {self.client_id}: dataset is empty")
        if self.features.shape[0] != len(self.targets):
            raise InputError(f"client {self.client_id}: features/targets misaligned")

    @property
    def sample_count(self) -> int:
        return len(self.targets)


@dataclass(eq=False)
class QuantileForecast:
    node_id: int
    target: str
    horizon: str
    quantiles: np.ndarray  # (T, n_levels), monotone per row
    start_min: int  # absolute minute of the first step
    step_min: int
    levels: tuple = QUANTILES

    def __post_init__(self):
        self.quantiles = np.atleast_2d(np.asarray(self.quantiles, dtype=float))

    @property
    def median(self) -> np.ndarray:
        return self.quantiles[:, MEDIAN_IDX]

    def level(self, q: float) -> np.ndarray:
        return self.quantiles[:, self.levels.index(q)]

    @property
    def spread(self) -> np.ndarray:
        """Interquantile width q90 - q10 used as the detection scale."""
        return self.quantiles[:, -1] - self.quantiles[:, 0]


def init_params(
    n_features: int, target: str, horizon: str, seed: int = 0
) -> ModelParams:
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, 1e-3, size=len(QUANTILES) * n_features)
    return ModelParams(
        weights=weights, n_features=n_features, target=target, horizon=horizon
    )


def _mean_pinball(w: np.ndarray, x: np.ndarray, y: np.ndarray, quantiles) -> float:
    total = 0.0
    for k, q in enumerate(quantiles):
        total += float(np.mean(pinball_loss(x @ w[k], y, q)))
    return total / len(quantiles)


def _pinball_gradient(w: np.ndarray, x: np.ndarray, y: np.ndarray, quantiles) -> np.ndarray:
    """Subgradient of the mean pinball loss w.r.t. each head's weights."""
    m = len(y)
    grad = np.zeros_like(w)
    for k, q in enumerate(quantiles):
        err = y - x @ w[k]
        g_pred = np.where(err > 0, -q, np.where(err < 0, 1.0 - q, 0.0))
        grad[k] = x.T @ g_pred / (m * len(quantiles))
    return grad


def local_train(
    params: ModelParams,
    data: LocalDataset,
    epochs: int = 50,
    lr: float = 0.5,
) -> ModelParams:
    """Full-batch gradient descent on the mean pinball loss.

    The step direction is preconditioned by the client's feature Gram
    matrix (gradient descent in feature-whitened coordinates), which makes
    the strongly collinear lag features tractable; a backtracking line
    search guarantees a non-increasing training loss. A step that cannot
    improve the loss at any scale ends training.
    """
    if data.features.shape[1] != params.n_features:
        raise InputError(
            f"client {data.client_id}: feature dimension "
            f"{data.features.shape[1]} != model {params.n_features}"
        )
    w = params.w.copy()
    x, y = data.features, data.targets
    gram = x.T @ x / len(y)
    # Spectral pseudo-inverse: degenerate feature directions (collinear
    # lags, night-time zeros) get no step at all instead of a huge one.
    evals, evecs = np.linalg.eigh(gram)
    keep = evals > 1e-7 * evals.max()
    precond = (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T
    loss = _mean_pinball(w, x, y, params.quantiles)
    if not np.isfinite(loss):
        raise SolverError(
            f"client {data.client_id}: non-finite training loss",
            diagnostics={"loss": loss},
        )
    for _ in range(epochs):
        grad_raw = _pinball_gradient(w, x, y, params.quantiles)
        grad = grad_raw @ precond
        step = lr
        improved = False
        for _ in range(40):
            w_try = w - step * grad
            loss_try = _mean_pinball(w_try, x, y, params.quantiles)
            if loss_try <= loss + 1e-15:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        # Continue halving while it still helps: near the piecewise-linear
        # kinks the first improving step badly overshoots the ray minimum.
        while step > 1e-14:
            w_half = w - 0.5 * step * grad
            loss_half = _mean_pinball(w_half, x, y, params.quantiles)
            if loss_half >= loss_try:
                break
            step *= 0.5
            w_try, loss_try = w_half, loss_half
        w, loss = w_try, loss_try
        if not np.isfinite(loss):
            raise SolverError(
                f"client {data.client_id}: training loss diverged",
                diagnostics={"loss": loss},
            )
    return ModelParams(
        weights=w.reshape(-1),
        n_features=params.n_features,
        target=params.target,
        horizon=params.horizon,
        quantiles=params.quantiles,
    )


def fed_avg(updates: list[tuple[ModelParams, int]]) -> ModelParams:
    """Sample-count-weighted elementwise mean of client parameters."""
    if not updates:
        raise InputError("fed_avg needs at least one update")
    first = updates[0][0]
    total = sum(count for _, count in updates)
    if total <= 0:
        raise InputError("total sample count must be positive")
    acc = np.zeros_like(first.weights)
    for params, count in updates:
        if params.weights.shape != first.weights.shape:
            raise InputError("client parameter dimensions differ")
        acc += params.weights * (count / total)
    return ModelParams(
        weights=acc,
        n_features=first.n_features,
        target=first.target,
        horizon=first.horizon,
        quantiles=first.quantiles,
    )


def train_federated(
    clients: list[LocalDataset],
    rounds: int = 20,
    epochs_per_round: int = 10,
    lr: float = 0.5,
    seed: int = 0,
    log: list | None = None,
) -> ModelParams:
    """Broadcast -> local train -> weighted average, for `rounds` rounds."""
    if not clients:
        raise InputError("train_federated needs at least one client")
    d = clients[0].features.shape[1]
    global_params = init_params(d, clients[0].target, clients[0].horizon, seed=seed)
    for rnd in range(1, rounds + 1):
        updates = []
        client_losses = []
        for client in clients:
            try:
                trained = local_train(global_params, client, epochs_per_round, lr)
            except SolverError as exc:
                raise SolverError(
                    f"round {rnd}, client {client.client_id}: {exc}",
                    diagnostics=exc.diagnostics,
                ) from exc
            updates.append((trained, client.sample_count))
            client_losses.append(
                _mean_pinball(trained.w, client.features, client.targets, QUANTILES)
            )
        global_params = fed_avg(updates)
        if log is not None:
            global_loss = float(
                np.average(
                    [
                        _mean_pinball(global_params.w, c.features, c.targets, QUANTILES)
                        for c in clients
                    ],
                    weights=[c.sample_count for c in clients],
                )
            )
            log.append(
                {
                    "round": rnd,
                    "client_losses": {
                        c.client_id: loss for c, loss in zip(clients, client_losses)
                    },
                    "global_loss": global_loss,
                }
            )
    return global_params


MODEL_SCHEMA_VERSION = 1


def save_model(params: ModelParams, path) -> None:
    """Versioned text document holding one forecast product's weights."""
    import json

    doc = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "target": params.target,
        "horizon": params.horizon,
        "n_features": params.n_features,
        "quantiles": list(params.quantiles),
        "weights": params.weights.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_model(path) -> ModelParams:
    import json

    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise InputError(
            f"{path}: unsupported model schema {doc.get('schema_version')}"
        )
    return ModelParams(
        weights=np.asarray(doc["weights"], dtype=float),
        n_features=int(doc["n_features"]),
        target=doc["target"],
        horizon=doc["horizon"],
        quantiles=tuple(doc["quantiles"]),
    )


def write_training_log(log: list[dict], path) -> None:
    """One delimited record per round: round, per-client loss, global loss."""
    if not log:
        return
    client_ids = sorted(log[0]["client_losses"])
    with open(path, "w") as fh:
        cols = ",".join(f"client_{cid}_loss" for cid in client_ids)
        fh.write(f"round,{cols},global_loss\n")
        for row in log:
            losses = ",".join(f"{row['client_losses'][cid]:.9g}" for cid in client_ids)
            fh.write(f"{row['round']},{losses},{row['global_loss']:.9g}\n")


def predict_quantiles(
    params: ModelParams,
    features: np.ndarray,
    horizon: str | None = None,
    node_id: int = -1,
    start_min: int = 0,
) -> QuantileForecast:
    """Per-step quantile predictions, sorted monotone; PV clipped at zero."""
    horizon = horizon or params.horizon
    if horizon not in HORIZONS:
        raise InputError(f"unknown horizon {horizon!r}")
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if x.shape[1] != params.n_features:
        raise InputError(
            f"feature dimension {x.shape[1]} != model {params.n_features}"
        )
    preds = x @ params.w.T  # (T, n_heads)
    preds = np.sort(preds, axis=1)
    if params.target == "pv":
        preds = np.clip(preds, 0.0, None)
    _, step_min = HORIZONS[horizon]
    return QuantileForecast(
        node_id=node_id,
        target=params.target,
        horizon=horizon,
        quantiles=preds,
        start_min=start_min,
        step_min=step_min,
        levels=params.quantiles,
    )


# ---------------------------------------------------------------------------
# Feature construction


def feature_matrix(
    history: np.ndarray,
    issue_idx: int,
    horizon_steps: int,
    step_min: int,
    use_clearsky: bool,
    start_min_of_issue: int,
) -> np.ndarray:
    """Features for steps issue_idx .. issue_idx + horizon_steps - 1.

    Every entry uses data strictly before issue_idx (the first unknown
    step): three most recent observations, the same-time-yesterday value,
    hour-of-day and day-of-week encodings, a clear-sky proxy for PV, and
    a bias term.
    """
    daily = 1440 // step_min
    if issue_idx < 3:
        raise InputError("issue index leaves no history for lag features")
    steps = np.arange(horizon_steps)
    t = issue_idx + steps
    lag_daily = t - daily
    lag_daily -= daily * np.ceil(
        np.maximum(lag_daily - (issue_idx - 1), 0) / daily
    ).astype(int)
    if np.any(lag_daily < 0):
        raise InputError("series too short for the daily lag feature")
    minute = start_min_of_issue + steps * step_min
    hod = 2.0 * np.pi * (minute % 1440) / 1440.0
    dow = 2.0 * np.pi * ((minute // 1440) % 7) / 7.0
    cols = [
        np.full(horizon_steps, history[issue_idx - 1]),
        np.full(horizon_steps, history[issue_idx - 2]),
        np.full(horizon_steps, history[issue_idx - 3]),
        np.asarray(history)[lag_daily],
        np.sin(hod),
        np.cos(hod),
        np.sin(dow),
        np.cos(dow),
    ]
    if use_clearsky:
        cs_target = clearsky_factor(minute % 1440)
        cols.append(cs_target)
        # Clear-sky-scaled persistence: the last observation projected
        # through the deterministic daylight shape. Carries the node's PV
        # size, so one shared model serves heterogeneous installations.
        cs_last = clearsky_factor((start_min_of_issue - step_min) % 1440)
        ratio = cs_target / cs_last if cs_last > 0.02 else np.zeros_like(cs_target)
        cols.append(history[issue_idx - 1] * np.clip(ratio, 0.0, 5.0))
    cols.append(np.ones(horizon_steps))
    return np.column_stack(cols)


def n_features_for(target: str) -> int:
    return 11 if target == "pv" else 9


def make_training_set(
    series: np.ndarray,
    client_id: int,
    target: str,
    horizon: str,
    step_min: int,
    start_min: int = 0,
) -> LocalDataset:
    """Pool (features, target) pairs over every issue point in the series.

    Day-ahead products issue once per day at midnight; hour-ahead products
    issue at the top of each hour. The first two days are warmup history.
    """
    steps, _ = HORIZONS[horizon]
    daily = 1440 // step_min
    stride = daily if horizon == "day-ahead" else 60 // step_min
    use_cs = target == "pv"
    feats = []
    targs = []
    issue = 2 * daily
    while issue + steps <= len(series):
        x = feature_matrix(series, issue, steps, step_min, use_cs, start_min + issue * step_min)
        feats.append(x)
        targs.append(series[issue : issue + steps])
        issue += stride
    if not feats:
        raise InputError(f"client {client_id}: series too short to build features")
    return LocalDataset(
        client_id=client_id,
        features=np.vstack(feats),
        targets=np.concatenate(targs),
        resolution_min=step_min,
        target=target,
        horizon=horizon,
    )
