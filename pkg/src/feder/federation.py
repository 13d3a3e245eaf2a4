"""Round orchestration and the aggregation strategies.

Strategies: FedAvg (sample-count weights), FedERNaive and FedERImproved
(per-layer effective-rank weights), Precision (per-layer inverse gradient
variance), FedProx (proximal local objective with a FedAvg server step).
Rounds are synchronous: every client trains, then the server aggregates
once and evaluates on the held-out test split.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .metrics import ZeroSpectrumError, layer_effective_rank, model_effective_rank
from .nn import LrSchedule, ModelParams, OptimizerState, check_congruent, optimizer_step, schedule_lr
from .rng import derive_rng

STRATEGIES = ("FedAvg", "FedERNaive", "FedERImproved", "Precision", "FedProx")


class DegenerateLayerError(ValueError):
    """Every client scored zero effective rank on a layer, so the unfloored
    naive weighting has no denominator. The improved scheme's floor removes
    this failure mode."""


@dataclass
class FederationConfig:
    """Knobs for one federated run."""
    clients: int = 4
    rounds: int = 20
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3
    strategy: str = "FedAvg"
    er_floor: float = 1e-3
    prox_mu: float = 0.0
    unfold_mode: int = 4
    noise_mode: str = "off"
    seed: int = 0
    fedavg_uniform: bool = False
    dense_own_er: bool = False

    def validate(self) -> "FederationConfig":
        if self.clients < 1:
            raise ConfigError("clients", "must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds", "must be >= 1")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", "must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"must be one of {', '.join(STRATEGIES)}")
        if self.er_floor <= 0:
            raise ConfigError("er_floor", "must be > 0")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu", "must be >= 0")
        if self.strategy == "FedProx" and self.prox_mu <= 0:
            raise ConfigError("prox_mu", "FedProx requires prox_mu > 0")
        if self.unfold_mode not in (1, 2, 3, 4):
            raise ConfigError("unfold_mode", "must be one of 1..4")
        if self.noise_mode not in ("off", "analytic"):
            raise ConfigError("noise_mode", "must be 'off' or 'analytic'")
        return self


@dataclass
class ClientState:
    """One participant: private shard, model replica, optimizer."""
    client_id: int
    params: ModelParams
    data: Dataset
    optimizer: OptimizerState
    grad_sq_sum: dict[str, float] = field(default_factory=dict)
    steps_taken: int = 0
    last_train_loss: float = math.nan
    last_train_acc: float = math.nan

    def gradient_variance(self, layer: str) -> float:
        """Mean over this round's steps of the layer gradient's per-parameter
        uncentered second moment; 0.0 before any step."""
        if self.steps_taken == 0:
            return 0.0
        return self.grad_sq_sum.get(layer, 0.0) / self.steps_taken


def make_clients(model, shards: list[Dataset], optimizer_template: OptimizerState,
                 seed: int) -> list[ClientState]:
    """Fresh clients with per-client seeded initial parameters.

    The init seed depends only on (seed, client id), so comparison runs of
    different strategies start from identical client models.
    """
    return [ClientState(k, model.init_params((seed, "client", k)), shard,
                        optimizer_template.clone())
            for k, shard in enumerate(shards)]


@dataclass
class AggregationWeights:
    """Per-layer, per-client weights; each layer's weights form a simplex."""
    by_layer: dict[str, dict[int, float]]

    def __post_init__(self):
        for layer, ws in self.by_layer.items():
            vals = np.array(list(ws.values()))
            if np.any(vals < -1e-9) or np.any(vals > 1 + 1e-9):
                raise ValueError(f"weights for {layer} leave [0, 1]")
            if abs(float(np.sum(vals)) - 1.0) > 1e-9:
                raise ValueError(f"weights for {layer} do not sum to 1")

    def for_layer(self, layer: str) -> dict[int, float]:
        return self.by_layer[layer]


@dataclass
class RoundReport:
    """Everything observable about one round."""
    round_index: int
    strategy: str
    train_loss: dict[int, float]
    train_acc: dict[int, float]
    client_layer_er: dict[str, dict[int, float]]
    server_layer_er: dict[str, float]
    alpha: AggregationWeights
    test_loss: float
    test_acc: float
    q_er: float | None
    gamma: dict[int, float] | None
    precision_fallback: tuple[str, ...]
    wall_time_s: float


# ---------------------------------------------------------------------------
# client-side updates


def _epoch_batches(rng, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _accumulate_grad_sq(state: ClientState, grads: dict) -> None:
    for name, g in grads.items():
        state.grad_sq_sum[name] = state.grad_sq_sum.get(name, 0.0) + float(np.sum(g * g)) / g.size
    state.steps_taken += 1


def _begin_round(state: ClientState, global_params: ModelParams | None) -> None:
    if len(state.data) == 0:
        raise ValueError(f"client {state.client_id} has an empty shard")
    if global_params is not None:
        check_congruent(state.params, global_params)
        state.params = global_params.copy()
    state.optimizer.reset()
    state.grad_sq_sum = {}
    state.steps_taken = 0


def client_update(state: ClientState, global_params: ModelParams | None, model,
                  cfg: FederationConfig, round_index: int,
                  schedule: LrSchedule | None = None) -> ClientState:
    """Sync to the server model (when given) and run E local epochs.

    ``global_params=None`` keeps the client's own parameters; the first
    round uses that so every client starts from its own seeded init. Batch
    order is seeded by (seed, client id, round), so reruns are bit-identical.
    """
    _begin_round(state, global_params)
    rng = derive_rng(cfg.seed, "batches", state.client_id, round_index)
    x, y = state.data.inputs, state.data.labels
    for epoch in range(cfg.local_epochs):
        cumulative_epoch = (round_index - 1) * cfg.local_epochs + epoch
        state.optimizer.learning_rate = schedule_lr(schedule, cumulative_epoch, cfg.learning_rate)
        for batch in _epoch_batches(rng, len(y), cfg.batch_size):
            _, grads = model.loss_and_gradient(state.params, x[batch], y[batch])
            _accumulate_grad_sq(state, grads)
            optimizer_step(state.optimizer, state.params, grads)
    state.last_train_loss, state.last_train_acc = model.evaluate(state.params, x, y)
    return state


def client_update_prox(state: ClientState, global_params: ModelParams | None, model,
                       cfg: FederationConfig, round_index: int,
                       schedule: LrSchedule | None = None) -> tuple[ClientState, float]:
    """Proximal local update: every step uses grad F + mu (w - w_start).

    Returns the updated state and the inexactness ratio
    gamma = |grad h(w_end)| / |grad h(w_start)| with the gradient norm taken
    over all parameters on the full shard; gamma is 0 when the denominator
    is below 1e-12, and exactly 1 when no step ran.
    """
    if cfg.prox_mu <= 0:
        raise ConfigError("prox_mu", "proximal update requires prox_mu > 0")
    _begin_round(state, global_params)
    anchor = state.params.copy()
    x, y = state.data.inputs, state.data.labels
    denom = _prox_grad_norm(model, state.params, anchor, x, y, cfg.prox_mu)
    rng = derive_rng(cfg.seed, "batches", state.client_id, round_index)
    for epoch in range(cfg.local_epochs):
        cumulative_epoch = (round_index - 1) * cfg.local_epochs + epoch
        state.optimizer.learning_rate = schedule_lr(schedule, cumulative_epoch, cfg.learning_rate)
        for batch in _epoch_batches(rng, len(y), cfg.batch_size):
            _, grads = model.loss_and_gradient(state.params, x[batch], y[batch])
            for name, w in state.params:
                grads[name] = grads[name] + cfg.prox_mu * (w - anchor.tensor(name))
            _accumulate_grad_sq(state, grads)
            optimizer_step(state.optimizer, state.params, grads)
    numer = _prox_grad_norm(model, state.params, anchor, x, y, cfg.prox_mu)
    gamma = 0.0 if denom < 1e-12 else numer / denom
    state.last_train_loss, state.last_train_acc = model.evaluate(state.params, x, y)
    return state, gamma


def _prox_grad_norm(model, params: ModelParams, anchor: ModelParams, x, y, mu: float) -> float:
    _, grads = model.loss_and_gradient(params, x, y)
    total = 0.0
    for name, w in params:
        g = grads[name] + mu * (w - anchor.tensor(name))
        total += float(np.sum(g * g))
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# aggregation


def _weighted_average(tensors: list[np.ndarray], weights: list[float]) -> np.ndarray:
    # Anchored at the first client so identical clients are an exact fixed
    # point regardless of weight rounding; weights must sum to 1.
    base = tensors[0]
    out = base.copy()
    for w, t in zip(weights[1:], tensors[1:]):
        out += w * (t - base)
    return out


def _aggregate(clients: list[ClientState], by_layer: dict[str, dict[int, float]]) -> ModelParams:
    layers = []
    for name, _ in clients[0].params:
        ws = by_layer[name]
        layers.append((name, _weighted_average(
            [c.params.tensor(name) for c in clients],
            [ws[c.client_id] for c in clients])))
    return ModelParams(layers)


def aggregate_fedavg(clients: list[ClientState], sample_counts=None):
    """n_k / n weighted elementwise mean; uniform when counts are omitted.

    Returns (params, weights).
    """
    if not clients:
        raise ValueError("need at least one client")
    if sample_counts is None:
        weights = [1.0 / len(clients)] * len(clients)
    else:
        if len(sample_counts) != len(clients):
            raise ValueError("one sample count per client required")
        total = float(np.sum(sample_counts))
        if total <= 0:
            raise ValueError("total sample count is zero")
        weights = [n / total for n in sample_counts]
    by_layer = {name: {c.client_id: w for c, w in zip(clients, weights)}
                for name, _ in clients[0].params}
    return _aggregate(clients, by_layer), AggregationWeights(by_layer)


def compute_layer_ers(clients: list[ClientState], cfg: FederationConfig) -> dict[str, dict[int, float]]:
    """Effective rank per rank-bearing layer per client, one SVD each."""
    out: dict[str, dict[int, float]] = {}
    for name, tensor in clients[0].params:
        if tensor.ndim not in (2, 4):
            continue
        out[name] = {c.client_id: layer_effective_rank(
            c.params.tensor(name), cfg.unfold_mode, cfg.noise_mode) for c in clients}
    return out


def _alphas_from_ers(ers: dict[int, float], floor: float) -> dict[int, float]:
    floored = {k: max(floor, er) for k, er in ers.items()}
    total = float(np.sum(list(floored.values())))
    if total <= 0.0:
        raise DegenerateLayerError("every client has zero effective rank on this layer")
    return {k: e / total for k, e in floored.items()}


def compute_layer_alphas(clients: list[ClientState], cfg: FederationConfig,
                         layer_ers=None) -> AggregationWeights:
    """Floored effective-rank shares: alpha_k = max(floor, er_k) / sum_k.

    The floored value is used in both numerator and denominator, which keeps
    each layer's weights on the simplex.
    """
    ers = compute_layer_ers(clients, cfg) if layer_ers is None else layer_ers
    return AggregationWeights({layer: _alphas_from_ers(per_client, cfg.er_floor)
                               for layer, per_client in ers.items()})


def aggregate_feder_naive(clients: list[ClientState], cfg: FederationConfig, layer_ers=None):
    """4-D layers weighted by raw (unfloored) effective-rank share, everything
    else by a plain 1/K mean.

    A 4-D layer where every client has zero effective rank raises
    DegenerateLayerError: that is this variant's documented failure mode.
    Returns (params, weights).
    """
    if not clients:
        raise ValueError("need at least one client")
    ers = compute_layer_ers(clients, cfg) if layer_ers is None else layer_ers
    uniform = {c.client_id: 1.0 / len(clients) for c in clients}
    by_layer = {}
    for name, tensor in clients[0].params:
        if tensor.ndim == 4:
            by_layer[name] = _alphas_from_ers(ers[name], floor=0.0)
        else:
            by_layer[name] = dict(uniform)
    return _aggregate(clients, by_layer), AggregationWeights(by_layer)


def aggregate_feder_improved(clients: list[ClientState], cfg: FederationConfig, layer_ers=None):
    """4-D layers use floored effective-rank shares; later layers inherit the
    most recent 4-D weighting; layers before any 4-D layer fall back to 1/K.

    With ``dense_own_er`` set, 2-D layers use their own floored ranks instead
    of inheriting. Returns (params, weights).
    """
    if not clients:
        raise ValueError("need at least one client")
    ers = compute_layer_ers(clients, cfg) if layer_ers is None else layer_ers
    alpha_prev = {c.client_id: 1.0 / len(clients) for c in clients}
    by_layer = {}
    for name, tensor in clients[0].params:
        if tensor.ndim == 4:
            weights = _alphas_from_ers(ers[name], cfg.er_floor)
            alpha_prev = weights
        elif tensor.ndim == 2 and cfg.dense_own_er:
            weights = _alphas_from_ers(ers[name], cfg.er_floor)
        else:
            weights = dict(alpha_prev)
        by_layer[name] = weights
    return _aggregate(clients, by_layer), AggregationWeights(by_layer)


def aggregate_precision(clients: list[ClientState]):
    """Layer weights proportional to the inverse of each client's accumulated
    gradient second moment for that layer.

    Layers where any client reports zero variance (no steps taken, or flat
    gradients) fall back to uniform weights and are listed in the returned
    fallback tuple. Returns (params, weights, fallback_layers).
    """
    if not clients:
        raise ValueError("need at least one client")
    uniform = {c.client_id: 1.0 / len(clients) for c in clients}
    by_layer = {}
    fallback = []
    for name, _ in clients[0].params:
        variances = [c.gradient_variance(name) for c in clients]
        if min(variances) <= 0.0:
            by_layer[name] = dict(uniform)
            fallback.append(name)
        else:
            inv = np.array([1.0 / v for v in variances])
            total = float(np.sum(inv))
            by_layer[name] = {c.client_id: float(iv / total)
                              for c, iv in zip(clients, inv)}
    return _aggregate(clients, by_layer), AggregationWeights(by_layer), tuple(fallback)


# ---------------------------------------------------------------------------
# the round loop


def run_round(server_params: ModelParams | None, clients: list[ClientState],
              test_data: Dataset, model, cfg: FederationConfig, round_index: int,
              schedule: LrSchedule | None = None) -> tuple[ModelParams, RoundReport]:
    """One synchronous round: local training, aggregation, evaluation.

    ``server_params=None`` (first round) lets each client train from its own
    seeded initialization instead of a broadcast model. Clients are processed
    in id order, so reports and aggregates are deterministic per seed.
    """
    start = time.perf_counter()
    gamma: dict[int, float] | None = {} if cfg.strategy == "FedProx" else None
    for state in sorted(clients, key=lambda c: c.client_id):
        if cfg.strategy == "FedProx":
            _, g = client_update_prox(state, server_params, model, cfg, round_index, schedule)
            gamma[state.client_id] = g
        else:
            client_update(state, server_params, model, cfg, round_index, schedule)

    ers = compute_layer_ers(clients, cfg)
    fallback: tuple[str, ...] = ()
    if cfg.strategy in ("FedAvg", "FedProx"):
        counts = None if cfg.fedavg_uniform else [len(c.data) for c in clients]
        new_params, weights = aggregate_fedavg(clients, counts)
    elif cfg.strategy == "FedERNaive":
        new_params, weights = aggregate_feder_naive(clients, cfg, ers)
    elif cfg.strategy == "FedERImproved":
        new_params, weights = aggregate_feder_improved(clients, cfg, ers)
    elif cfg.strategy == "Precision":
        new_params, weights, fallback = aggregate_precision(clients)
    else:
        raise ConfigError("strategy", f"unknown strategy {cfg.strategy!r}")

    test_loss, test_acc = model.evaluate(new_params, test_data.inputs, test_data.labels)
    server_er = {name: layer_effective_rank(tensor, cfg.unfold_mode, cfg.noise_mode)
                 for name, tensor in new_params if tensor.ndim in (2, 4)}
    try:
        q_er = model_effective_rank(list(server_er.values()), len(server_er))
    except (ZeroSpectrumError, ValueError):
        q_er = None

    report = RoundReport(
        round_index=round_index,
        strategy=cfg.strategy,
        train_loss={c.client_id: c.last_train_loss for c in clients},
        train_acc={c.client_id: c.last_train_acc for c in clients},
        client_layer_er=ers,
        server_layer_er=server_er,
        alpha=weights,
        test_loss=test_loss,
        test_acc=test_acc,
        q_er=q_er,
        gamma=gamma,
        precision_fallback=fallback,
        wall_time_s=time.perf_counter() - start,
    )
    return new_params, report


# ---------------------------------------------------------------------------
# CSV round reports
#
# One row per (round, client) plus one global row per round. Fixed base
# columns, then er:<layer> for every rank-bearing layer and alpha:<layer>
# for every layer, in model order. Client rows carry train metrics, their
# per-layer effective ranks and the aggregation weight applied to them;
# global rows carry test metrics, the aggregated model's effective ranks and
# the wall time. Wall time is excluded from determinism guarantees.

WALL_TIME_COLUMN = "wall_time_s"
_BASE_COLUMNS = ("round", "scope", "strategy", "client_id", "train_loss", "train_acc",
                 "test_loss", "test_acc", "gamma", "q_er", "precision_fallback",
                 WALL_TIME_COLUMN)


def csv_columns(report: RoundReport) -> list[str]:
    er_cols = [f"er:{name}" for name in report.server_layer_er]
    alpha_cols = [f"alpha:{name}" for name in report.alpha.by_layer]
    return list(_BASE_COLUMNS) + er_cols + alpha_cols


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def report_rows(report: RoundReport, columns: list[str]) -> list[dict[str, str]]:
    rows = []
    for cid in sorted(report.train_loss):
        row = dict.fromkeys(columns, "")
        row["round"] = str(report.round_index)
        row["scope"] = "client"
        row["strategy"] = report.strategy
        row["client_id"] = str(cid)
        row["train_loss"] = _fmt(report.train_loss[cid])
        row["train_acc"] = _fmt(report.train_acc[cid])
        if report.gamma is not None:
            row["gamma"] = _fmt(report.gamma.get(cid))
        for layer, per_client in report.client_layer_er.items():
            row[f"er:{layer}"] = _fmt(per_client[cid])
        for layer, ws in report.alpha.by_layer.items():
            row[f"alpha:{layer}"] = _fmt(ws[cid])
        rows.append(row)
    row = dict.fromkeys(columns, "")
    row["round"] = str(report.round_index)
    row["scope"] = "global"
    row["strategy"] = report.strategy
    row["test_loss"] = _fmt(report.test_loss)
    row["test_acc"] = _fmt(report.test_acc)
    row["q_er"] = _fmt(report.q_er)
    row["precision_fallback"] = ";".join(report.precision_fallback)
    row[WALL_TIME_COLUMN] = _fmt(report.wall_time_s)
    for layer, value in report.server_layer_er.items():
        row[f"er:{layer}"] = _fmt(value)
    rows.append(row)
    return rows


def write_rounds_csv(path, reports: list[RoundReport]) -> None:
    if not reports:
        raise ValueError("nothing to write")
    columns = csv_columns(reports[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for report in reports:
            for row in report_rows(report, columns):
                writer.writerow(row)


def read_rounds_csv(path) -> list[RoundReport]:
    """Parse a rounds CSV back into the reports that produced it."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fieldnames = reader.fieldnames or []
        er_layers = [c[len("er:"):] for c in fieldnames if c.startswith("er:")]
        alpha_layers = [c[len("alpha:"):] for c in fieldnames if c.startswith("alpha:")]
        rows = list(reader)

    reports: list[RoundReport] = []
    pending: list[dict] = []
    for row in rows:
        if row["scope"] == "client":
            pending.append(row)
            continue
        if row["scope"] != "global":
            raise ValueError(f"unknown row scope {row['scope']!r}")
        train_loss = {int(r["client_id"]): float(r["train_loss"]) for r in pending}
        train_acc = {int(r["client_id"]): float(r["train_acc"]) for r in pending}
        client_er = {layer: {int(r["client_id"]): float(r[f"er:{layer}"]) for r in pending}
                     for layer in er_layers}
        alpha = {layer: {int(r["client_id"]): float(r[f"alpha:{layer}"]) for r in pending}
                 for layer in alpha_layers}
        has_gamma = any(r["gamma"] != "" for r in pending)
        gamma = ({int(r["client_id"]): float(r["gamma"]) for r in pending}
                 if has_gamma else None)
        reports.append(RoundReport(
            round_index=int(row["round"]),
            strategy=row["strategy"],
            train_loss=train_loss,
            train_acc=train_acc,
            client_layer_er=client_er,
            server_layer_er={layer: float(row[f"er:{layer}"]) for layer in er_layers},
            alpha=AggregationWeights(alpha),
            test_loss=float(row["test_loss"]),
            test_acc=float(row["test_acc"]),
            q_er=float(row["q_er"]) if row["q_er"] != "" else None,
            gamma=gamma,
            precision_fallback=tuple(p for p in row["precision_fallback"].split(";") if p),
            wall_time_s=float(row[WALL_TIME_COLUMN]),
        ))
        pending = []
    if pending:
        raise ValueError("client rows without a closing global row")
    return reports
