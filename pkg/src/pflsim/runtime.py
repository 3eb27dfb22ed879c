"""Round loop: sample clients, broadcast, local updates on a snapshot, barrier, aggregate, evaluate."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .data import ClientDataset, Dataset, ShardPlan, build_clients
from .errors import ConfigError
from .metrics import MetricsReport, confusion_matrix, macro_metrics
from .numerics import ModelParams, derive_rng, init_params, predict
from .strategies import STRATEGY_NAMES, RunContext, Strategy, make_strategy

log = logging.getLogger(__name__)

# stream ids; per-client local work uses client_id * 2**20 + round
CLIENT_STREAM_STRIDE = 1 << 20
INIT_STREAM = 1 << 59
SAMPLE_STREAM = 1 << 58
EVAL_STREAM = 1 << 57


@dataclass(frozen=True)
class StrategyConfig:
    name: str
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class GlobalConfig:
    rounds: int
    num_clients: int
    strategy: StrategyConfig
    client_fraction: float = 1.0
    local_epochs: int = 1
    batch_size: int = 32
    local_lr: float = 0.05
    seed: int = 0
    hidden_dims: tuple[int, ...] = (128,)
    holdout_fraction: float = 0.2
    eval_every: int = 1
    workers: int = 1

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.num_clients < 1:
            raise ConfigError(f"num_clients must be >= 1, got {self.num_clients}")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError(f"client_fraction must be in (0, 1], got {self.client_fraction}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_lr < 0:
            raise ConfigError(f"local_lr must be >= 0, got {self.local_lr}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.strategy.name not in STRATEGY_NAMES:
            raise ConfigError(f"unknown strategy {self.strategy.name!r}; choose one of: {', '.join(STRATEGY_NAMES)}")


@dataclass(frozen=True)
class ClientState:
    client_id: int
    data: ClientDataset
    personalized: ModelParams | None
    strategy_state: Any


@dataclass(frozen=True)
class RoundRecord:
    round: int
    selected: tuple[int, ...]
    global_metrics: MetricsReport | None
    client_metrics: tuple[MetricsReport, ...] | None
    mean_train_loss: float
    client_losses: Mapping[int, float] = field(default_factory=dict)
    extras: Mapping[str, float] = field(default_factory=dict)

    @property
    def evaluated(self) -> bool:
        return self.global_metrics is not None

    @property
    def mean_personalized_accuracy(self) -> float:
        if not self.client_metrics:
            return float("nan")
        return float(np.mean([m.accuracy for m in self.client_metrics]))


@dataclass(frozen=True)
class ExperimentResult:
    records: list[RoundRecord]
    clients: list[ClientState]
    server: Any


def participation_count(num_clients: int, client_fraction: float) -> int:
    return max(int(math.floor(client_fraction * num_clients + 1e-9)), 1)


def sample_clients(num_clients: int, client_fraction: float, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform sample without replacement of max(floor(f * N), 1) clients, ascending."""
    if not 0.0 < client_fraction <= 1.0:
        raise ConfigError(f"client_fraction must be in (0, 1], got {client_fraction}")
    m = participation_count(num_clients, client_fraction)
    return tuple(int(c) for c in np.sort(rng.choice(num_clients, size=m, replace=False)))


def evaluate(model_or_predict: ModelParams | Callable[[np.ndarray], np.ndarray], x: np.ndarray, y: np.ndarray, num_classes: int) -> MetricsReport:
    """Metrics of argmax predictions; never mutates the model."""
    fn = model_or_predict if callable(model_or_predict) else (lambda b: predict(model_or_predict, b))
    return macro_metrics(confusion_matrix(y, fn(x), num_classes))


def _context(config: GlobalConfig, dataset: Dataset, clients: Sequence[ClientDataset]) -> RunContext:
    init = init_params(dataset.input_dim, config.hidden_dims, dataset.num_classes, derive_rng(config.seed, INIT_STREAM))
    return RunContext(
        num_clients=config.num_clients,
        num_classes=dataset.num_classes,
        input_dim=dataset.input_dim,
        rounds=config.rounds,
        local_epochs=config.local_epochs,
        batch_size=config.batch_size,
        local_lr=config.local_lr,
        initial_model=init,
        train_counts=tuple(c.n_train for c in clients),
    )


def _evaluate_round(strategy, ctx, server, states, clients, seed, rnd):
    per_client = []
    personalized = []
    pooled = np.zeros((ctx.num_classes, ctx.num_classes), dtype=np.int64)
    for cid, (state, data) in enumerate(zip(states, clients)):
        pers = strategy.personalize(ctx, server, cid, state, data, derive_rng(seed, EVAL_STREAM + cid * CLIENT_STREAM_STRIDE + rnd))
        cm = confusion_matrix(data.test_y, pers.predict(data.test_x), ctx.num_classes)
        pooled += cm
        per_client.append(macro_metrics(cm))
        personalized.append(pers.params)
    gm = strategy.global_model(ctx, server, states)
    if gm is None:
        global_report = macro_metrics(pooled)
    else:
        x = np.concatenate([c.test_x for c in clients])
        y = np.concatenate([c.test_y for c in clients])
        global_report = evaluate(gm, x, y, ctx.num_classes)
    return global_report, tuple(per_client), personalized


def run_experiment(
    config: GlobalConfig,
    plan: ShardPlan,
    dataset: Dataset,
    *,
    strategy: Strategy | None = None,
    client_states: Sequence[Any] | None = None,
    on_round: Callable[[RoundRecord], None] | None = None,
) -> ExperimentResult:
    if plan.num_clients != config.num_clients:
        raise ConfigError(f"shard plan has {plan.num_clients} clients, config says {config.num_clients}")
    strategy = strategy or make_strategy(config.strategy.name, config.strategy.params)
    clients = build_clients(dataset, plan, config.holdout_fraction, config.seed)
    ctx = _context(config, dataset, clients)
    server, states = strategy.setup(ctx)
    if client_states is not None:
        if len(client_states) != config.num_clients:
            raise ConfigError(f"{len(client_states)} client states for {config.num_clients} clients")
        states = list(client_states)
    strategy.check_states(states)

    records: list[RoundRecord] = []
    personalized: list[ModelParams | None] = [None] * config.num_clients
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for rnd in range(1, config.rounds + 1):
            selected = sample_clients(config.num_clients, config.client_fraction, derive_rng(config.seed, SAMPLE_STREAM + rnd))
            snapshot = server
            messages = {cid: strategy.broadcast(ctx, snapshot, cid, rnd) for cid in selected}

            def work(cid: int):
                rng = derive_rng(config.seed, cid * CLIENT_STREAM_STRIDE + rnd)
                return strategy.client_update(ctx, cid, states[cid], messages[cid], clients[cid], rng, rnd)

            results = dict(zip(selected, pool.map(work, selected) if pool else map(work, selected)))
            # barrier: everything below sees all uploads, folded in ascending id order
            new_states = list(states)
            for cid in selected:
                new_states[cid] = results[cid].state
            uploads = {cid: results[cid].upload for cid in selected}
            server, states = strategy.aggregate(ctx, snapshot, uploads, new_states, rnd)

            losses = {cid: results[cid].loss for cid in selected}
            finite = [v for v in losses.values() if math.isfinite(v)]
            extras: dict[str, float] = {}
            for cid in selected:
                for key, val in results[cid].extras.items():
                    extras[key] = extras.get(key, 0.0) + val
            g_rep = c_rep = None
            if rnd % config.eval_every == 0 or rnd == config.rounds:
                g_rep, c_rep, personalized = _evaluate_round(strategy, ctx, server, states, clients, config.seed, rnd)
            record = RoundRecord(
                round=rnd,
                selected=selected,
                global_metrics=g_rep,
                client_metrics=c_rep,
                mean_train_loss=float(np.mean(finite)) if finite else float("nan"),
                client_losses=losses,
                extras=extras,
            )
            records.append(record)
            if record.evaluated:
                log.info(
                    "round %d/%d  loss %.4f  global acc %.4f  personalised acc %.4f",
                    rnd,
                    config.rounds,
                    record.mean_train_loss,
                    g_rep.accuracy,
                    record.mean_personalized_accuracy,
                )
            if on_round is not None:
                on_round(record)
    finally:
        if pool is not None:
            pool.shutdown()

    final = [ClientState(cid, clients[cid], personalized[cid], states[cid]) for cid in range(config.num_clients)]
    return ExperimentResult(records, final, server)
