"""Reptile-style outer loop: sample a city task, adapt for k Adam steps, then
move the shared initialization part of the way toward the adapted weights.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore
from .checkpoint import save_checkpoint
from .errors import ConfigurationError, ConsistencyError, NumericError
from .metrics import mae, mape, predict_seconds, rmse
from .model import Batch, ModelConfig, init_params, make_batch, train_step
from .trajectory import Scaler, TteTask, fit_scaler

logger = logging.getLogger(__name__)

MAX_CONSECUTIVE_FAILURES = 10


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    k: int = 10
    batch_size: int = 32
    beta: float = 0.1
    eta: int = 7000
    seed: int = 0
    eval_every: int = 100
    lr: float = 1e-3
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"k must be at least 1, got {self.k}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be at least 1, got {self.batch_size}")
        if not self.beta > 0:
            raise ConfigurationError(f"beta must be positive, got {self.beta}")
        if self.eta < 1:
            raise ConfigurationError(f"eta must be at least 1, got {self.eta}")
        if self.eval_every < 1:
            raise ConfigurationError(f"eval_every must be at least 1, got {self.eval_every}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")

    def to_dict(self) -> dict:
        return asdict(self)


def seed_streams(seed: int, names: Sequence[str]) -> dict[str, np.random.SeedSequence]:
    """Independent, reproducible seed sequences split from one root seed."""
    return dict(zip(names, np.random.SeedSequence(seed).spawn(len(names))))


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1)[0])


def sample_task(tasks: Sequence[TteTask], rng: np.random.Generator) -> TteTask:
    if not tasks:
        raise ConfigurationError("no tasks to sample from")
    return tasks[int(rng.integers(len(tasks)))]


def sample_indices(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, n, size=batch_size)


def sample_batch(task: TteTask, batch_size: int, rng: np.random.Generator, scaler: Scaler) -> Batch:
    """Uniform draw with replacement from the task's training pool."""
    if not task.train:
        raise ConfigurationError(f"task {task.task_id!r} has no training data")
    idx = sample_indices(len(task.train), batch_size, rng)
    return make_batch([task.train[i] for i in idx], scaler, task.task_id)


def fit_scalers(tasks: Sequence[TteTask]) -> dict[str, Scaler]:
    return {task.task_id: fit_scaler(task.train) for task in tasks}


def inner_loop(
    store: ParameterStore,
    task: TteTask,
    scaler: Scaler,
    k: int,
    model_config: ModelConfig,
    rng: np.random.Generator,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> tuple[dict, dict, list[float]]:
    """k fresh-Adam steps on k sampled batches; returns (before, after, losses).

    On a numeric failure the store is restored to ``before`` and the error
    re-raised.
    """
    if k < 1:
        raise ConfigurationError(f"k must be at least 1, got {k}")
    before = ad.clone_params(store)
    store.reset_optimizer()
    losses = []
    try:
        for _ in range(k):
            batch = sample_batch(task, batch_size, rng, scaler)
            losses.append(train_step(store, batch, model_config, lr))
    except NumericError:
        ad.load_params(store, before)
        store.reset_optimizer()
        raise
    return before, ad.clone_params(store), losses


def meta_step_size(r: int, beta: float, eta: int) -> float:
    """Linearly decaying interpolation factor beta * (1 - r / eta)."""
    return beta * (1.0 - r / eta)


def meta_update(before: Mapping[str, np.ndarray], after: Mapping[str, np.ndarray],
                r: int, beta: float, eta: int) -> dict[str, np.ndarray]:
    """``before + beta * (1 - r/eta) * (after - before)`` for every parameter."""
    if not 1 <= r < eta:
        raise ConfigurationError(f"iteration {r} outside [1, {eta})")
    if list(before) != list(after):
        raise ConsistencyError("parameter names differ between snapshots")
    step = meta_step_size(r, beta, eta)
    out = {}
    for name, a in before.items():
        b = after[name]
        if a.shape != b.shape:
            raise ConsistencyError(f"shape mismatch for {name!r}: {a.shape} vs {b.shape}")
        out[name] = a + step * (b - a)
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class HistoryRow:
    iteration: int
    task_id: str
    train_loss: float
    val_mae: float | None = None
    val_mape: float | None = None
    val_rmse: float | None = None


HISTORY_COLUMNS = ("iteration", "task_id", "train_loss", "val_mae", "val_mape", "val_rmse")


@dataclass
class TrainResult:
    store: ParameterStore
    scalers: dict[str, Scaler]
    history: list[HistoryRow] = field(default_factory=list)
    best_params: dict[str, np.ndarray] | None = None
    best_iteration: int | None = None
    best_val_mae: float = float("inf")
    aborted: int = 0


def validation_metrics(store, model_config, pool, scalers) -> tuple[float, float, float]:
    pred = predict_seconds(store, model_config, pool, scalers)
    truth = np.array([t.label for t in pool])
    return mae(pred, truth), mape(pred, truth), rmse(pred, truth)


def train(
    tasks: Sequence[TteTask],
    model_config: ModelConfig,
    cfg: TrainConfig,
    scalers: Mapping[str, Scaler] | None = None,
    store: ParameterStore | None = None,
) -> TrainResult:
    """Run iterations r = 1 .. eta-1 of the meta-training loop.

    Validation metrics on the shared validation pool are recorded every
    ``eval_every`` iterations and at the last one; the best parameters by
    validation MAE are kept alongside the final ones.
    """
    if not tasks:
        raise ConfigurationError("no tasks to train on")
    scalers = dict(scalers) if scalers is not None else fit_scalers(tasks)
    streams = seed_streams(cfg.seed, ["init", "tasks", "batches"])
    if store is None:
        store = init_params(model_config, _int_seed(streams["init"]))
    task_rng = np.random.default_rng(streams["tasks"])
    batch_rng = np.random.default_rng(streams["batches"])
    val_pool = tasks[0].val
    result = TrainResult(store, scalers)
    failures = 0
    for r in range(1, cfg.eta):
        task = sample_task(tasks, task_rng)
        try:
            before, after, losses = inner_loop(
                store, task, scalers[task.task_id], cfg.k, model_config, batch_rng, cfg.batch_size, cfg.lr
            )
        except NumericError as exc:
            failures += 1
            result.aborted += 1
            logger.warning("iteration %d on %s aborted: %s", r, task.task_id, exc)
            if failures > MAX_CONSECUTIVE_FAILURES:
                raise TrainingError(
                    f"{failures} consecutive iterations failed numerically; last error: {exc}"
                ) from exc
            result.history.append(HistoryRow(r, task.task_id, float("nan")))
            continue
        failures = 0
        ad.load_params(store, meta_update(before, after, r, cfg.beta, cfg.eta))
        row = HistoryRow(r, task.task_id, float(np.mean(losses)))
        if val_pool and (r % cfg.eval_every == 0 or r == cfg.eta - 1):
            row.val_mae, row.val_mape, row.val_rmse = validation_metrics(store, model_config, val_pool, scalers)
            logger.info("iteration %d: val MAE %.2f s, MAPE %.2f%%", r, row.val_mae, row.val_mape)
            if row.val_mae < result.best_val_mae:
                result.best_val_mae = row.val_mae
                result.best_iteration = r
                result.best_params = ad.clone_params(store)
        result.history.append(row)
    store.reset_optimizer()
    if cfg.checkpoint_dir is not None:
        write_outputs(result, model_config, cfg)
    return result


def write_history(rows: Sequence[HistoryRow], path) -> None:
    def fmt(v):
        return "" if v is None else repr(v)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            writer.writerow([row.iteration, row.task_id, fmt(row.train_loss),
                             fmt(row.val_mae), fmt(row.val_mape), fmt(row.val_rmse)])


def write_outputs(result: TrainResult, model_config: ModelConfig, cfg: TrainConfig) -> None:
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_config = cfg.to_dict()
    train_config.pop("checkpoint_dir")
    save_checkpoint(out / "final.mtte", result.store, result.scalers, model_config, train_config)
    if result.best_params is not None:
        best = ParameterStore()
        for name, value in result.best_params.items():
            best.add(name, value)
        save_checkpoint(out / "best.mtte", best, result.scalers, model_config, train_config,
                        {"iteration": result.best_iteration, "val_mae": result.best_val_mae})
    write_history(result.history, out / "history.csv")


def adapt(
    params: Mapping[str, np.ndarray],
    task: TteTask,
    scaler: Scaler,
    model_config: ModelConfig,
    k: int,
    rng: np.random.Generator,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> ParameterStore:
    """Copy ``params`` and fine-tune the copy for k Adam steps on ``task``."""
    store = ParameterStore()
    for name, value in params.items():
        store.add(name, value)
    inner_loop(store, task, scaler, k, model_config, rng, batch_size, lr)
    return store
