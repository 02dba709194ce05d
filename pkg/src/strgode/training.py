"""Z-score normalization, MAE objective, Adam and the epoch loop."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from . import diffcore as dc
from .data import RidershipSeries, WindowSet, window_set
from .graphs import TriGraph
from .model import ModelConfig, ModelParams, loss_graph, predict_normalized
from .ode import SolverConfig

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # per channel (inflow, outflow)
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / np.maximum(self.std, STD_FLOOR)

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * np.maximum(self.std, STD_FLOOR) + self.mean


def zscore_fit(values: np.ndarray) -> NormStats:
    """Population mean/std per channel over every axis but the last."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot fit normalization on empty data")
    flat = x.reshape(-1, x.shape[-1])
    return NormStats(flat.mean(axis=0), flat.std(axis=0))


def zscore_apply(values, stats: NormStats) -> np.ndarray:
    return stats.apply(values)


def zscore_invert(values, stats: NormStats) -> np.ndarray:
    return stats.invert(values)


def mae_loss(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.abs(pred - target).mean())


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise dc.NonFiniteError(f"non-finite gradient for {k}")
    step = state.step + 1
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            new_params[k] = p
            continue
        m[k] = beta1 * state.m.get(k, 0.0) + (1 - beta1) * g
        v[k] = beta2 * state.v.get(k, 0.0) + (1 - beta2) * g * g
        m_hat = m[k] / (1 - beta1 ** step)
        v_hat = v[k] / (1 - beta2 ** step)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, step)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    d: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.1
    max_epochs: int = 200
    patience: int = 10
    max_decays: int = 2
    seed: int = 0
    method: str = "rk4"
    n_intermediate: int = 3
    n_in: int = 4
    n_out: int = 4
    anchor: str = "last"
    transform_hidden: bool = True
    aggregation: str = "mean"
    threads: int = 1

    def __post_init__(self):
        for name in ("batch_size", "d", "max_epochs", "patience", "n_in", "n_out", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr must be positive and lr_decay in (0, 1]")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.d, SolverConfig(self.method, self.n_intermediate),
                           self.anchor, self.transform_hidden, self.aggregation)


@dataclass
class EpochRecord:
    epoch: int
    train_mae: float
    val_mae: float
    lr: float

    def line(self) -> str:
        return f"{self.epoch} {self.train_mae:.6f} {self.val_mae:.6f} {self.lr:.6g}"


@dataclass
class FitResult:
    params: ModelParams
    history: list[EpochRecord]
    norm: NormStats
    best_epoch: int
    diverged: bool = False


def _batch_loss_and_grad(params: ModelParams, ws: WindowSet, idx: np.ndarray, graphs: TriGraph,
                         cfg: ModelConfig, norm: NormStats) -> tuple[float, dict[str, np.ndarray]]:
    sub = ws.subset(idx)
    graph = loss_graph(sub.obs_times, norm.apply(sub.obs), sub.target_times, norm.apply(sub.targets),
                       graphs, cfg)
    loss = float(dc.forward(graph, params.values)["loss"])
    return loss, dc.backward(graph, "loss")


def loss_and_grad(params: ModelParams, ws: WindowSet, idx: np.ndarray, graphs: TriGraph,
                  cfg: ModelConfig, norm: NormStats, threads: int = 1
                  ) -> tuple[float, dict[str, np.ndarray]]:
    """Batch MAE (normalized units) and its gradient.

    With ``threads > 1`` the batch is cut into contiguous chunks evaluated
    concurrently; chunk results are combined in chunk order.
    """
    if threads <= 1 or len(idx) < 2:
        return _batch_loss_and_grad(params, ws, idx, graphs, cfg, norm)
    chunks = [c for c in np.array_split(idx, min(threads, len(idx))) if len(c)]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(lambda c: _batch_loss_and_grad(params, ws, c, graphs, cfg, norm), chunks))
    weights = [len(c) / len(idx) for c in chunks]
    loss = sum(w * p[0] for w, p in zip(weights, parts))
    grads = {k: sum(w * p[1][k] for w, p in zip(weights, parts)) for k in parts[0][1]}
    return loss, grads


def predict_windows(params: ModelParams, ws: WindowSet, graphs: TriGraph, cfg: ModelConfig,
                    norm: NormStats, batch_size: int = 64) -> np.ndarray:
    """Normalized predictions (W, n_out, N, 2) for every window."""
    out = []
    for lo in range(0, len(ws), batch_size):
        sub = ws.subset(slice(lo, lo + batch_size))
        preds = predict_normalized(sub.obs_times, norm.apply(sub.obs), sub.target_times,
                                   params, graphs, cfg)
        out.append(np.stack([p.data for p in preds], axis=1))
    if not out:
        return np.zeros((0, ws.n_out, ws.values.shape[2], 2))
    return np.concatenate(out)


def normalized_mae(params: ModelParams, ws: WindowSet, graphs: TriGraph, cfg: ModelConfig,
                   norm: NormStats) -> float:
    return mae_loss(predict_windows(params, ws, graphs, cfg, norm), norm.apply(ws.targets))


def fit_windows(train: WindowSet, val: WindowSet, graphs: TriGraph, config: TrainConfig,
                norm: NormStats, log_to: TextIO | None = None,
                on_step: Callable[[int, float], None] | None = None) -> FitResult:
    """Adam on shuffled minibatches with plateau decay and best-epoch selection.

    Validation MAE is measured in normalized units. After ``patience`` epochs
    without improvement the learning rate is multiplied by ``lr_decay``; once
    ``max_decays`` decays are spent, the next exhausted patience stops training.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    cfg = config.model_config()
    rng = np.random.default_rng(config.seed)
    params = ModelParams.init(config.d, config.seed)
    state = AdamState()
    lr = config.lr
    best_val, best_params, best_epoch = np.inf, params.copy(), 0
    history: list[EpochRecord] = []
    stale, decays, step = 0, 0, 0
    diverged = False

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        try:
            for lo in range(0, len(order), config.batch_size):
                idx = order[lo:lo + config.batch_size]
                loss, grads = loss_and_grad(params, train, idx, graphs, cfg, norm, config.threads)
                values, state = adam_step(params.values, grads, state, lr)
                params = ModelParams(values)
                total += loss * len(idx)
                seen += len(idx)
                step += 1
                if on_step is not None:
                    on_step(step, loss)
            val_mae = normalized_mae(params, val, graphs, cfg, norm)
        except dc.NonFiniteError as exc:
            log.warning("training diverged in epoch %d: %s", epoch, exc)
            diverged = True
            break
        record = EpochRecord(epoch, total / seen, val_mae, lr)
        history.append(record)
        if log_to is not None:
            log_to.write(record.line() + "\n")
        log.info("epoch %d train %.4f val %.4f lr %.2g", epoch, record.train_mae, val_mae, lr)

        if val_mae < best_val:
            best_val, best_params, best_epoch, stale = val_mae, params.copy(), epoch, 0
            continue
        stale += 1
        if stale >= config.patience:
            if decays >= config.max_decays:
                break
            lr *= config.lr_decay
            decays += 1
            stale = 0
    return FitResult(best_params, history, norm, best_epoch, diverged)


def fit(train: RidershipSeries, val: RidershipSeries, graphs: TriGraph, config: TrainConfig,
        log_to: TextIO | None = None) -> FitResult:
    """Fit normalization on the training split only, window both splits, and train."""
    norm = zscore_fit(train.values)
    train_ws = window_set(train, config.n_in, config.n_out)
    val_ws = window_set(val, config.n_in, config.n_out)
    return fit_windows(train_ws, val_ws, graphs, config, norm, log_to)
