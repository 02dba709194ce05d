"""Metrics, baselines and the conventional / peak / irregular protocols."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .data import RidershipSeries, ServiceWindow, WindowSet, irregular_sample
from .graphs import TriGraph
from .model import ModelConfig, ModelParams, predict_normalized
from .training import NormStats

PEAK_PERIODS = ((7 * 60 + 30, 9 * 60 + 30), (17 * 60 + 30, 19 * 60 + 30))
MAPE_CONVENTION = "masked-zero-targets"


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    mape: float | None  # None when every target is zero


def metrics(pred, target, mask=None) -> Metrics:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if mask is not None:
        keep = np.broadcast_to(mask, pred.shape)
        pred, target = pred[keep], target[keep]
    if pred.size == 0:
        raise ValueError("no entries to score")
    err = pred - target
    nz = target != 0
    mape = float(np.mean(np.abs(err[nz]) / np.abs(target[nz]))) if nz.any() else None
    return Metrics(float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err ** 2))), mape)


@dataclass
class Batch:
    """Observation/target pairs; times are (W, T) arrays in bin units."""

    obs_times: np.ndarray
    obs: np.ndarray
    target_times: np.ndarray
    targets: np.ndarray
    service: ServiceWindow = field(default_factory=ServiceWindow)

    @classmethod
    def from_windows(cls, ws: WindowSet) -> "Batch":
        return cls(ws.obs_times, ws.obs, ws.target_times, ws.targets, ws.service)

    def __len__(self) -> int:
        return len(self.obs)

    def subset(self, idx) -> "Batch":
        return Batch(self.obs_times[idx], self.obs[idx], self.target_times[idx], self.targets[idx], self.service)

    @property
    def target_minutes(self) -> np.ndarray:
        return self.service.start + self.service.interval * self.target_times


class Predictor(Protocol):
    def predict(self, batch: Batch) -> np.ndarray:
        """Raw-unit predictions shaped like ``batch.targets``."""


@dataclass
class ModelPredictor:
    params: ModelParams
    graphs: TriGraph
    config: ModelConfig
    norm: NormStats
    chunk: int = 64
    threads: int = 1

    def predict(self, batch: Batch, available: Mapping[int, np.ndarray] | None = None) -> np.ndarray:
        """``available`` maps target index to raw observations (W, N, 2) fed to the decoder."""
        starts = list(range(0, len(batch), self.chunk))

        def run(lo):
            sl = slice(lo, lo + self.chunk)
            sub = batch.subset(sl)
            avail = {k: self.norm.apply(v[sl]) for k, v in (available or {}).items()}
            preds = predict_normalized(sub.obs_times, self.norm.apply(sub.obs), sub.target_times,
                                       self.params, self.graphs, self.config, avail)
            return self.norm.invert(np.stack([p.data for p in preds], axis=1))

        if self.threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                parts = list(pool.map(run, starts))
        else:
            parts = [run(lo) for lo in starts]
        if not parts:
            return np.zeros_like(batch.targets)
        return np.concatenate(parts)


class PersistencePredictor:
    def predict(self, batch: Batch) -> np.ndarray:
        return persistence_baseline(batch.obs, batch.targets.shape[1])


def persistence_baseline(obs: np.ndarray, m: int) -> np.ndarray:
    """Repeat the last observation ``m`` times: (..., T, N, 2) -> (..., m, N, 2)."""
    last = np.asarray(obs)[..., -1:, :, :]
    return np.repeat(last, m, axis=-3)


class HistoricalAverage:
    """Training mean per station and time-of-day bin."""

    def __init__(self, train: RidershipSeries):
        self.profile = train.values.mean(axis=0)  # (bins, N, 2)

    def predict(self, batch: Batch) -> np.ndarray:
        return self.profile[batch.target_times.astype(int)]


def historical_average_baseline(train: RidershipSeries, target_bins) -> np.ndarray:
    return train.values.mean(axis=0)[np.asarray(target_bins, dtype=int)]


def in_peak(minutes) -> np.ndarray:
    m = np.asarray(minutes)
    return np.logical_or.reduce([(lo <= m) & (m < hi) for lo, hi in PEAK_PERIODS])


def peak_filter(batch: Batch) -> tuple[Batch, np.ndarray]:
    """Windows with at least one peak-period target, and their (W, M) keep mask."""
    mask = in_peak(batch.target_minutes)
    keep = mask.any(axis=1)
    return batch.subset(keep), mask[keep]


# -- reports -----------------------------------------------------------------


@dataclass(frozen=True)
class HorizonRow:
    horizon: str
    mae: float
    rmse: float
    mape: float | None


@dataclass
class EvalReport:
    protocol: str
    rows: list[HorizonRow]
    meta: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"protocol {self.protocol}"]
        lines += [f"{k} {v}" for k, v in sorted(self.meta.items())]
        lines.append(f"{'horizon':<10}{'MAE':>12}{'RMSE':>12}{'MAPE':>12}")
        for r in self.rows:
            lines.append(f"{r.horizon:<10}{r.mae:>12.4f}{r.rmse:>12.4f}{_fmt_mape(r.mape, 12)}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["protocol,horizon,mae,rmse,mape"]
        for r in self.rows:
            mape = "NA" if r.mape is None else f"{r.mape:.6f}"
            lines.append(f"{self.protocol},{r.horizon},{r.mae:.6f},{r.rmse:.6f},{mape}")
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        txt, csv = directory / f"report_{self.protocol}.txt", directory / f"report_{self.protocol}.csv"
        txt.write_text(self.to_text(), encoding="utf-8")
        csv.write_text(self.to_csv(), encoding="utf-8")
        return txt, csv


def _fmt_mape(mape: float | None, width: int) -> str:
    return f"{'NA':>{width}}" if mape is None else f"{100 * mape:>{width - 1}.2f}%"


def read_report(path: str | Path) -> EvalReport:
    """Parse a text report written by :meth:`EvalReport.to_text`."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    protocol = lines[0].split(maxsplit=1)[1]
    meta, rows, in_rows = {}, [], False
    for line in lines[1:]:
        if line.startswith("horizon"):
            in_rows = True
            continue
        parts = line.split()
        if in_rows:
            mape = None if parts[3] == "NA" else float(parts[3].rstrip("%")) / 100
            rows.append(HorizonRow(parts[0], float(parts[1]), float(parts[2]), mape))
        else:
            meta[parts[0]] = parts[1] if len(parts) > 1 else ""
    return EvalReport(protocol, rows, meta)


def mean_report(reports: Sequence[EvalReport]) -> EvalReport:
    """Row-wise average; refuses reports from different configurations."""
    if not reports:
        raise ValueError("no reports to combine")
    digests = {r.meta.get("digest") for r in reports}
    if len(digests) > 1:
        raise ValueError(f"refusing to combine reports with different config digests: {sorted(map(str, digests))}")
    if len({r.protocol for r in reports}) > 1 or len({len(r.rows) for r in reports}) > 1:
        raise ValueError("reports differ in protocol or horizon count")
    rows = []
    for k in range(len(reports[0].rows)):
        col = [r.rows[k] for r in reports]
        mapes = [c.mape for c in col]
        rows.append(HorizonRow(
            col[0].horizon,
            float(np.mean([c.mae for c in col])),
            float(np.mean([c.rmse for c in col])),
            None if any(m is None for m in mapes) else float(np.mean(mapes)),
        ))
    meta = dict(reports[0].meta)
    meta["seeds"] = ",".join(r.meta.get("seeds", "") for r in reports)
    return EvalReport(reports[0].protocol, rows, meta)


def _base_meta(meta: Mapping[str, str] | None) -> dict[str, str]:
    out = {"mape": MAPE_CONVENTION}
    out.update(meta or {})
    return out


def horizon_rows(pred: np.ndarray, targets: np.ndarray, labels: Sequence[str], mask=None) -> list[HorizonRow]:
    rows = []
    for h, label in enumerate(labels):
        hm = None if mask is None else mask[:, h][:, None, None]
        if hm is not None and not hm.any():
            continue
        m = metrics(pred[:, h], targets[:, h], hm)
        rows.append(HorizonRow(label, m.mae, m.rmse, m.mape))
    return rows


def horizon_labels(n_out: int, interval: int) -> list[str]:
    return [f"{(h + 1) * interval}min" for h in range(n_out)]


def run_conventional(predictor: Predictor, batch: Batch, meta=None) -> EvalReport:
    if len(batch) == 0:
        raise ValueError("empty test set")
    pred = predictor.predict(batch)
    labels = horizon_labels(batch.targets.shape[1], batch.service.interval)
    return EvalReport("conventional", horizon_rows(pred, batch.targets, labels), _base_meta(meta))


def run_peak(predictor: Predictor, batch: Batch, meta=None) -> EvalReport:
    peak, mask = peak_filter(batch)
    if len(peak) == 0:
        raise ValueError("no test windows reach a peak period")
    pred = predictor.predict(peak)
    labels = horizon_labels(batch.targets.shape[1], batch.service.interval)
    return EvalReport("peak", horizon_rows(pred, peak.targets, labels, mask), _base_meta(meta))


def irregular_batch(full: WindowSet, n_observed: int, m_target: int, seed: int,
                    allow_interleaved: bool = False) -> Batch:
    """Sample one irregular observation/target split per window of ``full``."""
    rng = np.random.default_rng(seed)
    span = full.values.shape[1]
    obs_idx, tgt_idx = zip(*(irregular_sample(span, n_observed, m_target, rng, allow_interleaved)
                             for _ in range(len(full))))
    obs_idx, tgt_idx = np.array(obs_idx), np.array(tgt_idx)
    rows = np.arange(len(full))[:, None]
    return Batch(full.bins[rows, obs_idx].astype(np.float64), full.values[rows, obs_idx],
                 full.bins[rows, tgt_idx].astype(np.float64), full.values[rows, tgt_idx], full.service)


def run_irregular(predictor: Predictor, full: WindowSet, n_observed: int, seeds: Sequence[int],
                  m_target: int = 4, meta=None, allow_interleaved: bool = False) -> EvalReport:
    """Average over seeds of per-target-index metrics on irregular subsequences."""
    if len(full) == 0:
        raise ValueError("empty test set")
    labels = [f"t_n+{k + 1}" for k in range(m_target)]
    reports = []
    for seed in seeds:
        batch = irregular_batch(full, n_observed, m_target, seed, allow_interleaved)
        pred = predictor.predict(batch)
        reports.append(EvalReport("irregular", horizon_rows(pred, batch.targets, labels),
                                  _base_meta({**(meta or {}), "seeds": str(seed)})))
    return mean_report(reports)


def run_correction(predictor: ModelPredictor, batch: Batch, inject: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Per-horizon MAE without and with ground truth fed back at ``inject`` horizons."""
    rollout = predictor.predict(batch)
    corrected = predictor.predict(batch, {k: batch.targets[:, k] for k in inject})
    err = lambda p: np.abs(p - batch.targets).mean(axis=(0, 2, 3))
    return err(rollout), err(corrected)
