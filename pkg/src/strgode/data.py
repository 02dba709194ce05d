"""Ridership ingestion: binning, OD counts, splits, windows, synthetic data."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graphs import Selection, TriGraph, build_correlation, build_physical, build_similarity


@dataclass(frozen=True)
class ServiceWindow:
    """Daily operating hours, as minutes after midnight, binned at ``interval`` minutes."""

    start: int = 5 * 60 + 30
    end: int = 23 * 60 + 30
    interval: int = 15

    def __post_init__(self):
        if self.interval <= 0 or self.end <= self.start:
            raise ValueError("service window needs end > start and a positive interval")
        if (self.end - self.start) % self.interval:
            raise ValueError("service window length must be a whole number of bins")

    @property
    def bins_per_day(self) -> int:
        return (self.end - self.start) // self.interval

    def bin_minutes(self) -> np.ndarray:
        """Wall-clock start (minutes after midnight) of every bin in a day."""
        return self.start + self.interval * np.arange(self.bins_per_day)

    def bin_of(self, minute_of_day: float) -> int | None:
        """Bin index holding ``minute_of_day`` (left-closed bins), or None outside service."""
        if not self.start <= minute_of_day < self.end:
            return None
        return int((minute_of_day - self.start) // self.interval)


@dataclass(frozen=True)
class TransactionRecord:
    entry_time: dt.datetime
    exit_time: dt.datetime
    origin: int
    destination: int


@dataclass
class RidershipSeries:
    """Per-day binned counts: ``values[day, bin, station] = (inflow, outflow)``."""

    days: list[dt.date]
    values: np.ndarray
    service: ServiceWindow = field(default_factory=ServiceWindow)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4 or self.values.shape[-1] != 2:
            raise ValueError(f"values must be (days, bins, stations, 2), got {self.values.shape}")
        if self.values.shape[0] != len(self.days):
            raise ValueError("one value block per day required")
        if self.values.shape[1] != self.service.bins_per_day:
            raise ValueError("bin count does not match the service window")

    @property
    def n_stations(self) -> int:
        return self.values.shape[2]

    @property
    def n_days(self) -> int:
        return len(self.days)

    def select_days(self, idx: Sequence[int] | slice) -> "RidershipSeries":
        days = self.days[idx] if isinstance(idx, slice) else [self.days[i] for i in idx]
        return RidershipSeries(list(days), self.values[idx], self.service)

    def station_series(self) -> np.ndarray:
        """(N, days*bins, 2): each station's full sequence, days concatenated."""
        flat = self.values.reshape(-1, self.n_stations, 2)
        return np.transpose(flat, (1, 0, 2))


@dataclass
class SeriesWindow:
    times: np.ndarray
    values: np.ndarray
    minutes: np.ndarray | None = None
    day: int | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.times) != len(self.values):
            raise ValueError("times and values differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("window times must be strictly increasing")


# -- binning -----------------------------------------------------------------


def _minute_of_day(t: dt.datetime) -> float:
    return t.hour * 60 + t.minute + t.second / 60 + t.microsecond / 6e7


def _day_range(first: dt.date, last: dt.date) -> list[dt.date]:
    return [first + dt.timedelta(days=k) for k in range((last - first).days + 1)]


def bin_transactions(
    records: Iterable[TransactionRecord],
    n_stations: int,
    service: ServiceWindow = ServiceWindow(),
    days: Sequence[dt.date] | None = None,
) -> RidershipSeries:
    """Count entries (inflow at origin) and exits (outflow at destination) per bin.

    Events outside the service window, or on days not in ``days``, are dropped.
    """
    records = list(records)
    bad = sum(1 for r in records
              if not (0 <= r.origin < n_stations and 0 <= r.destination < n_stations))
    if bad:
        raise ValueError(f"{bad} record(s) reference unknown stations (n_stations={n_stations})")
    if days is None:
        stamps = [r.entry_time.date() for r in records] + [r.exit_time.date() for r in records]
        days = _day_range(min(stamps), max(stamps)) if stamps else []
    days = list(days)
    index = {d: k for k, d in enumerate(days)}
    values = np.zeros((len(days), service.bins_per_day, n_stations, 2))
    for r in records:
        for when, station, channel in ((r.entry_time, r.origin, 0), (r.exit_time, r.destination, 1)):
            k = index.get(when.date())
            b = service.bin_of(_minute_of_day(when))
            if k is not None and b is not None:
                values[k, b, station, channel] += 1
    return RidershipSeries(days, values, service)


def build_od_matrix(records: Iterable[TransactionRecord], n_stations: int,
                    start: dt.datetime, end: dt.datetime) -> np.ndarray:
    """``D[i, j]`` = trips from j to i entering and exiting within [start, end)."""
    D = np.zeros((n_stations, n_stations))
    for r in records:
        if start <= r.entry_time and r.exit_time < end:
            D[r.destination, r.origin] += 1
    return D


# -- CSV adapters ------------------------------------------------------------


def _parse_time(text: str, path, lineno: int) -> dt.datetime:
    try:
        return dt.datetime.fromisoformat(text.strip())
    except ValueError as exc:
        raise ValueError(f"{path}:{lineno}: bad timestamp {text!r}") from exc


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and not row[0][:1].isdigit()):
                continue  # blank line or header
            yield lineno, row


def read_transactions_csv(path: str | Path) -> list[TransactionRecord]:
    """Rows of ``entry_time_iso8601,exit_time_iso8601,origin_id,destination_id``."""
    out = []
    for lineno, row in _rows(path):
        if len(row) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        entry, exit_ = _parse_time(row[0], path, lineno), _parse_time(row[1], path, lineno)
        try:
            origin, dest = int(row[2]), int(row[3])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad station id") from exc
        if exit_ < entry:
            raise ValueError(f"{path}:{lineno}: exit precedes entry")
        out.append(TransactionRecord(entry, exit_, origin, dest))
    return out


def write_transactions_csv(path: str | Path, records: Iterable[TransactionRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entry_time", "exit_time", "origin_id", "destination_id"])
        for r in records:
            w.writerow([r.entry_time.isoformat(), r.exit_time.isoformat(), r.origin, r.destination])


def read_ridership_csv(path: str | Path, n_stations: int | None = None,
                       service: ServiceWindow = ServiceWindow()) -> RidershipSeries:
    """Rows of ``time_iso8601,station_id,inflow,outflow``; times must be bin starts."""
    entries = []
    for lineno, row in _rows(path):
        if len(row) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        when = _parse_time(row[0], path, lineno)
        try:
            station, inflow, outflow = int(row[1]), float(row[2]), float(row[3])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed numeric field") from exc
        if inflow < 0 or outflow < 0:
            raise ValueError(f"{path}:{lineno}: negative count")
        minute = _minute_of_day(when)
        b = service.bin_of(minute)
        if b is None or service.start + b * service.interval != minute:
            raise ValueError(f"{path}:{lineno}: {row[0]} is not a bin start inside the service window")
        entries.append((when.date(), b, station, inflow, outflow, lineno))
    if not entries:
        raise ValueError(f"{path}: no data rows")
    n = n_stations if n_stations is not None else max(e[2] for e in entries) + 1
    days = _day_range(min(e[0] for e in entries), max(e[0] for e in entries))
    index = {d: k for k, d in enumerate(days)}
    values = np.zeros((len(days), service.bins_per_day, n, 2))
    for day, b, station, inflow, outflow, lineno in entries:
        if not 0 <= station < n:
            raise ValueError(f"{path}:{lineno}: station {station} out of range")
        values[index[day], b, station] = (inflow, outflow)
    return RidershipSeries(days, values, service)


def write_ridership_csv(path: str | Path, series: RidershipSeries) -> None:
    mins = series.service.bin_minutes()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "station_id", "inflow", "outflow"])
        for k, day in enumerate(series.days):
            for b, m in enumerate(mins):
                stamp = dt.datetime.combine(day, dt.time()) + dt.timedelta(minutes=int(m))
                for s in range(series.n_stations):
                    inflow, outflow = series.values[k, b, s]
                    w.writerow([stamp.isoformat(), s, f"{inflow:g}", f"{outflow:g}"])


def read_topology_csv(path: str | Path) -> list[tuple[int, int]]:
    pairs = []
    for lineno, row in _rows(path):
        try:
            pairs.append((int(row[0]), int(row[1])))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: expected 'i,j' station pair") from exc
    return pairs


def write_topology_csv(path: str | Path, pairs: Iterable[tuple[int, int]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_a", "station_b"])
        w.writerows(pairs)


# -- splits and windows ------------------------------------------------------


def split_dataset(series: RidershipSeries, boundaries: Sequence) -> tuple[RidershipSeries, ...]:
    """Chronological day split at two boundaries.

    Boundaries are either day counts ``(n_train, n_val)`` or dates
    ``(first_val_day, first_test_day)``.
    """
    if len(boundaries) != 2:
        raise ValueError("need exactly two split boundaries")
    a, b = boundaries
    if isinstance(a, dt.date):
        a = sum(1 for d in series.days if d < a)
        b = sum(1 for d in series.days if d < b)
    else:
        a, b = int(a), int(a) + int(b)
    if not 0 < a < b < series.n_days:
        raise ValueError(f"split boundaries {boundaries} leave an empty split "
                         f"for {series.n_days} days")
    return series.select_days(slice(0, a)), series.select_days(slice(a, b)), series.select_days(slice(b, None))


def split_days(n_days: int, fractions: Sequence[float]) -> tuple[int, int]:
    """Day counts (train, val) for fractional splits; the remainder is test."""
    n_train = int(round(fractions[0] * n_days))
    n_val = int(round(fractions[1] * n_days))
    return n_train, n_val


@dataclass
class WindowSet:
    """Stacked windows: ``values[w, k]`` is slot k of window w; ``bins[w, k]`` its bin index."""

    values: np.ndarray
    bins: np.ndarray
    days: np.ndarray
    service: ServiceWindow
    n_in: int
    n_out: int

    def __len__(self) -> int:
        return len(self.values)

    @property
    def obs(self) -> np.ndarray:
        return self.values[:, :self.n_in]

    @property
    def targets(self) -> np.ndarray:
        return self.values[:, self.n_in:]

    @property
    def obs_times(self) -> np.ndarray:
        return self.bins[:, :self.n_in].astype(np.float64)

    @property
    def target_times(self) -> np.ndarray:
        return self.bins[:, self.n_in:].astype(np.float64)

    @property
    def minutes(self) -> np.ndarray:
        return self.service.start + self.service.interval * self.bins

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.values[idx], self.bins[idx], self.days[idx], self.service, self.n_in, self.n_out)


def window_set(series: RidershipSeries, n_in: int, n_out: int) -> WindowSet:
    """Stride-1 windows that stay inside one service day."""
    if n_in < 1 or n_out < 1:
        raise ValueError("n_in and n_out must be >= 1")
    span = n_in + n_out
    per_day = series.values.shape[1] - span + 1
    N = series.n_stations
    if per_day <= 0:
        return WindowSet(np.zeros((0, span, N, 2)), np.zeros((0, span), dtype=int),
                         np.zeros(0, dtype=int), series.service, n_in, n_out)
    starts = np.arange(per_day)
    slots = starts[:, None] + np.arange(span)[None, :]
    values = series.values[:, slots]  # (days, per_day, span, N, 2)
    bins = np.broadcast_to(slots, (series.n_days, per_day, span))
    days = np.repeat(np.arange(series.n_days), per_day)
    return WindowSet(values.reshape(-1, span, N, 2), bins.reshape(-1, span).copy(), days,
                     series.service, n_in, n_out)


def make_windows(series: RidershipSeries, n_in: int, n_out: int) -> list[tuple[SeriesWindow, SeriesWindow]]:
    ws = window_set(series, n_in, n_out)
    out = []
    for w in range(len(ws)):
        mins = ws.minutes[w]
        obs = SeriesWindow(ws.bins[w, :n_in], ws.values[w, :n_in], mins[:n_in], int(ws.days[w]))
        tgt = SeriesWindow(ws.bins[w, n_in:], ws.values[w, n_in:], mins[n_in:], int(ws.days[w]))
        out.append((obs, tgt))
    return out


def irregular_sample(n_slots: int, n_observed: int, m_target: int, rng,
                     allow_interleaved: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Random sorted subsequence of slot indices split into (observed, target).

    The earliest ``n_observed`` sampled slots are observations and the
    remaining ``m_target`` are targets. With ``allow_interleaved`` the targets
    are instead a random subset of the sample, so they may precede observations.
    """
    if n_observed < 1 or m_target < 1:
        raise ValueError("need at least one observation and one target")
    if n_observed >= n_slots or n_observed + m_target > n_slots:
        raise ValueError(f"cannot draw {n_observed}+{m_target} slots from {n_slots}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    picked = np.sort(rng.choice(n_slots, size=n_observed + m_target, replace=False))
    if allow_interleaved:
        is_target = np.zeros(picked.size, dtype=bool)
        is_target[rng.choice(picked.size, size=m_target, replace=False)] = True
        return picked[~is_target], picked[is_target]
    return picked[:n_observed], picked[n_observed:]


# -- synthetic ground truth --------------------------------------------------


@dataclass
class SyntheticData:
    graphs: TriGraph
    series: RidershipSeries
    intensity: np.ndarray  # expected counts, same shape as series.values
    edges: list[tuple[int, int]]
    od: np.ndarray
    base: np.ndarray
    train_days: int

    def __iter__(self):
        return iter((self.graphs, self.series))


def random_connected_edges(n: int, rng: np.random.Generator, extra: int | None = None) -> list[tuple[int, int]]:
    """Random spanning tree plus ``extra`` chords."""
    edges = {(min(i, j), max(i, j)) for i in range(1, n) for j in [int(rng.integers(0, i))]}
    extra = n // 2 if extra is None else extra
    tries = 0
    while extra > 0 and tries < 50 * n:
        i, j = (int(v) for v in rng.integers(0, n, size=2))
        tries += 1
        if i != j and (min(i, j), max(i, j)) not in edges:
            edges.add((min(i, j), max(i, j)))
            extra -= 1
    return sorted(edges)


def _laplacian(n: int, edges) -> np.ndarray:
    A = np.zeros((n, n))
    for i, j in edges:
        A[i, j] = A[j, i] = 1.0
    return np.diag(A.sum(axis=1)) - A


def synth_generate(
    n_stations: int,
    days: int,
    seed: int,
    *,
    service: ServiceWindow = ServiceWindow(),
    base_level: float = 200.0,
    forcing: float = 1.0,
    noise: float = 0.02,
    diffusion: float = 0.05,
    reversion: float = 0.02,
    initial_spread: float = 0.0,
    uniform_base: bool = False,
    poisson: bool = True,
    train_fraction: float = 0.7,
    similarity: Selection = Selection.top_k(10),
    correlation: Selection = Selection.threshold(0.02),
    dtw_band: int | None = None,
    start_date: dt.date = dt.date(2024, 1, 1),
) -> SyntheticData:
    """Simulate station intensities and Poisson counts over ``days`` days.

    Latent relative deviations z (N, 2) follow
    dz/dt = -diffusion * L z - reversion * z + forcing * s'(t) + noise * dW,
    where L is the graph Laplacian and s(t) a per-station mix of daily and
    half-daily sinusoids. The expected count is base * (1 + z), floored at
    5% of base. Time is in bins; the simulation runs through the night and
    only service-window bins are emitted.
    """
    if n_stations < 2:
        raise ValueError("need at least two stations")
    rng = np.random.default_rng(seed)
    edges = random_connected_edges(n_stations, rng)
    L = _laplacian(n_stations, edges)
    if uniform_base:
        base = np.full((n_stations, 2), base_level)
    else:
        base = base_level * np.exp(rng.normal(0.0, 0.5, size=(n_stations, 1)) + rng.normal(0.0, 0.1, size=(n_stations, 2)))
    phase = rng.uniform(0, 2 * np.pi, size=(n_stations, 1)) + np.array([[0.0, np.pi]])
    phase2 = rng.uniform(0, 2 * np.pi, size=(n_stations, 1)) + np.array([[0.0, np.pi / 2]])
    amp1 = rng.uniform(0.3, 0.5, size=(n_stations, 1))
    amp2 = rng.uniform(0.15, 0.3, size=(n_stations, 1))

    bins_24h = 24 * 60 // service.interval
    w1, w2 = 2 * np.pi / bins_24h, 4 * np.pi / bins_24h

    def profile_rate(t):
        return amp1 * w1 * np.cos(w1 * t + phase) + amp2 * w2 * np.cos(w2 * t + phase2)

    substeps = 4
    h = 1.0 / substeps
    first_bin = service.start // service.interval
    keep = np.zeros(bins_24h, dtype=bool)
    keep[first_bin:first_bin + service.bins_per_day] = True

    # start on the forced profile so the first day is not a transient
    z = initial_spread * rng.normal(size=(n_stations, 2)) + forcing * (amp1 * np.sin(phase) + amp2 * np.sin(phase2))
    lam = np.zeros((days, service.bins_per_day, n_stations, 2))
    t = 0.0
    for day in range(days):
        b_out = 0
        for b in range(bins_24h):
            if keep[b]:
                lam[day, b_out] = base * np.maximum(1.0 + z, 0.05)
                b_out += 1
            for _ in range(substeps):
                dz = -diffusion * (L @ z) - reversion * z + forcing * profile_rate(t)
                z = z + h * dz + noise * np.sqrt(h) * rng.normal(size=z.shape)
                t += h
    counts = rng.poisson(lam).astype(np.float64) if poisson else lam.copy()
    day_list = [start_date + dt.timedelta(days=k) for k in range(days)]
    series = RidershipSeries(day_list, counts, service)

    train_days = max(1, int(round(train_fraction * days)))
    # gravity-style OD counts from mean station volumes and hop distances
    hops = _hop_distances(n_stations, edges)
    volume = base.mean(axis=1)
    grav = np.outer(volume, volume) / np.maximum(hops, 1) ** 2
    np.fill_diagonal(grav, 0.0)
    od = rng.poisson(grav / grav.sum() * 50.0 * n_stations * n_stations).astype(np.float64)

    graphs = TriGraph(
        build_physical(edges, n_stations),
        build_similarity(series.select_days(slice(0, train_days)).station_series(),
                         fit_selection(similarity, n_stations), dtw_band),
        build_correlation(od, fit_selection(correlation, n_stations)),
    )
    return SyntheticData(graphs, series, lam, edges, od, base, train_days)


def fit_selection(sel: Selection, n: int) -> Selection:
    if sel.rule == "top_k" and sel.value >= n:
        return Selection.top_k(n - 1)
    return sel


def _hop_distances(n: int, edges) -> np.ndarray:
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0)
    for i, j in edges:
        dist[i, j] = dist[j, i] = 1
    for k in range(n):
        dist = np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :])
    return dist


def sample_transactions(od: np.ndarray, days: Sequence[dt.date], service: ServiceWindow,
                        rng: np.random.Generator) -> list[TransactionRecord]:
    """Spread the trips of an OD matrix over ``days`` at random service times."""
    out = []
    span = service.end - service.start
    dests, origins = np.nonzero(od)
    for i, j in zip(dests, origins):
        for _ in range(int(od[i, j])):
            day = days[int(rng.integers(0, len(days)))]
            minute = service.start + rng.uniform(0, span - 60)
            entry = dt.datetime.combine(day, dt.time()) + dt.timedelta(minutes=float(minute))
            entry = entry.replace(microsecond=0)
            exit_ = entry + dt.timedelta(minutes=int(rng.integers(5, 60)))
            out.append(TransactionRecord(entry, exit_, int(j), int(i)))
    out.sort(key=lambda r: (r.entry_time, r.origin, r.destination))
    return out
