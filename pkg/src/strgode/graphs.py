"""Physical, similarity and correlation relation graphs over stations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np

KINDS = ("physical", "similarity", "correlation")


@dataclass(frozen=True)
class Selection:
    """Edge selection rule: ``threshold`` keeps scores >= value, ``top_k`` the k best per row."""

    rule: str
    value: float

    def __post_init__(self):
        if self.rule not in ("threshold", "top_k"):
            raise ValueError(f"unknown selection rule {self.rule!r}")

    @classmethod
    def threshold(cls, tau: float) -> "Selection":
        return cls("threshold", float(tau))

    @classmethod
    def top_k(cls, k: int) -> "Selection":
        return cls("top_k", int(k))

    @classmethod
    def parse(cls, text: str) -> "Selection":
        rule, _, value = text.partition(":")
        if rule == "top_k":
            return cls.top_k(int(value))
        return cls.threshold(float(value))

    def __str__(self) -> str:
        v = int(self.value) if self.rule == "top_k" else repr(self.value)
        return f"{self.rule}:{v}"


@dataclass(frozen=True)
class RelationGraph:
    n_stations: int
    edges: tuple[tuple[int, int, float], ...]
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown graph kind {self.kind!r}")
        for i, j, w in self.edges:
            if not (0 <= i < self.n_stations and 0 <= j < self.n_stations):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n_stations}")
            # a selected edge may carry a weight that underflowed to 0 after row normalization
            if not (w >= 0 and math.isfinite(w)):
                raise ValueError(f"edge ({i}, {j}) has invalid weight {w}")

    def weights(self) -> np.ndarray:
        W = np.zeros((self.n_stations, self.n_stations))
        for i, j, w in self.edges:
            W[i, j] = w
        return W

    def adjacency(self) -> np.ndarray:
        """Selected-edge indicator, independent of weight magnitude."""
        A = np.zeros((self.n_stations, self.n_stations))
        for i, j, _ in self.edges:
            A[i, j] = 1.0
        return A

    def mean_operator(self) -> np.ndarray:
        """Row i averages uniformly over the out-neighbours of i (empty rows stay zero)."""
        A = self.adjacency()
        deg = A.sum(axis=1, keepdims=True)
        return np.divide(A, deg, out=np.zeros_like(A), where=deg > 0)

    def permuted(self, perm: Sequence[int]) -> "RelationGraph":
        """Relabel station ``s`` as ``perm[s]``."""
        edges = sorted((perm[i], perm[j], w) for i, j, w in self.edges)
        return RelationGraph(self.n_stations, tuple(edges), self.kind)


@dataclass(frozen=True)
class TriGraph:
    physical: RelationGraph
    similarity: RelationGraph
    correlation: RelationGraph

    def __post_init__(self):
        ns = {g.n_stations for g in self}
        if len(ns) != 1:
            raise ValueError(f"relation graphs disagree on station count: {sorted(ns)}")

    def __iter__(self):
        return iter((self.physical, self.similarity, self.correlation))

    @property
    def n_stations(self) -> int:
        return self.physical.n_stations

    def permuted(self, perm: Sequence[int]) -> "TriGraph":
        return TriGraph(*(g.permuted(perm) for g in self))


def _row_normalized_edges(log_scores: np.ndarray, mask: np.ndarray) -> tuple[tuple[int, int, float], ...]:
    # weights exp(s_ij) / sum_k exp(s_ik) over selected k, shifted by the row max so
    # tiny exp(-DTW) similarities do not underflow to zero
    edges = []
    for i in range(log_scores.shape[0]):
        cols = np.flatnonzero(mask[i])
        if cols.size == 0:
            continue
        row = log_scores[i, cols]
        w = np.exp(row - row.max())
        w /= w.sum()
        edges.extend((i, int(j), float(wj)) for j, wj in zip(cols, w))
    return tuple(edges)


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def build_physical(edge_list: Iterable[tuple[int, int]], n: int) -> RelationGraph:
    P = np.zeros((n, n))
    for i, j in edge_list:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"station pair ({i}, {j}) out of range for n={n}")
        if i == j:
            raise ValueError(f"self-loop on station {i} in physical topology")
        P[i, j] = P[j, i] = 1.0
    return RelationGraph(n, _row_normalized_edges(_log(P), P > 0), "physical")


@numba.njit(cache=True)
def _dtw_table(a: np.ndarray, b: np.ndarray, band: int) -> float:
    n, m = a.shape[0], b.shape[0]
    prev = np.full(m, np.inf)
    cur = np.full(m, np.inf)
    for u in range(n):
        lo = 0 if band < 0 else max(0, u - band)
        hi = m if band < 0 else min(m, u + band + 1)
        cur[:] = np.inf
        for v in range(lo, hi):
            c = 0.0
            for k in range(a.shape[1]):
                diff = a[u, k] - b[v, k]
                c += diff * diff
            c = np.sqrt(c)
            if u == 0 and v == 0:
                cur[v] = c
                continue
            best = np.inf
            if u > 0:
                best = min(best, prev[v])
                if v > 0:
                    best = min(best, prev[v - 1])
            if v > 0:
                best = min(best, cur[v - 1])
            cur[v] = c + best
        prev, cur = cur, prev
    return prev[m - 1]


def dtw_distance(a, b, band: int | None = None) -> float:
    """Dynamic time warping with Euclidean local cost between vector samples.

    D(u, v) = c(u, v) + min(D(u-1, v), D(u, v-1), D(u-1, v-1)). ``band``
    optionally restricts |u - v| <= band (widened to cover |len(a) - len(b)|).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("dtw_distance needs non-empty series")
    if a.shape[1] != b.shape[1]:
        raise ValueError("series have different sample widths")
    band = -1 if band is None else max(int(band), abs(len(a) - len(b)))
    return float(_dtw_table(np.ascontiguousarray(a), np.ascontiguousarray(b), band))


def zscore_channels(series: np.ndarray) -> np.ndarray:
    """Standardize each station's (T, C) series per channel; flat channels map to zero."""
    x = np.asarray(series, dtype=np.float64)
    mu = x.mean(axis=-2, keepdims=True)
    sd = x.std(axis=-2, keepdims=True)
    return (x - mu) / np.maximum(sd, 1e-8)


def dtw_matrix(series: Sequence, band: int | None = None, normalize: bool = True) -> np.ndarray:
    """Pairwise DTW distances between station series, each (T, C)."""
    xs = [np.asarray(s, dtype=np.float64) for s in series]
    if len({len(s) for s in xs}) != 1:
        raise ValueError("all station series must have equal length")
    if normalize:
        xs = [zscore_channels(s) for s in xs]
    n = len(xs)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = dtw_distance(xs[i], xs[j], band)
    return dist


def similarity_scores(series: Sequence, band: int | None = None, normalize: bool = True) -> np.ndarray:
    """exp(-DTW) between every pair of station series (may underflow to 0)."""
    return np.exp(-dtw_matrix(series, band, normalize))


def _select(log_scores: np.ndarray, selection: Selection) -> np.ndarray:
    n = log_scores.shape[0]
    off = ~np.eye(n, dtype=bool)
    present = np.isfinite(log_scores)
    if selection.rule == "threshold":
        if selection.value <= 0:
            raise ValueError("threshold must be positive")
        return (log_scores >= np.log(selection.value)) & off & present
    k = int(selection.value)
    if k < 1 or k >= n:
        raise ValueError(f"top_k needs 1 <= k < n, got k={k}, n={n}")
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        cand = [j for j in range(n) if j != i and present[i, j]]
        # stable sort keeps the lower index first among ties
        cand.sort(key=lambda j: -log_scores[i, j])
        mask[i, cand[:k]] = True
    return mask


def graph_from_log_scores(log_scores: np.ndarray, selection: Selection, kind: str) -> RelationGraph:
    mask = _select(log_scores, selection)
    return RelationGraph(log_scores.shape[0], _row_normalized_edges(log_scores, mask), kind)


def similarity_from_distances(dist: np.ndarray, selection: Selection) -> RelationGraph:
    return graph_from_log_scores(-np.asarray(dist, dtype=np.float64), selection, "similarity")


def build_similarity(
    series: Sequence,
    selection: Selection,
    band: int | None = None,
    normalize: bool = True,
) -> RelationGraph:
    n = len(series)
    if selection.rule == "top_k" and not 1 <= selection.value < n:
        raise ValueError(f"top_k needs 1 <= k < n, got k={selection.value}, n={n}")
    if selection.rule == "threshold" and selection.value <= 0:
        raise ValueError("threshold must be positive")
    return similarity_from_distances(dtw_matrix(series, band, normalize), selection)


def correlation_ratios(od: np.ndarray) -> np.ndarray:
    D = np.asarray(od, dtype=np.float64)
    if (D < 0).any():
        raise ValueError("origin-destination counts must be non-negative")
    rows = D.sum(axis=1, keepdims=True)
    return np.divide(D, rows, out=np.zeros_like(D), where=rows > 0)


def build_correlation(od: np.ndarray, selection: Selection) -> RelationGraph:
    return graph_from_log_scores(_log(correlation_ratios(od)), selection, "correlation")


# -- file format -------------------------------------------------------------


def write_graph(graph: RelationGraph, path: str | Path) -> None:
    lines = [f"strgode-graph v1 {graph.kind} {graph.n_stations}"]
    lines += [f"{i} {j} {w:.17g}" for i, j, w in graph.edges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_graph(path: str | Path) -> RelationGraph:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}:1: empty graph file")
    head = lines[0].split()
    if len(head) != 4 or head[:2] != ["strgode-graph", "v1"]:
        raise ValueError(f"{path}:1: bad header {lines[0]!r}")
    kind, n = head[2], int(head[3])
    edges = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed edge line {line!r}") from exc
        edges.append((i, j, w))
    return RelationGraph(n, tuple(edges), kind)


def write_trigraph(graphs: TriGraph, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for g in graphs:
        write_graph(g, directory / f"{g.kind}.graph")


def read_trigraph(directory: str | Path) -> TriGraph:
    directory = Path(directory)
    return TriGraph(*(read_graph(directory / f"{k}.graph") for k in KINDS))
