"""Graph-ODE encoder/decoder with GRU observation correction.

All functions accept a leading batch axis: states are (..., N, d) and
observations (..., N, 2). Time arrays are (T,) for a single window or
(B, T) for a batch of windows that may have different timestamps.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .graphs import TriGraph
from .ode import SolverConfig, TimeGrid, integrate

RELATIONS = ("physical", "similarity", "correlation")
ANCHORS = ("last", "first")
AGGREGATIONS = ("mean", "weighted")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    solver: SolverConfig = field(default_factory=SolverConfig)
    anchor: str = "last"
    transform_hidden: bool = True
    aggregation: str = "mean"

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.anchor not in ANCHORS:
            raise ValueError(f"anchor must be one of {ANCHORS}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


def param_shapes(d: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"theta0": (d, d)}
    for r in RELATIONS:
        shapes[f"theta_{r}"] = (d, d)
    shapes.update({
        "gru_Wr": (2 * d + 2, d), "gru_br": (d,),
        "gru_Wz": (2 * d + 2, d), "gru_bz": (d,),
        "gru_WN": (d + 2, d), "gru_bN": (d,),
    })
    for block in ("tz", "th"):
        shapes.update({
            f"{block}_W1": (d, d), f"{block}_b1": (d,),
            f"{block}_W2": (d, d), f"{block}_b2": (d,),
        })
    shapes.update({"out_W": (d, 2), "out_b": (2,)})
    return shapes


@dataclass
class ModelParams:
    """Named weight arrays. Matrices act on row vectors: ``x @ W + b``."""

    values: dict[str, np.ndarray]

    @classmethod
    def init(cls, d: int, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(d)
        values = {}
        for name, shape in param_shapes(d).items():
            if len(shape) == 1:
                values[name] = np.zeros(shape)
            else:
                values[name] = rng.uniform(-bound, bound, size=shape)
        return cls(values)

    @classmethod
    def zeros(cls, d: int) -> "ModelParams":
        return cls({k: np.zeros(s) for k, s in param_shapes(d).items()})

    @property
    def d(self) -> int:
        return self.values["theta0"].shape[0]

    def names(self) -> list[str]:
        return list(param_shapes(self.d))

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.values.items()})

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.values.items()}

    def validate(self) -> None:
        expected = param_shapes(self.d)
        if set(expected) != set(self.values):
            raise ValueError(f"parameter names differ: {sorted(set(expected) ^ set(self.values))}")
        for k, shape in expected.items():
            if self.values[k].shape != shape:
                raise ValueError(f"{k}: shape {self.values[k].shape}, expected {shape}")


Params = Mapping[str, Tensor]


def _as_tensors(params) -> Params:
    if isinstance(params, ModelParams):
        return params.tensors()
    return params


@dataclass
class LatentState:
    Z: Tensor
    hidden: Tensor
    t: float | np.ndarray = 0.0

    def __post_init__(self):
        if self.Z.shape != self.hidden.shape:
            raise ValueError(f"Z {self.Z.shape} and hidden {self.hidden.shape} differ")


@functools.lru_cache(maxsize=32)
def graph_operators(graphs: TriGraph, aggregation: str = "mean") -> tuple[np.ndarray, ...]:
    """Per-relation N x N aggregation matrices (row i mixes the neighbours of i)."""
    if aggregation == "mean":
        return tuple(g.mean_operator() for g in graphs)
    return tuple(g.weights() for g in graphs)


def _check_stations(x: Tensor | np.ndarray, n: int, what: str) -> None:
    if x.shape[-2] != n:
        raise ValueError(f"{what} has {x.shape[-2]} stations, graphs have {n}")


def gode_dynamics(Z: Tensor, params, graphs: TriGraph, aggregation: str = "mean") -> Tensor:
    """relu(Z Θ0 + Σ_r A_r Z Θ_r) with A_r the neighbour-averaging operator."""
    p = _as_tensors(params)
    return _dynamics(p, graphs, aggregation, _stacked_thetas(p))(Z, None)


def _stacked_thetas(p: Params) -> Tensor:
    return dc.stack([p[f"theta_{r}"] for r in RELATIONS], axis=0)


def _dynamics(p: Params, graphs: TriGraph, aggregation: str, thetas: Tensor):
    A = np.stack(graph_operators(graphs, aggregation))  # (3, N, N)
    n, d = graphs.n_stations, p["theta0"].shape[0]

    def f(Z: Tensor, t) -> Tensor:
        _check_stations(Z, n, "state")
        if Z.shape[-1] != d:
            raise ValueError(f"state width {Z.shape[-1]} != d={d}")
        neigh = dc.matmul(dc.matmul(A, dc.expand_dims(Z, -3)), thetas)  # (..., 3, N, d)
        return dc.relu(dc.add(dc.matmul(Z, p["theta0"]), dc.sum_axis(neigh, -3)))

    return f


def dynamics_fn(params, graphs: TriGraph, aggregation: str = "mean"):
    """Autonomous derivative f(Z, t) for the integrators."""
    p = _as_tensors(params)
    return _dynamics(p, graphs, aggregation, _stacked_thetas(p))


def gru_cell(Z_prev: Tensor, h_prev: Tensor, x, params) -> tuple[Tensor, Tensor]:
    """One correction step; returns (Z, hidden)."""
    p = _as_tensors(params)
    x = dc.as_tensor(x)
    if Z_prev.shape != h_prev.shape or x.shape[:-1] != Z_prev.shape[:-1] or x.shape[-1] != 2:
        raise ValueError(f"gru_cell shapes: Z {Z_prev.shape}, hidden {h_prev.shape}, x {x.shape}")
    zhx = dc.concat([Z_prev, h_prev, x], axis=-1)
    r = dc.sigmoid(dc.add(dc.matmul(zhx, p["gru_Wr"]), p["gru_br"]))
    u = dc.sigmoid(dc.add(dc.matmul(zhx, p["gru_Wz"]), p["gru_bz"]))
    cand = dc.tanh(dc.add(dc.matmul(dc.concat([dc.mul(r, h_prev), x], axis=-1), p["gru_WN"]), p["gru_bN"]))
    keep_new = dc.sub(1.0, u)
    new_part = dc.mul(keep_new, cand)
    h = dc.add(new_part, dc.mul(u, h_prev))
    Z = dc.add(new_part, dc.mul(u, Z_prev))
    return Z, h


def gru_gates(Z_prev, h_prev, x, params) -> tuple[np.ndarray, np.ndarray]:
    """Reset and update gate values, for inspection."""
    p = _as_tensors(params)
    zhx = dc.concat([dc.as_tensor(Z_prev), dc.as_tensor(h_prev), dc.as_tensor(x)], axis=-1)
    r = dc.sigmoid(dc.add(dc.matmul(zhx, p["gru_Wr"]), p["gru_br"]))
    u = dc.sigmoid(dc.add(dc.matmul(zhx, p["gru_Wz"]), p["gru_bz"]))
    return r.data, u.data


def _two_layer(x: Tensor, p: Params, block: str) -> Tensor:
    hidden = dc.tanh(dc.add(dc.matmul(x, p[f"{block}_W1"]), p[f"{block}_b1"]))
    return dc.add(dc.matmul(hidden, p[f"{block}_W2"]), p[f"{block}_b2"])


def transform_block(h0: Tensor, hidden: Tensor, params, transform_hidden: bool = True) -> tuple[Tensor, Tensor]:
    p = _as_tensors(params)
    if h0.shape != hidden.shape or h0.shape[-1] != p["tz_W1"].shape[0]:
        raise ValueError(f"transform_block shapes: {h0.shape}, {hidden.shape}")
    Z0 = _two_layer(h0, p, "tz")
    return Z0, (_two_layer(hidden, p, "th") if transform_hidden else hidden)


def output_layer(Z: Tensor, params) -> Tensor:
    p = _as_tensors(params)
    if Z.shape[-1] != p["out_W"].shape[0]:
        raise ValueError(f"output_layer expects width {p['out_W'].shape[0]}, got {Z.shape[-1]}")
    return dc.add(dc.matmul(Z, p["out_W"]), p["out_b"])


def _check_times(times: np.ndarray, what: str) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if times.shape[-1] and np.any(np.diff(times, axis=-1) <= 0):
        raise ValueError(f"{what} must be strictly increasing without duplicates")
    return times


def encode(times, values, params, graphs: TriGraph, config: ModelConfig = ModelConfig()) -> LatentState:
    """Reverse-time GODE-RNN sweep over the observations.

    ``values`` is (T, N, 2) or (B, T, N, 2) in normalized units. The state is
    integrated backwards across each gap to the next-earlier observation and
    corrected there by the GRU; with ``anchor='last'`` it is then carried
    forward to the last observation time before the transform block.
    """
    p = _as_tensors(params)
    times = _check_times(times, "observation times")
    values = np.asarray(values, dtype=np.float64)
    T = times.shape[-1]
    if T == 0:
        raise ValueError("encode needs at least one observation")
    if values.shape[-3] != T or values.shape[-1] != 2:
        raise ValueError(f"values shape {values.shape} does not match {T} times")
    _check_stations(values, graphs.n_stations, "observations")
    f = dynamics_fn(p, graphs, config.aggregation)
    n_int, method = config.solver.n_intermediate, config.solver.method

    state_shape = values.shape[:-3] + (values.shape[-2], config.d)
    Z = Tensor(np.zeros(state_shape))
    hidden = Tensor(np.zeros(state_shape))
    for i in range(T - 1, -1, -1):
        if i < T - 1:
            Z = integrate(f, Z, TimeGrid(times[..., i + 1], times[..., i], n_int), method)
        Z, hidden = gru_cell(Z, hidden, values[..., i, :, :], p)
    anchor = times[..., 0]
    if config.anchor == "last" and T > 1:
        Z = integrate(f, Z, TimeGrid(times[..., 0], times[..., -1], n_int), method)
        anchor = times[..., -1]
    Z0, hidden0 = transform_block(Z, hidden, p, config.transform_hidden)
    return LatentState(Z0, hidden0, anchor)


def decode(
    init: LatentState,
    times,
    params,
    graphs: TriGraph,
    config: ModelConfig = ModelConfig(),
    available: Mapping[int, np.ndarray] | None = None,
) -> list[Tensor]:
    """Roll the state forward to each target time, correcting with the GRU.

    ``available`` maps a target index to its observation (normalized); at
    other targets the model's own prediction is fed back instead. Each
    prediction is read out before the correction at its own time.
    """
    p = _as_tensors(params)
    times = _check_times(times, "target times")
    available = available or {}
    if times.shape[-1] and np.any(times[..., 0] < np.asarray(init.t)):
        raise ValueError("target time precedes the anchor of the initial state")
    f = dynamics_fn(p, graphs, config.aggregation)
    n_int, method = config.solver.n_intermediate, config.solver.method

    Z, hidden, t_prev = init.Z, init.hidden, np.asarray(init.t, dtype=np.float64)
    preds = []
    for i in range(times.shape[-1]):
        t_i = times[..., i]
        Z_mid = integrate(f, Z, TimeGrid(t_prev, t_i, n_int), method)
        y = output_layer(Z_mid, p)
        preds.append(y)
        x = available[i] if i in available else y
        Z, hidden = gru_cell(Z_mid, hidden, x, p)
        t_prev = t_i
    return preds


def predict_normalized(obs_times, obs_values, target_times, params, graphs, config=ModelConfig(),
                       available=None) -> list[Tensor]:
    state = encode(obs_times, obs_values, params, graphs, config)
    return decode(state, target_times, params, graphs, config, available)


def forecast(obs_times, obs_values, horizon_times, params, graphs: TriGraph,
             config: ModelConfig = ModelConfig(), norm=None) -> np.ndarray:
    """Predictions in original units, shape (..., M, N, 2).

    ``obs_values`` are raw counts when ``norm`` is given, otherwise already
    normalized (and the output stays normalized).
    """
    horizon_times = np.asarray(horizon_times, dtype=np.float64)
    obs_values = np.asarray(obs_values, dtype=np.float64)
    M = horizon_times.shape[-1]
    out_shape = obs_values.shape[:-3] + (M,) + obs_values.shape[-2:]
    if M == 0:
        return np.zeros(out_shape)
    x = obs_values if norm is None else norm.apply(obs_values)
    preds = predict_normalized(obs_times, x, horizon_times, params, graphs, config)
    y = np.stack([t.data for t in preds], axis=-3)
    return y if norm is None else norm.invert(y)


def horizon_loss(preds: Sequence[Tensor], targets: np.ndarray) -> Tensor:
    """Mean absolute error over all horizons; ``targets`` is (..., M, N, 2)."""
    M = len(preds)
    if targets.shape[-3] != M:
        raise ValueError(f"{M} predictions but {targets.shape[-3]} target steps")
    loss = None
    for i, y in enumerate(preds):
        term = dc.mean_abs(y, targets[..., i, :, :])
        loss = term if loss is None else dc.add(loss, term)
    return dc.mul(loss, 1.0 / M)


def loss_graph(obs_times, obs_values, target_times, target_values, graphs: TriGraph,
               config: ModelConfig = ModelConfig(), available=None) -> dc.CompGraph:
    """Named graph whose leaves are the model parameters and whose output is ``loss``."""
    target_values = np.asarray(target_values, dtype=np.float64)

    def build(leaves):
        preds = predict_normalized(obs_times, obs_values, target_times, leaves, graphs, config, available)
        return {"loss": horizon_loss(preds, target_values)}

    return dc.CompGraph(build, parameters=list(param_shapes(config.d)))


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = "strgode-ckpt v1"


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> None:
    """Text header of ``name shape`` lines, then little-endian float64 payload in header order.

    ``meta`` entries go in ``# key value`` comment lines right after the magic line.
    """
    lines = [CKPT_MAGIC]
    for k, v in (meta or {}).items():
        lines.append(f"# {k} {v}")
    for name, arr in arrays.items():
        shape = "x".join(str(s) for s in np.shape(arr)) or "scalar"
        lines.append(f"{name} {shape}")
    lines.append("end")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8") + payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    raw = path.read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(CKPT_MAGIC.encode()) or cut < 0:
        raise ValueError(f"{path}:1: not a {CKPT_MAGIC} file")
    header = raw[:cut].decode("utf-8").splitlines()
    payload = raw[cut + len(marker):]
    meta, specs = {}, []
    for lineno, line in enumerate(header[1:], start=2):
        if line.startswith("# "):
            key, _, value = line[2:].partition(" ")
            meta[key] = value
            continue
        try:
            name, shape_txt = line.split()
            shape = () if shape_txt == "scalar" else tuple(int(s) for s in shape_txt.split("x"))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed header line {line!r}") from exc
        specs.append((name, shape))
    arrays, offset = {}, 0
    for name, shape in specs:
        n = int(np.prod(shape)) if shape else 1
        chunk = payload[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise ValueError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes")
    return arrays, meta


def params_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for k in params.names():
        h.update(k.encode())
        h.update(np.ascontiguousarray(params.values[k], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def with_solver(config: ModelConfig, method: str | None = None, n_intermediate: int | None = None) -> ModelConfig:
    solver = SolverConfig(method or config.solver.method, n_intermediate or config.solver.n_intermediate)
    return replace(config, solver=solver)
