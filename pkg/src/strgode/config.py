"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .data import ServiceWindow
from .graphs import Selection
from .training import TrainConfig

# keys that change what a run computes; paths, protocol and threading choices do not
IDENTITY_KEYS = (
    "batch_size", "d", "lr", "lr_decay", "max_epochs", "patience", "max_decays", "seed",
    "method", "n_intermediate", "n_in", "n_out", "anchor", "transform_hidden", "aggregation",
    "train_fraction", "val_fraction", "service_start", "service_end", "interval",
    "similarity", "correlation", "dtw_band",
)


@dataclass
class RunConfig:
    # training
    batch_size: int = 8
    d: int = 16
    lr: float = 0.001
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
    # data
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    service_start: str = "05:30"
    service_end: str = "23:30"
    interval: int = 15
    # graphs
    similarity: str = "top_k:10"
    correlation: str = "threshold:0.02"
    dtw_band: int = -1
    # evaluation
    protocol: str = "conventional"
    observed: int = 4
    targets: int = 4
    irregular_span: int = 16
    seeds: str = "0,1,2,3,4"
    allow_interleaved: bool = False
    threads: int = 1
    # paths
    data: str = ""
    graphs: str = ""
    checkpoint: str = ""
    out: str = ""

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        cfg.update(parse_pairs(text, source), source)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))

    def update(self, pairs: dict[str, object], source: str = "<flags>") -> None:
        names = {f.name for f in fields(self)}
        for key, value in pairs.items():
            if key not in names:
                raise ValueError(f"{source}: unknown config key {key!r}")
            try:
                setattr(self, key, _coerce(value, type(getattr(self, key))))
            except ValueError as exc:
                raise ValueError(f"{source}: bad value for {key}: {exc}") from exc

    def digest(self) -> str:
        text = "".join(f"{k}={_render(getattr(self, k))}\n" for k in IDENTITY_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, d=self.d, lr=self.lr, lr_decay=self.lr_decay,
            max_epochs=self.max_epochs, patience=self.patience, max_decays=self.max_decays,
            seed=self.seed, method=self.method, n_intermediate=self.n_intermediate,
            n_in=self.n_in, n_out=self.n_out, anchor=self.anchor,
            transform_hidden=self.transform_hidden, aggregation=self.aggregation,
            threads=self.threads,
        )

    def service(self) -> ServiceWindow:
        return ServiceWindow(_minutes(self.service_start), _minutes(self.service_end), self.interval)

    def similarity_rule(self) -> Selection:
        return Selection.parse(self.similarity)

    def correlation_rule(self) -> Selection:
        return Selection.parse(self.correlation)

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    def identity(self) -> dict[str, str]:
        return {k: _render(getattr(self, k)) for k in IDENTITY_KEYS}

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(value, kind):
    if isinstance(value, str):
        if kind is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {value!r}")
            return low in ("true", "1", "yes")
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _minutes(hhmm: str) -> int:
    h, _, m = hhmm.partition(":")
    return int(h) * 60 + int(m or 0)
