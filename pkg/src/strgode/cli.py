"""Command line: build-graphs | train | evaluate | predict | synth."""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    RidershipSeries, bin_transactions, build_od_matrix, fit_selection, read_ridership_csv,
    read_topology_csv, read_transactions_csv, sample_transactions, split_dataset, split_days,
    synth_generate, window_set, write_ridership_csv, write_topology_csv, write_transactions_csv,
)
from .evaluate import Batch, ModelPredictor, run_conventional, run_irregular, run_peak
from .graphs import (
    KINDS, TriGraph, build_correlation, build_physical, build_similarity, read_trigraph, write_trigraph,
)
from .model import ModelParams, load_checkpoint, save_checkpoint
from .training import NormStats, fit

log = logging.getLogger("strgode")

PROTOCOLS = ("conventional", "peak", "irregular")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    p.add_argument("--config", help="flat 'key = value' file; flags override it")
    for f in fields(RunConfig):
        if f.name not in skip:
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="strgode", description="Graph-ODE ridership forecasting")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset bundle")
    p.add_argument("--stations", type=int, default=10)
    p.add_argument("--days", type=int, default=40)
    _add_config_flags(p)

    p = sub.add_parser("build-graphs", help="build relation graphs from CSV inputs")
    p.add_argument("--ridership", help="time,station_id,inflow,outflow CSV (binned from transactions if absent)")
    p.add_argument("--transactions", required=True, help="entry_time,exit_time,origin_id,destination_id CSV")
    p.add_argument("--topology", required=True, help="station_a,station_b CSV of physical links")
    p.add_argument("--stations", type=int, help="station count (default: inferred)")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train a model on a bundle")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    _add_config_flags(p)

    p = sub.add_parser("predict", help="forecast from an observation CSV")
    p.add_argument("--observations", required=True, help="time,station_id,inflow,outflow CSV")
    p.add_argument("--horizon", type=int, default=4, help="number of future bins to predict")
    _add_config_flags(p)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    env_threads = os.environ.get("STRGODE_THREADS")
    if env_threads:
        cfg.update({"threads": env_threads}, "STRGODE_THREADS")
    flags = {f.name: getattr(args, f.name) for f in fields(RunConfig)
             if getattr(args, f.name, None) is not None}
    cfg.update(flags, "command line")
    return cfg


def _require(path: str, what: str) -> Path:
    if not path:
        raise ValueError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p}: no such file or directory")
    return p


def data_digest(directory: Path, graphs_dir: Path | None = None) -> str:
    """Hash of the ridership CSV and the three graph files a run consumes."""
    graphs_dir = graphs_dir or directory
    h = hashlib.sha256()
    for path in [directory / "ridership.csv"] + [graphs_dir / f"{k}.graph" for k in KINDS]:
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _write_bundle_meta(out: Path, cfg: RunConfig, extra: dict[str, object]) -> None:
    lines = [f"{k} = {v}" for k, v in extra.items()]
    lines.append(f"data_digest = {data_digest(out)}")
    (out / "bundle.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "run.cfg").write_text(cfg.to_text(), encoding="utf-8")


def cmd_synth(cfg: RunConfig, args) -> None:
    out = Path(cfg.out or "synth")
    out.mkdir(parents=True, exist_ok=True)
    data = synth_generate(args.stations, args.days, cfg.seed, service=cfg.service(),
                          train_fraction=cfg.train_fraction, similarity=cfg.similarity_rule(),
                          correlation=cfg.correlation_rule(),
                          dtw_band=None if cfg.dtw_band < 0 else cfg.dtw_band)
    write_ridership_csv(out / "ridership.csv", data.series)
    write_topology_csv(out / "topology.csv", data.edges)
    rng = np.random.default_rng(cfg.seed + 1)
    trips = sample_transactions(data.od, data.series.days[:data.train_days], data.series.service, rng)
    write_transactions_csv(out / "transactions.csv", trips)
    write_trigraph(data.graphs, out)
    _write_bundle_meta(out, cfg, {"stations": args.stations, "days": args.days, "seed": cfg.seed})
    print(f"wrote synthetic bundle to {out}")


def cmd_build_graphs(cfg: RunConfig, args) -> None:
    out = Path(cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    records = read_transactions_csv(_require(args.transactions, "transactions"))
    pairs = read_topology_csv(_require(args.topology, "topology"))
    service = cfg.service()
    if args.ridership:
        series = read_ridership_csv(_require(args.ridership, "ridership"), args.stations, service)
    else:
        n = args.stations or 1 + max([max(p) for p in pairs] + [max(r.origin, r.destination) for r in records])
        series = bin_transactions(records, n, service)
    n = series.n_stations
    n_train, _ = split_days(series.n_days, (cfg.train_fraction, cfg.val_fraction))
    train = series.select_days(slice(0, n_train))
    start = dt.datetime.combine(series.days[0], dt.time())
    end = dt.datetime.combine(series.days[0] + dt.timedelta(days=n_train), dt.time())
    od = build_od_matrix(records, n, start, end)
    band = None if cfg.dtw_band < 0 else cfg.dtw_band
    graphs = TriGraph(
        build_physical(pairs, n),
        build_similarity(train.station_series(), fit_selection(cfg.similarity_rule(), n), band),
        build_correlation(od, fit_selection(cfg.correlation_rule(), n)),
    )
    write_trigraph(graphs, out)
    write_ridership_csv(out / "ridership.csv", series)
    _write_bundle_meta(out, cfg, {"stations": n, "days": series.n_days})
    print(f"wrote graphs to {out}")


def load_bundle(cfg: RunConfig) -> tuple[RidershipSeries, TriGraph, str]:
    data = _require(cfg.data, "data")
    graphs_dir = Path(cfg.graphs) if cfg.graphs else data
    series = read_ridership_csv(data / "ridership.csv", service=cfg.service())
    graphs = read_trigraph(graphs_dir)
    if graphs.n_stations != series.n_stations:
        raise ValueError(f"{graphs_dir}: graphs have {graphs.n_stations} stations, "
                         f"ridership has {series.n_stations}")
    return series, graphs, data_digest(data, graphs_dir)


def splits(series: RidershipSeries, cfg: RunConfig):
    return split_dataset(series, split_days(series.n_days, (cfg.train_fraction, cfg.val_fraction)))


def cmd_train(cfg: RunConfig, args) -> None:
    series, graphs, ddig = load_bundle(cfg)
    train, val, _ = splits(series, cfg)
    out = Path(cfg.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.log", "w", encoding="utf-8") as fh:
        fh.write(f"# digest {cfg.digest()}\n")
        result = fit(train, val, graphs, cfg.train_config(), log_to=fh)
    arrays = dict(result.params.values)
    arrays["norm_mean"] = result.norm.mean
    arrays["norm_std"] = result.norm.std
    meta = {"digest": cfg.digest(), "data_digest": ddig, "best_epoch": str(result.best_epoch),
            "data": str(Path(cfg.data).resolve()),
            "graphs": str(Path(cfg.graphs).resolve()) if cfg.graphs else ""}
    meta.update({f"cfg.{k}": v for k, v in cfg.identity().items()})
    save_checkpoint(out / "model.ckpt", arrays, meta)
    status = " (diverged; kept last finite best)" if result.diverged else ""
    print(f"trained {len(result.history)} epochs, best epoch {result.best_epoch}{status}; wrote {out}")


def load_model(path: Path, cfg: RunConfig) -> tuple[ModelParams, NormStats, RunConfig, dict[str, str]]:
    """Parameters, normalization and the training-time config stored in a checkpoint."""
    arrays, meta = load_checkpoint(path)
    norm = NormStats(arrays.pop("norm_mean"), arrays.pop("norm_std"))
    params = ModelParams(arrays)
    params.validate()
    stored = cfg.replace(data=cfg.data or meta.get("data", ""), graphs=cfg.graphs or meta.get("graphs", ""))
    stored.update({k[4:]: v for k, v in meta.items() if k.startswith("cfg.")}, str(path))
    if stored.digest() != meta.get("digest"):
        raise ValueError(f"{path}: stored config does not match its digest")
    return params, norm, stored, meta


def cmd_evaluate(cfg: RunConfig, args) -> None:
    ckpt = _require(cfg.checkpoint, "checkpoint")
    params, norm, run_cfg, meta = load_model(ckpt, cfg)
    series, graphs, ddig = load_bundle(run_cfg)
    if meta.get("data_digest") != ddig:
        raise ValueError(f"{ckpt}: checkpoint was trained on data {meta.get('data_digest')}, "
                         f"bundle is {ddig}; refusing to combine")
    _, _, test = splits(series, run_cfg)
    predictor = ModelPredictor(params, graphs, run_cfg.train_config().model_config(), norm,
                               threads=cfg.threads)
    report_meta = {"digest": meta["digest"], "data_digest": ddig}
    protocols = PROTOCOLS if cfg.protocol == "all" else (cfg.protocol,)
    out = Path(cfg.out or ckpt.parent)
    for protocol in protocols:
        if protocol == "conventional":
            report = run_conventional(predictor, Batch.from_windows(window_set(test, run_cfg.n_in, run_cfg.n_out)),
                                      report_meta)
        elif protocol == "peak":
            report = run_peak(predictor, Batch.from_windows(window_set(test, run_cfg.n_in, run_cfg.n_out)),
                              report_meta)
        elif protocol == "irregular":
            span = cfg.irregular_span
            full = window_set(test, span // 2, span - span // 2)
            report = run_irregular(predictor, full, cfg.observed, cfg.seed_list(), cfg.targets,
                                   report_meta, cfg.allow_interleaved)
        else:
            raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS + ('all',)}")
        txt, _ = report.write(out)
        print(report.to_text(), end="")
        print(f"wrote {txt}")


def cmd_predict(cfg: RunConfig, args) -> None:
    ckpt = _require(cfg.checkpoint, "checkpoint")
    params, norm, run_cfg, meta = load_model(ckpt, cfg)
    graphs_dir = Path(cfg.graphs or cfg.data or ckpt.parent)
    graphs = read_trigraph(graphs_dir)
    times, values = read_observations(_require(args.observations, "observations"), graphs.n_stations)
    interval = run_cfg.interval
    t_units = np.array([(t - times[0]).total_seconds() / 60 / interval for t in times])
    if args.horizon < 0:
        raise ValueError("--horizon must be non-negative")
    horizon = t_units[-1] + np.arange(1, args.horizon + 1)
    predictor = ModelPredictor(params, graphs, run_cfg.train_config().model_config(), norm)
    batch = Batch(t_units[None], values[None], horizon[None], np.zeros((1, args.horizon) + values.shape[1:]))
    pred = predictor.predict(batch)[0] if args.horizon else np.zeros((0,) + values.shape[1:])
    out = Path(cfg.out or "predictions.csv")
    lines = [f"# digest {meta['digest']}", "time,station_id,inflow,outflow"]
    for k in range(args.horizon):
        stamp = times[-1] + dt.timedelta(minutes=interval * (k + 1))
        for s in range(graphs.n_stations):
            lines.append(f"{stamp.isoformat()},{s},{pred[k, s, 0]:.6f},{pred[k, s, 1]:.6f}")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out}")


def read_observations(path: Path, n_stations: int) -> tuple[list[dt.datetime], np.ndarray]:
    """Observation rows at arbitrary (possibly irregular) timestamps."""
    rows: dict[dt.datetime, np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#") or (lineno == 1 and not row[0][:1].isdigit()):
                continue
            try:
                when = dt.datetime.fromisoformat(row[0])
                station, inflow, outflow = int(row[1]), float(row[2]), float(row[3])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row") from exc
            if not 0 <= station < n_stations:
                raise ValueError(f"{path}:{lineno}: station {station} out of range")
            rows.setdefault(when, np.zeros((n_stations, 2)))[station] = (inflow, outflow)
    if not rows:
        raise ValueError(f"{path}: no observations")
    times = sorted(rows)
    return times, np.stack([rows[t] for t in times])


COMMANDS = {
    "synth": cmd_synth,
    "build-graphs": cmd_build_graphs,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"strgode: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"strgode: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
