"""Train on the synthetic benchmark and print conventional / peak / irregular tables.

    python3 scripts/synthetic_benchmark.py --seeds 0 1 2 --epochs 15
"""

import argparse
import time

import numpy as np

from strgode.data import split_dataset, synth_generate, window_set
from strgode.evaluate import (
    Batch, HistoricalAverage, ModelPredictor, PersistencePredictor, mean_report, run_conventional,
    run_irregular, run_peak,
)
from strgode.training import TrainConfig, fit


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--stations", type=int, default=10)
    ap.add_argument("--days", type=int, default=40)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--patience", type=int, default=3)
    ap.add_argument("--lr", type=float, default=0.003)
    ap.add_argument("--d", type=int, default=16)
    ap.add_argument("--method", default="rk4")
    args = ap.parse_args()

    data = synth_generate(args.stations, args.days, args.data_seed)
    n_train = int(round(0.7 * args.days))
    train, val, test = split_dataset(data.series, (n_train, int(round(0.1 * args.days))))
    batch = Batch.from_windows(window_set(test, 4, 4))
    full = window_set(test, 8, 8)
    meta = {"digest": f"synth-{args.stations}-{args.days}-{args.data_seed}"}

    reports = {"conventional": [], "peak": [], "irregular": []}
    for seed in args.seeds:
        cfg = TrainConfig(d=args.d, max_epochs=args.epochs, patience=args.patience, lr=args.lr,
                          seed=seed, method=args.method)
        start = time.perf_counter()
        res = fit(train, val, data.graphs, cfg)
        print(f"seed {seed}: {len(res.history)} epochs, best {res.best_epoch}, "
              f"{time.perf_counter() - start:.0f}s")
        model = ModelPredictor(res.params, data.graphs, cfg.model_config(), res.norm)
        reports["conventional"].append(run_conventional(model, batch, meta))
        reports["peak"].append(run_peak(model, batch, meta))
        reports["irregular"].append(run_irregular(model, full, 4, [0, 1, 2, 3, 4], meta=meta))

    for name, rs in reports.items():
        print(mean_report(rs).to_text())
    for label, base in (("persistence", PersistencePredictor()), ("historical average", HistoricalAverage(train))):
        report = run_conventional(base, batch, meta)
        print(f"{label}: " + " ".join(f"{r.horizon} {r.mae:.3f}" for r in report.rows))
    print("mean model MAE", np.mean([r.mae for r in mean_report(reports["conventional"]).rows]))


if __name__ == "__main__":
    main()
