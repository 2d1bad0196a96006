#!/usr/bin/env python3
"""Dictionary-size scaling sweep: n in {8, 16, 32, 64} with k = n/2.

Trains one model per (seed, n) on the shared benchmark and writes a CSV of
average target Dice/HD, to examine how performance scales with the number
of shape experts. Slow: 12 smoke-scale training runs at the defaults.

Usage: python scripts/run_nk_grid.py [out_dir] [seed ...]
"""

import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from shapemix.losses import LossConfig
from shapemix.metrics import evaluate
from shapemix.synthdata import make_benchmark
from shapemix.trainer import TrainConfig, train

GRID = (8, 16, 32, 64)


def main() -> int:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/nk_grid")
    seeds = [int(s) for s in sys.argv[2:]] or [0, 1, 2]
    out.mkdir(parents=True, exist_ok=True)
    bench = make_benchmark(seed=0, image_size=64, n_source_train=200,
                           n_source_val=50, n_target=100)
    rows = ["seed,n,k,target_dice,target_hd,wall_s"]
    for seed in seeds:
        for n in GRID:
            k = n // 2
            cfg = TrainConfig(seed=seed, image_size=64, n_experts=n, top_k=k,
                              batch_size=8, max_iterations=300)
            loss_cfg = LossConfig(t_warmup=30)
            t0 = time.perf_counter()
            state, _ = train(cfg, loss_cfg, bench, out / f"seed{seed}_n{n}")
            report = evaluate(state.params, bench, k=k)
            wall = round(time.perf_counter() - t0, 1)
            row = (f"{seed},{n},{k},{report.avg_target_dice(bench.source_name)!r},"
                   f"{report.avg_target_hd(bench.source_name)!r},{wall}")
            rows.append(row)
            print(row, flush=True)
    (out / "nk_grid.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {out / 'nk_grid.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
