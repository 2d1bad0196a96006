#!/usr/bin/env python3
"""End-to-end smoke run: generate data, train the shipped smoke config,
evaluate, and export expert heatmaps.

Usage: python scripts/run_smoke.py [out_dir]
"""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from shapemix.cli import load_config, visualize_experts
from shapemix.metrics import evaluate, report_csv
from shapemix.synthdata import make_benchmark
from shapemix.trainer import train


def main() -> int:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/smoke")
    cfg = load_config(str(Path(__file__).resolve().parents[1] / "configs/smoke.json"), {})
    t0 = time.perf_counter()
    bench = make_benchmark(seed=cfg.seed, image_size=cfg.image_size,
                           n_source_train=cfg.source_train,
                           n_source_val=cfg.source_val, n_target=cfg.target_size)
    state, rows = train(cfg.train_config(), cfg.loss_config(), bench, out)
    report = evaluate(state.params, bench, k=cfg.top_k)
    (out / "report.csv").write_text(report_csv(report))
    visualize_experts(state.params, out / "experts")
    print(f"wall: {time.perf_counter() - t0:.0f}s")
    for r in report.rows:
        print(f"{r.domain:16s} dice={r.dice_mean:.4f} hd={r.hd_mean:.2f}")
    print(f"dead experts: {report.utilization.dead_expert_count} "
          f"usage_cv: {report.utilization.usage_cv:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
