"""Scan kernel throughput and agreement report."""
from __future__ import annotations

import os

from ..scan import BenchReport, bench_scan
from .config import RunConfig

BENCH_CSV = "bench.csv"
BENCH_SUMMARY = "bench_summary.txt"


def bench(cfg: RunConfig, out_dir: str | None = None, threads: int = 1) -> BenchReport:
    report = bench_scan(sorted(cfg.bench_lengths), cfg.bench_dh, cfg.bench_reps, threads, cfg.seed)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, BENCH_CSV), "w", newline="") as fh:
            fh.write(report.to_csv())
        with open(os.path.join(out_dir, BENCH_SUMMARY), "w") as fh:
            fh.write(report.summary() + "\n")
    return report
