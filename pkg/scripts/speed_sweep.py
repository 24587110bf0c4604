#!/usr/bin/env python3
"""Speed-quality lineup at desk scale: S1/Smax plus the batch-size sweep.

Times randomly initialized models with output lengths pinned to the source
length (what trained models on the bundled length-preserving tasks do), so
no training is needed to reproduce the timing trends.

Usage:
    python scripts/speed_sweep.py [--sentences 1000] [--reps 3] [--out DIR]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from seqbench.bench import batch_sweep, emit_report, run_speed_suite
from seqbench.pipeline import bench_corpus, desk_speed_base, standard_speed_entries


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sentences", type=int, default=1000)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--budget-mb", type=int, default=512)
    ap.add_argument("--out", default="runs/speed_sweep")
    ap.add_argument("--sweep", action="store_true",
                    help="also sweep batch sizes 1/8/50/max")
    args = ap.parse_args()

    base = desk_speed_base()
    entries = standard_speed_entries(base, seed=0)
    srcs = bench_corpus(args.sentences, 8, 32, base.vocab_size, seed=1)

    reports = run_speed_suite(entries, srcs, baseline="ar-6-6",
                              memory_budget_bytes=args.budget_mb << 20,
                              repetitions=args.reps)
    header = f"{'model':<16}{'S1 x':>8}{'Smax x':>8}{'batch':>7}"
    print(header)
    print("-" * len(header))
    for r in reports:
        print(f"{r.model:<16}{r.speedup_s1:>8.2f}{r.speedup_smax:>8.2f}"
              f"{r.batch:>7}")

    if args.sweep:
        curves = batch_sweep(entries, srcs, [1, 8, 50, "max"], "ar-6-6",
                             memory_budget_bytes=args.budget_mb << 20,
                             repetitions=args.reps)
        for r in reports:
            r.batch_curve = curves.get(r.model, [])
        print("\nspeedup vs batch size:")
        for name, pts in curves.items():
            cells = "  ".join(f"{p['batch']}:{p['speedup']:.2f}" for p in pts)
            print(f"  {name:<16}{cells}")

    csv_path, json_path = emit_report(reports, args.out)
    print(f"\nwrote {csv_path} and {json_path}")


if __name__ == "__main__":
    main()
