"""Seed-42 desk-scale reference run: train, score the held-out split, report.

    python scripts/reference_run.py --out-dir runs/reference [key=value ...]
"""
import argparse

from dgssm.harness.config import parse_config
from dgssm.harness.data import TEST
from dgssm.harness.evaluate import evaluate
from dgssm.harness.train import load_split, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out-dir", default="runs/reference")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("overrides", nargs="*", help="extra key=value config lines")
    args = ap.parse_args()
    cfg = parse_config("\n".join(["seed = 42", *args.overrides]))
    res = train(cfg, out_dir=args.out_dir, threads=args.threads)
    summary, _ = evaluate(args.out_dir, load_split(cfg, TEST, args.threads), args.out_dir, args.threads)
    first, last = res.history[0]["total"], res.history[-1]["total"]
    print(f"loss {first:.4f} -> {last:.4f}  train {res.seconds:.0f}s")
    print(f"held-out S_m {summary.s_measure:.4f}  F_m {summary.f_measure_mean:.4f}  "
          f"E_m {summary.e_measure_mean:.4f}  MAE {summary.mae:.4f}")


if __name__ == "__main__":
    main()
