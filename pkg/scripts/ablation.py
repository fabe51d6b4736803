"""Seven-row component ladder under the seed-42 protocol.

Rows whose run directory already holds a checkpoint from the identical config
are scored without retraining (e.g. the Full row of a reference run placed at
<out-dir>/full).
"""
import argparse

from dgssm.harness.ablate import ablate, markdown_table, monotonicity
from dgssm.harness.config import parse_config


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out-dir", default="runs/ablation")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--no-reuse", action="store_true")
    ap.add_argument("overrides", nargs="*", help="extra key=value config lines")
    args = ap.parse_args()
    cfg = parse_config("\n".join(["seed = 42", *args.overrides]))
    rows = ablate(cfg, args.out_dir, args.threads, reuse=not args.no_reuse)
    print(markdown_table(rows))
    for label, delta in monotonicity(rows):
        print(f"{label:>12}: F_m {delta:+.4f} over previous row")


if __name__ == "__main__":
    main()
