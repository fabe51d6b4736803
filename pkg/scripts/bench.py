"""Sequential vs parallel scan throughput; writes bench.csv and bench_summary.txt."""
import argparse

from dgssm.harness.bench import bench
from dgssm.harness.config import parse_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="runs/bench")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("overrides", nargs="*", help="extra key=value config lines, e.g. bench_dh=4")
    args = ap.parse_args()
    report = bench(parse_config("\n".join(["seed = 0", *args.overrides])), args.out_dir, args.threads)
    print(report.summary())


if __name__ == "__main__":
    main()
