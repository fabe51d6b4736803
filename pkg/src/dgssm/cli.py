"""Command line entry point: ``dgssm generate|train|eval|ablate|bench``.

Every subcommand reads an optional ``key = value`` config file; ``--seed``
and ``--precision`` override the file. Outputs land in ``--out-dir``:

    generate  train/{manifest.txt,*.ppm,*.pgm}  test/{...}
    train     checkpoint.ckpt  train_log.csv  denoiser_log.csv  config.txt
    eval      eval.csv
    ablate    <row>/...  ablation.md  ablation.csv
    bench     bench.csv  bench_summary.txt
"""
from __future__ import annotations

import argparse
import os
import sys

from .harness.config import RunConfig, load_config, parse_config


def _config(args) -> RunConfig:
    overrides = {"seed": args.seed, "precision": args.precision}
    if args.config:
        return load_config(args.config, **overrides)
    return parse_config("", **overrides)


def cmd_generate(args, cfg: RunConfig) -> int:
    from .harness.data import TEST, TRAIN, generate_dataset, write_dataset

    for split, name, n in ((TRAIN, "train", cfg.n_train), (TEST, "test", cfg.n_test)):
        samples = generate_dataset(n, cfg.size, cfg.size, cfg.seed, name, args.threads, split)
        path = write_dataset(samples, os.path.join(args.out_dir, name))
        print(f"{name}: {n} samples -> {path}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .harness.train import train

    res = train(cfg, out_dir=args.out_dir, threads=args.threads)
    if res.history:
        print(f"loss {res.history[0]['total']:.4f} -> {res.history[-1]['total']:.4f} in {res.seconds:.1f}s")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .harness.evaluate import evaluate
    from .harness.train import CHECKPOINT, load_run

    ckpt = args.checkpoint or os.path.join(args.out_dir, CHECKPOINT)
    run_cfg, model, denoiser = load_run(ckpt)
    if args.config:
        # the config file may point at a different held-out manifest
        run_cfg.test_manifest = cfg.test_manifest or run_cfg.test_manifest
    summary, _ = evaluate(ckpt, out_dir=args.out_dir, threads=args.threads, run=(run_cfg, model, denoiser))
    print(f"S_m {summary.s_measure:.4f}  F_m {summary.f_measure_mean:.4f}  "
          f"E_m {summary.e_measure_mean:.4f}  MAE {summary.mae:.4f}")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .harness.ablate import ablate, markdown_table, monotonicity

    rows = ablate(cfg, args.out_dir, args.threads)
    print(markdown_table(rows))
    for label, delta in monotonicity(rows):
        print(f"{label:>12}: F_m {delta:+.4f} over previous row")
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    from .harness.bench import bench

    report = bench(cfg, args.out_dir, args.threads)
    print(report.summary())
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgssm", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value run configuration")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out-dir", default="out")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--precision", choices=("f32", "f64"))
    parser.add_argument("--checkpoint", help="eval: checkpoint path (default <out-dir>/checkpoint.ckpt)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("dgssm: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = _config(args)
    except ValueError as e:
        print(f"dgssm: bad config: {e}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
