"""Cumulative component ladder: each row switches on one more module."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

from ..metrics import EvalResult
from .config import FLAGS, RunConfig
from .data import TEST, TRAIN
from .evaluate import evaluate
from .train import CHECKPOINT, CONFIG_FILE, load_split, train

LADDER = (
    ("Baseline", "baseline", ()),
    ("+DSP", "dsp", ("dsp",)),
    ("+ASP", "asp", ("dsp", "asp")),
    ("+MS-SS", "msss", ("dsp", "asp", "msss")),
    ("+BARH", "barh", ("dsp", "asp", "msss", "barh")),
    ("+IMDR", "imdr", ("dsp", "asp", "msss", "barh", "imdr")),
    ("Full DGSSM", "full", FLAGS),
)
TABLE_MD = "ablation.md"
TABLE_CSV = "ablation.csv"


@dataclass
class AblationRow:
    label: str
    slug: str
    result: EvalResult
    reused: bool = False


def ladder_configs(base: RunConfig) -> list[tuple[str, str, RunConfig]]:
    return [(label, slug, base.with_flags(**{f: f in on for f in FLAGS})) for label, slug, on in LADDER]


def _cached(run_dir: str, cfg: RunConfig) -> bool:
    try:
        with open(os.path.join(run_dir, CONFIG_FILE)) as fh:
            same = fh.read() == cfg.to_text()
    except FileNotFoundError:
        return False
    return same and os.path.exists(os.path.join(run_dir, CHECKPOINT))


def ablate(base: RunConfig, out_dir: str, threads: int = 1, reuse: bool = True, log=print) -> list[AblationRow]:
    """Train and score every ladder row under identical seeds and epochs.

    Each row lives in ``out_dir/<slug>/``. With ``reuse`` a row whose
    directory already holds a checkpoint trained from the identical config is
    scored without retraining; training is deterministic, so this is the same
    result a fresh run would give.
    """
    os.makedirs(out_dir, exist_ok=True)
    train_set = load_split(base, TRAIN, threads)
    test_set = load_split(base, TEST, threads)
    rows = []
    for label, slug, cfg in ladder_configs(base):
        run_dir = os.path.join(out_dir, slug)
        reused = reuse and _cached(run_dir, cfg)
        if reused:
            log(f"[{label}] reusing {run_dir}")
        else:
            log(f"[{label}] training")
            train(cfg, train_set, run_dir, threads, log=log)
        summary, _ = evaluate(run_dir, test_set, run_dir, threads)
        log(f"[{label}] S_m {summary.s_measure:.4f}  F_m {summary.f_measure_mean:.4f}  E_m {summary.e_measure_mean:.4f}")
        rows.append(AblationRow(label, slug, summary, reused))
    write_table(rows, out_dir)
    return rows


def markdown_table(rows: list[AblationRow]) -> str:
    lines = ["| Model | S_m | F_m | E_m |", "|---|---|---|---|"]
    for r in rows:
        res = r.result
        lines.append(f"| {r.label} | {res.s_measure:.4f} | {res.f_measure_mean:.4f} | {res.e_measure_mean:.4f} |")
    return "\n".join(lines) + "\n"


def write_table(rows: list[AblationRow], out_dir: str) -> None:
    with open(os.path.join(out_dir, TABLE_MD), "w") as fh:
        fh.write(markdown_table(rows))
    with open(os.path.join(out_dir, TABLE_CSV), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "s_measure", "f_measure_mean", "e_measure_mean", "mae"])
        for r in rows:
            res = r.result
            w.writerow([r.label] + [f"{v:.10f}" for v in (res.s_measure, res.f_measure_mean,
                                                          res.e_measure_mean, res.mae)])


def monotonicity(rows: list[AblationRow]) -> list[tuple[str, float]]:
    """F_m change of every row over the previous one (reported, not asserted)."""
    return [(b.label, b.result.f_measure_mean - a.result.f_measure_mean) for a, b in zip(rows, rows[1:])]
