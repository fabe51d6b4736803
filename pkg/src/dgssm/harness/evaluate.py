"""Per-sample and aggregate metrics for a trained checkpoint."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .. import tensor as T
from ..diffusion import LatentState
from ..metrics import EvalResult, evaluate_map
from ..network import DGSSM
from ..tensor import Tensor
from .config import RunConfig
from .data import TEST, SyntheticSample, stack
from .train import load_run, load_split, prior_latents

EVAL_CSV = "eval.csv"
EVAL_HEADER = ["sample_id", "s_measure", "f_measure_mean", "e_measure_mean", "mae"]


def predict(model: DGSSM, denoiser, cfg: RunConfig, samples: list[SyntheticSample],
            batch_size: int | None = None) -> np.ndarray:
    """Final saliency maps (N, 1, H, W) for ``samples``."""
    mcfg = model.cfg
    if samples[0].rgb.shape[0] != mcfg.rgb_channels or samples[0].aux.shape[0] != mcfg.aux_channels:
        raise T.ShapeError(f"checkpoint expects {mcfg.rgb_channels}+{mcfg.aux_channels} channels, "
                           f"data has {samples[0].rgb.shape[0]}+{samples[0].aux.shape[0]}")
    dtype = np.dtype(mcfg.dtype)
    rgb, aux, _ = stack(samples, dtype)
    priors = prior_latents(samples, denoiser, cfg)
    bs = batch_size or cfg.batch_size
    maps = []
    with T.no_tape():
        for b in range(0, len(samples), bs):
            fd = None if priors is None else LatentState(Tensor(priors[b:b + bs]), cfg.t_star)
            out = model(Tensor(rgb[b:b + bs]), Tensor(aux[b:b + bs]), fd)
            maps.append(out["final"].prob.data)
    return np.concatenate(maps, axis=0)


def score(maps: np.ndarray, samples: list[SyntheticSample], threads: int = 1) -> list[EvalResult]:
    jobs = [(maps[i], s.gt) for i, s in enumerate(samples)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda j: evaluate_map(*j), jobs))
    return [evaluate_map(*j) for j in jobs]


def mean_result(results: list[EvalResult]) -> EvalResult:
    return EvalResult(*(float(np.mean([getattr(r, f) for r in results]))
                        for f in ("s_measure", "f_measure_mean", "e_measure_mean", "mae")))


def write_eval_csv(path, ids: list[str], results: list[EvalResult]) -> EvalResult:
    summary = mean_result(results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for sid, r in zip(ids + ["mean"], results + [summary]):
            w.writerow([sid] + [f"{v:.10f}" for v in (r.s_measure, r.f_measure_mean, r.e_measure_mean, r.mae)])
    return summary


def evaluate(checkpoint, samples: list[SyntheticSample] | None = None, out_dir: str | None = None,
             threads: int = 1, run=None) -> tuple[EvalResult, list[EvalResult]]:
    """Score a checkpoint on ``samples`` (the config's held-out split by default).

    ``run`` may carry an already loaded (cfg, model, denoiser) triple.
    """
    cfg, model, denoiser = run if run is not None else load_run(checkpoint)
    if samples is None:
        samples = load_split(cfg, TEST, threads)
    maps = predict(model, denoiser, cfg, samples)
    results = score(maps, samples, threads)
    summary = mean_result(results)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_eval_csv(os.path.join(out_dir, EVAL_CSV), [s.sample_id for s in samples], results)
    return summary, results
