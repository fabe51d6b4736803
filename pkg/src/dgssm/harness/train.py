"""Training loop, structural-prior caching and checkpoint round trips."""
from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from .. import nn
from .. import tensor as T
from ..checkpoint import load_checkpoint, save_checkpoint
from ..diffusion import Denoiser, LatentState, denoise_truncated, encode_latent, forward_noise, train_denoiser
from ..losses import total_loss
from ..network import DGSSM
from ..tensor import Tensor
from .config import RunConfig, config_from_dict
from .data import TEST, TRAIN, SyntheticSample, generate_dataset, read_manifest, stack

CHECKPOINT = "checkpoint.ckpt"
TRAIN_LOG = "train_log.csv"
DENOISER_LOG = "denoiser_log.csv"
CONFIG_FILE = "config.txt"
NAN_DUMP = "nan_dump.txt"
NAN_BATCH = "nan_batch.ckpt"


def load_split(cfg: RunConfig, split: int, threads: int = 1) -> list[SyntheticSample]:
    manifest = cfg.train_manifest if split == TRAIN else cfg.test_manifest
    if manifest:
        return read_manifest(manifest)
    n = cfg.n_train if split == TRAIN else cfg.n_test
    prefix = "train" if split == TRAIN else "test"
    return generate_dataset(n, cfg.size, cfg.size, cfg.seed, prefix, threads, split)


def _images(samples: list[SyntheticSample]) -> np.ndarray:
    rgb, aux, _ = stack(samples)
    return np.concatenate([rgb, aux], axis=1)


def prior_latents(samples: list[SyntheticSample], denoiser: Denoiser | None, cfg: RunConfig) -> np.ndarray | None:
    """Frozen z_{t*} for every sample, drawn with each sample's own seed."""
    if not cfg.dsp:
        return None
    schedule = cfg.schedule()
    z0 = encode_latent(_images(samples), cfg.cz)
    eps = np.stack([np.random.default_rng(s.seed).standard_normal(z0.z.shape[1:]) for s in samples])
    zt = forward_noise(z0, cfg.t_noise, eps, schedule)
    zt = LatentState(Tensor(zt.z.data.astype(np.dtype(cfg.model_config().dtype))), zt.t)
    return denoise_truncated(zt, cfg.t_noise - cfg.t_star, denoiser, schedule).z.data


@dataclass
class TrainResult:
    model: DGSSM
    denoiser: Denoiser | None
    history: list[dict] = field(default_factory=list)
    denoiser_history: list[float] = field(default_factory=list)
    seconds: float = 0.0


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def state_dict(model: DGSSM, denoiser: Denoiser | None) -> dict[str, Tensor]:
    out = {f"model.{k}": v for k, v in model.named_parameters().items()}
    if denoiser is not None:
        out.update({f"denoiser.{k}": v for k, v in denoiser.named_parameters().items()})
    return out


def build_models(cfg: RunConfig) -> tuple[DGSSM, Denoiser | None]:
    mcfg = cfg.model_config()
    model = DGSSM(mcfg, seed=cfg.seed)
    denoiser = Denoiser(cfg.cz, cfg.denoiser_width, seed=cfg.seed + 1, dtype=mcfg.dtype) if cfg.dsp else None
    return model, denoiser


def load_run(path) -> tuple[RunConfig, DGSSM, Denoiser | None]:
    if os.path.isdir(path):
        path = os.path.join(path, CHECKPOINT)
    _, raw_cfg = load_checkpoint(path)
    cfg = config_from_dict(raw_cfg)
    tensors, _ = load_checkpoint(path, np.dtype(cfg.model_config().dtype))
    model, denoiser = build_models(cfg)
    model.load_state({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    if denoiser is not None:
        denoiser.load_state({k[len("denoiser."):]: v for k, v in tensors.items() if k.startswith("denoiser.")})
    return cfg, model, denoiser


def _batch_grads(model: DGSSM, params, rgb, aux, prior, gt, cfg: RunConfig):
    """Loss parts and per-parameter gradients for one (sub-)batch, leaving .grad alone."""
    sink: dict[int, np.ndarray] = {}
    fd = LatentState(Tensor(prior), cfg.t_star) if prior is not None else None
    with T.Tape() as tape:
        out = model(Tensor(rgb), Tensor(aux), fd)
        loss, parts = total_loss(out, gt, cfg.loss_weights())
        if math.isfinite(parts["total"]):
            tape.backward(loss, sink=sink)
    grads = [sink.get(id(p)) for p in params]
    return parts, grads


def _dump_nan(out_dir, epoch, ids, parts, rgb, aux, gt, prior) -> None:
    if not out_dir:
        return
    with open(os.path.join(out_dir, NAN_DUMP), "w") as fh:
        fh.write(f"epoch {epoch}\nsamples {' '.join(ids)}\n")
        for k, v in parts.items():
            fh.write(f"{k} {v!r}\n")
    arrays = {"rgb": Tensor(rgb), "aux": Tensor(aux), "gt": Tensor(gt)}
    if prior is not None:
        arrays["prior"] = Tensor(prior)
    save_checkpoint(os.path.join(out_dir, NAN_BATCH), arrays)


def train(cfg: RunConfig, samples: list[SyntheticSample] | None = None, out_dir: str | None = None,
          threads: int = 1, log=print) -> TrainResult:
    """Fit the denoiser (when the prior is on), then the saliency network.

    Writes ``checkpoint.ckpt``, ``train_log.csv``, ``denoiser_log.csv`` and
    ``config.txt`` into ``out_dir`` when it is given. A non-finite loss aborts
    with a dump of the offending batch.
    """
    start = time.perf_counter()
    if samples is None:
        samples = load_split(cfg, TRAIN, threads)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, CONFIG_FILE), "w") as fh:
            fh.write(cfg.to_text())
    mcfg = cfg.model_config()
    dtype = np.dtype(mcfg.dtype)
    model, denoiser = build_models(cfg)
    log(f"model parameters: {model.num_parameters()}")

    den_hist: list[float] = []
    if cfg.dsp:
        z0 = encode_latent(_images(samples), cfg.cz).z.data
        denoiser, den_hist = train_denoiser(z0, cfg.schedule(), cfg.denoiser_epochs, seed=cfg.seed + 1,
                                            lr=cfg.denoiser_lr, width=cfg.denoiser_width, dtype=dtype)
        if den_hist:
            log(f"denoiser loss {den_hist[0]:.4f} -> {den_hist[-1]:.4f}")
    priors = prior_latents(samples, denoiser, cfg)
    rgb_all, aux_all, gt_all = stack(samples, dtype)
    ids = [s.sample_id for s in samples]

    params = model.parameters()
    opt = nn.SGD(params, lr=cfg.lr, momentum=cfg.momentum, clip_norm=cfg.clip_norm)
    order_rng = np.random.default_rng([cfg.seed, 2])
    history: list[dict] = []
    n = len(samples)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = order_rng.permutation(n)
            sums: dict[str, float] = {}
            for b in range(0, n, cfg.batch_size):
                idx = order[b:b + cfg.batch_size]
                batch = (rgb_all[idx], aux_all[idx], None if priors is None else priors[idx], gt_all[idx])
                batch_ids = [ids[i] for i in idx]
                try:
                    parts, grads = _run_batch(model, params, batch, cfg, pool, threads)
                except T.NonFiniteError as e:
                    _dump_nan(out_dir, epoch, batch_ids, {"error": str(e)}, *batch)
                    raise T.NonFiniteError(f"non-finite value in epoch {epoch} on samples {batch_ids}: {e}") from e
                if not math.isfinite(parts["total"]):
                    _dump_nan(out_dir, epoch, batch_ids, parts, *batch)
                    raise T.NonFiniteError(f"non-finite loss in epoch {epoch} on samples {batch_ids}: {parts}")
                for p, g in zip(params, grads):
                    p.grad = g
                opt.step()
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
            row = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
            history.append(row)
            log(f"epoch {epoch:3d}  loss {row['total']:.4f}  ({time.perf_counter() - t0:.1f}s)")
    finally:
        if pool is not None:
            pool.shutdown()
    opt.zero_grad()

    result = TrainResult(model, denoiser, history, den_hist, time.perf_counter() - start)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, CHECKPOINT), state_dict(model, denoiser), cfg.to_dict())
        keys = [k for k in history[0] if k != "epoch"] if history else ["total"]
        _write_csv(os.path.join(out_dir, TRAIN_LOG), ["epoch"] + keys,
                   [[r["epoch"]] + [_fmt(r[k]) for k in keys] for r in history])
        _write_csv(os.path.join(out_dir, DENOISER_LOG), ["epoch", "loss"],
                   [[i + 1, _fmt(v)] for i, v in enumerate(den_hist)])
    return result


def _run_batch(model, params, batch, cfg: RunConfig, pool, threads: int):
    rgb, aux, prior, gt = batch
    m = len(rgb)
    if pool is None or m < 2:
        return _batch_grads(model, params, rgb, aux, prior, gt, cfg)
    # per-sample-group forward/backward on worker threads; gradients are
    # combined in sub-batch order when deterministic, completion order otherwise
    chunks = [c for c in np.array_split(np.arange(m), min(threads, m)) if len(c)]
    futures = [pool.submit(_batch_grads, model, params, rgb[c], aux[c],
                           None if prior is None else prior[c], gt[c], cfg) for c in chunks]
    weights = {f: len(c) / m for f, c in zip(futures, chunks)}
    done = futures if cfg.deterministic else list(as_completed(futures))
    parts: dict[str, float] = {}
    grads: list = [None] * len(params)
    for f in done:
        sub_parts, sub_grads = f.result()
        w = weights[f]
        for k, v in sub_parts.items():
            parts[k] = parts.get(k, 0.0) + w * v
        for i, g in enumerate(sub_grads):
            if g is not None:
                grads[i] = w * g if grads[i] is None else grads[i] + w * g
    return parts, grads
