"""Saliency evaluation metrics: S-measure, mean F-measure, mean E-measure, MAE.

Thresholded metrics binarize the prediction with ``pred >= tau`` for the 255
thresholds tau = k/256, k = 1..255, and average the per-threshold scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = np.spacing(1.0)
BETA2 = 0.3
THRESHOLDS = np.arange(1, 256) / 256.0


@dataclass
class EvalResult:
    s_measure: float
    f_measure_mean: float
    e_measure_mean: float
    mae: float


def _prep(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    g = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    p = p.reshape(p.shape[-2:]) if p.ndim > 2 else p
    g = g.reshape(g.shape[-2:]) if g.ndim > 2 else g
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p, g > 0.5


def mae(pred, gt) -> float:
    p, g = _prep(pred, gt)
    return float(np.mean(np.abs(p - g)))


# -- S-measure -------------------------------------------------------------

def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _s_object(p: np.ndarray, g: np.ndarray) -> float:
    u = g.mean()
    fg = _object_score(p[g])
    bg = _object_score(1.0 - p[~g])
    return u * fg + (1.0 - u) * bg


def _centroid(g: np.ndarray) -> tuple[int, int]:
    h, w = g.shape
    if not g.any():
        return int(np.round(w / 2)), int(np.round(h / 2))
    y, x = np.argwhere(g).mean(axis=0).round()
    return int(x) + 1, int(y) + 1


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), g.mean()
    sx = np.sum((p - x) ** 2) / (n - 1 + EPS)
    sy = np.sum((g - y) ** 2) / (n - 1 + EPS)
    sxy = np.sum((p - x) * (g - y)) / (n - 1 + EPS)
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _s_region(p: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    x, y = _centroid(g)
    gf = g.astype(np.float64)
    area = h * w
    w1 = x * y / area
    w2 = y * (w - x) / area
    w3 = (h - y) * x / area
    w4 = 1.0 - w1 - w2 - w3
    quads = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
             (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    return sum(wt * _ssim(p[q], gf[q]) for wt, q in zip((w1, w2, w3, w4), quads))


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    p, g = _prep(pred, gt)
    y = g.mean()
    if y == 0:
        return float(1.0 - p.mean())
    if y == 1:
        return float(p.mean())
    return float(max(0.0, alpha * _s_object(p, g) + (1.0 - alpha) * _s_region(p, g)))


# -- F-measure -------------------------------------------------------------

def _threshold_counts(p: np.ndarray, g: np.ndarray):
    """Per-threshold (#predicted positive, #true positive) via cumulative histograms."""
    bins = np.searchsorted(THRESHOLDS, p.ravel(), side="right")  # number of tau <= p
    n_tau = len(THRESHOLDS)
    all_hist = np.bincount(bins, minlength=n_tau + 1)
    fg_hist = np.bincount(bins[g.ravel()], minlength=n_tau + 1)
    # a pixel with bins == b is positive for the first b thresholds
    pos = np.cumsum(all_hist[::-1])[::-1][1:]
    tp = np.cumsum(fg_hist[::-1])[::-1][1:]
    return pos.astype(np.float64), tp.astype(np.float64)


def f_measure_curve(pred, gt) -> np.ndarray:
    p, g = _prep(pred, gt)
    pos, tp = _threshold_counts(p, g)
    n_fg = float(g.sum())
    prec = np.divide(tp, pos, out=np.zeros_like(tp), where=pos > 0)
    rec = tp / n_fg if n_fg > 0 else np.zeros_like(tp)
    num = (1.0 + BETA2) * prec * rec
    den = BETA2 * prec + rec
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def f_measure_mean(pred, gt) -> float:
    return float(f_measure_curve(pred, gt).mean())


# -- E-measure -------------------------------------------------------------

def e_measure_curve(pred, gt) -> np.ndarray:
    p, g = _prep(pred, gt)
    gf = g.astype(np.float64)
    n = g.size
    m = gf.mean()
    pos, tp = _threshold_counts(p, g)
    if m == 0:
        return 1.0 - pos / n
    if m == 1:
        return pos / n
    # a binarized map is two-valued; so is the centred gt, so the enhanced
    # alignment takes one of four values per threshold, weighted by counts
    n_fg = gf.sum()
    scores = np.empty(len(THRESHOLDS))
    g_hi, g_lo = 1.0 - m, -m
    for i, (npos, ntp) in enumerate(zip(pos, tp)):
        q = npos / n
        f_hi, f_lo = 1.0 - q, -q
        counts = ((ntp, g_hi, f_hi), (n_fg - ntp, g_hi, f_lo),
                  (npos - ntp, g_lo, f_hi), (n - n_fg - npos + ntp, g_lo, f_lo))
        total = 0.0
        for c, gv, fv in counts:
            if c:
                align = 2.0 * gv * fv / (gv * gv + fv * fv + EPS)
                total += c * (align + 1.0) ** 2 / 4.0
        scores[i] = total / n
    return scores


def e_measure_mean(pred, gt) -> float:
    return float(e_measure_curve(pred, gt).mean())


def evaluate_map(pred, gt) -> EvalResult:
    return EvalResult(s_measure(pred, gt), f_measure_mean(pred, gt), e_measure_mean(pred, gt), mae(pred, gt))
