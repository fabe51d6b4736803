"""Training objective: BCE + IoU on the final map, Sobel edge loss,
self-distillation, and progressive supervision of every refinement step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .network import SaliencyMap, sobel_edges
from .tensor import Tensor

PROB_CLAMP = 1e-6
SOBEL_MAX = 4.0


@dataclass
class LossWeights:
    gamma: float = 1.0
    delta: float = 0.1
    omega: tuple | None = None

    def __post_init__(self):
        if self.gamma < 0 or self.delta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.omega is not None:
            self.omega = tuple(float(w) for w in self.omega)
            if any(w < 0 for w in self.omega):
                raise ValueError("loss weights must be non-negative")

    def progressive(self, K: int) -> tuple:
        if self.omega is None:
            return tuple(0.4 * k / K for k in range(1, K + 1))
        if len(self.omega) != K:
            raise ValueError(f"omega has {len(self.omega)} weights but the model refines {K} times")
        return self.omega


def _prob(x) -> Tensor:
    return x.prob if isinstance(x, SaliencyMap) else x


def _gt(gt, like: Tensor) -> Tensor:
    g = _prob(gt) if isinstance(gt, (SaliencyMap, Tensor)) else Tensor(np.asarray(gt, dtype=like.dtype))
    if g.shape != like.shape:
        raise T.ShapeError(f"prediction {like.shape} and ground truth {g.shape} differ")
    return g


def bce_loss(pred, gt) -> Tensor:
    p = _prob(pred)
    g = _gt(gt, p)
    pc = T.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return T.mean(-(g * T.log(pc) + (1.0 - g) * T.log(1.0 - pc)))


def iou_loss(pred, gt, smooth: float = 1.0) -> Tensor:
    """Soft IoU loss per map, averaged over a leading batch axis if present."""
    p = _prob(pred)
    g = _gt(gt, p)
    axes = (-3, -2, -1) if p.ndim >= 3 else tuple(range(-p.ndim, 0))
    inter = T.sum_(p * g, axis=axes)
    union = T.sum_(p, axis=axes) + T.sum_(g, axis=axes) - inter
    return T.mean(1.0 - (inter + smooth) / (union + smooth))


def normalized_edges(x) -> Tensor:
    return T.clamp(sobel_edges(_prob(x)) * (1.0 / SOBEL_MAX), 0.0, 1.0)


def edge_loss(pred, gt) -> Tensor:
    p = _prob(pred)
    g = _gt(gt, p)
    with T.no_tape():
        target = normalized_edges(g)
    return bce_loss(normalized_edges(p), target)


def kd_loss(student: list[Tensor], teacher: Tensor) -> Tensor:
    """Sum over student stages of ||e_s - e_t||^2, averaged over the batch."""
    t = T.detach(teacher)
    total = None
    for e in student:
        d = e - t
        term = T.mean(T.sum_(d * d, axis=-1))
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=teacher.dtype))
    return total


def total_loss(out: dict, gt, weights: LossWeights | None = None) -> tuple[Tensor, dict]:
    """Weighted objective and a float breakdown of every term."""
    weights = weights or LossWeights()
    final = out["final"]
    refined = out["refined"] if out.get("residuals") else []
    omega = weights.progressive(len(refined))
    g = _gt(gt, final.prob)

    bce = bce_loss(final, g)
    iou = iou_loss(final, g)
    edge = edge_loss(final, g)
    total = bce + iou
    if weights.gamma:
        total = total + weights.gamma * edge
    parts = {"bce": bce.item(), "iou": iou.item(), "edge": edge.item()}

    embs = out.get("embeddings")
    if embs:
        kd = kd_loss(embs[:-1], embs[-1])
        if weights.delta:
            total = total + weights.delta * kd
        parts["kd"] = kd.item()
    else:
        parts["kd"] = 0.0

    for k, (m, w) in enumerate(zip(refined, omega), start=1):
        prog = bce_loss(m, g) + iou_loss(m, g)
        if w:
            total = total + w * prog
        parts[f"prog{k}"] = prog.item()
    parts["total"] = total.item()
    return total, parts
