"""Latent diffusion structural prior.

An image is encoded into a small latent ``z0`` by a fixed (non-learned)
encoder, pushed forward to step ``t`` in closed form, then walked back ``k``
deterministic reverse steps with a small noise-prediction network. The
resulting intermediate latent is frozen and reused as a structural prior.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

LATENT_FACTOR = 8


@dataclass(frozen=True)
class NoiseSchedule:
    """``beta[0] == 0`` by convention so that ``alpha_bar[0] == 1``."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def linear(cls, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        if T <= 0:
            raise ValueError("T must be positive")
        beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
        return cls(T, beta, np.cumprod(1.0 - beta))

    def __post_init__(self):
        if len(self.beta) != self.T + 1 or len(self.alpha_bar) != self.T + 1:
            raise ValueError("beta and alpha_bar need T+1 entries")
        ab = self.alpha_bar
        if ab[0] != 1.0 or not np.all(np.diff(ab) < 0) or ab[-1] <= 0:
            raise ValueError("alpha_bar must start at 1, decrease strictly and stay positive")


@dataclass
class LatentState:
    z: Tensor
    t: int = 0


def _mix_matrix(c: int, cz: int) -> np.ndarray:
    """Cosine (DCT-II) basis rows; frequency k mod c for row k."""
    k = (np.arange(cz) % c)[:, None]
    ch = np.arange(c)[None, :]
    m = np.cos(np.pi * (ch + 0.5) * k / c)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def encode_latent(image, cz: int = 4, var_floor: float = 1e-6) -> LatentState:
    """Fixed latent encoder: 8x average pool, cosine channel mix, per-channel standardization.

    Accepts (C,H,W) or (N,C,H,W).
    """
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    h, w = x.shape[-2:]
    f = LATENT_FACTOR
    if h % f or w % f:
        raise T.ShapeError(f"image dims {(h, w)} must be divisible by {f}")
    pooled = x.reshape(x.shape[:-2] + (h // f, f, w // f, f)).mean(axis=(-3, -1))
    z = np.einsum("kc,...chw->...khw", _mix_matrix(x.shape[-3], cz), pooled)
    mu = z.mean(axis=(-2, -1), keepdims=True)
    var = z.var(axis=(-2, -1), keepdims=True)
    z = (z - mu) / np.sqrt(var + var_floor)
    dtype = image.dtype if isinstance(image, (Tensor, np.ndarray)) and image.dtype.kind == "f" else np.float64
    return LatentState(Tensor(z.astype(dtype)), 0)


def forward_noise(z0: LatentState, t: int, eps, schedule: NoiseSchedule) -> LatentState:
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [0, {schedule.T}]")
    e = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    ab = schedule.alpha_bar[t]
    zt = math.sqrt(ab) * z0.z.data + math.sqrt(1.0 - ab) * e
    return LatentState(Tensor(zt), t)


def timestep_embedding(t, dim: int = 16) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser(nn.Module):
    """Three 3x3 convolutions; the step embedding is added after the first."""

    def __init__(self, cz: int = 4, width: int = 16, emb_dim: int = 16, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.cz, self.width, self.emb_dim = cz, width, emb_dim
        self.conv1 = nn.Conv2d(cz, width, 3, rng, dtype)
        self.temb = nn.Linear(emb_dim, width, rng, dtype, init="lecun")
        self.conv2 = nn.Conv2d(width, width, 3, rng, dtype)
        self.conv3 = nn.Conv2d(width, cz, 3, rng, dtype, init="lecun")

    def __call__(self, z: Tensor, t) -> Tensor:
        squeeze = z.ndim == 3
        if squeeze:
            z = T.reshape(z, (1,) + z.shape)
        n = z.shape[0]
        steps = np.broadcast_to(np.atleast_1d(t), (n,))
        emb = Tensor(timestep_embedding(steps, self.emb_dim).astype(z.dtype))
        hdn = self.conv1(z) + T.reshape(self.temb(emb), (n, self.width, 1, 1))
        hdn = T.relu(hdn)
        hdn = T.relu(self.conv2(hdn))
        out = self.conv3(hdn)
        return T.reshape(out, out.shape[1:]) if squeeze else out


EpsModel = Callable[[Tensor, int], "Tensor | np.ndarray"]


def denoise_truncated(zt: LatentState, steps: int, denoiser: EpsModel, schedule: NoiseSchedule) -> LatentState:
    """Run ``steps`` deterministic reverse updates starting at ``zt.t``."""
    if steps < 0 or steps > zt.t:
        raise ValueError(f"cannot take {steps} reverse steps from t={zt.t}")
    z = zt.z.data
    with T.no_tape():
        for s in range(zt.t, zt.t - steps, -1):
            eps = denoiser(Tensor(z), s)
            eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
            beta = schedule.beta[s]
            z = (z - beta / math.sqrt(1.0 - schedule.alpha_bar[s]) * eps) / math.sqrt(1.0 - beta)
    if not np.isfinite(z).all():
        raise T.NonFiniteError("reverse diffusion diverged")
    return LatentState(Tensor(z), zt.t - steps)


def train_denoiser(latents: np.ndarray, schedule: NoiseSchedule, epochs: int = 30, seed: int = 0,
                   lr: float = 0.01, batch_size: int = 16, width: int = 16,
                   dtype=np.float64) -> tuple[Denoiser, list[float]]:
    """Fit the noise-prediction objective mean ||eps - eps_hat(z_t, t)||^2.

    ``latents`` is (M, Cz, h, w). Returns the denoiser and per-epoch mean losses.
    """
    latents = np.asarray(latents, dtype=np.float64)
    model = Denoiser(latents.shape[1], width, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1)
    opt = nn.SGD(model.parameters(), lr=lr, momentum=0.9, clip_norm=5.0)
    history = []
    m = len(latents)
    for _ in range(epochs):
        order = rng.permutation(m)
        total, count = 0.0, 0
        for i in range(0, m, batch_size):
            idx = order[i:i + batch_size]
            z0 = latents[idx]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.standard_normal(z0.shape)
            ab = schedule.alpha_bar[t][:, None, None, None]
            zt = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
            opt.zero_grad()
            with T.Tape() as tape:
                pred = model(Tensor(zt.astype(dtype)), t)
                diff = pred - Tensor(eps.astype(dtype))
                loss = T.mean(diff * diff)
                tape.backward(loss)
            val = loss.item()
            if not math.isfinite(val):
                raise T.NonFiniteError("denoiser training diverged")
            opt.step()
            total += val * len(idx)
            count += len(idx)
        history.append(total / count)
    return model, history


def structural_prior(image, denoiser: EpsModel, schedule: NoiseSchedule, seed: int,
                     t_noise: int | None = None, steps: int | None = None, cz: int = 4) -> LatentState:
    """Encode, noise to ``t_noise`` with a seeded draw, and reverse ``steps`` steps.

    Defaults: t_noise = T/2 and steps = T/4, landing at t* = T/4.
    """
    t_noise = schedule.T // 2 if t_noise is None else t_noise
    steps = schedule.T // 4 if steps is None else steps
    z0 = encode_latent(image, cz)
    eps = np.random.default_rng(seed).standard_normal(z0.z.shape)
    zt = forward_noise(z0, t_noise, eps, schedule)
    return denoise_truncated(zt, steps, denoiser, schedule)


def project_prior(z_tstar: LatentState, target_shape, weight: Tensor) -> Tensor:
    """1x1 channel projection of the latent followed by nearest resize.

    ``weight`` is (C_target, Cz); ``target_shape`` is (C, H, W) or (N, C, H, W).
    """
    z = z_tstar.z
    if weight.shape[1] != z.shape[-3] or weight.shape[0] != target_shape[-3]:
        raise T.ShapeError(f"projection {weight.shape} incompatible with latent {z.shape} -> {target_shape}")
    lead, (cz, h, w) = z.shape[:-3], z.shape[-3:]
    flat = T.reshape(z, lead + (cz, h * w))
    y = T.matmul(weight, flat)
    y = T.reshape(y, lead + (weight.shape[0], h, w))
    return T.resize_nearest(y, tuple(target_shape[-2:]))
