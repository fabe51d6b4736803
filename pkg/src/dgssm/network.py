"""The DGSSM forward pass.

Data flow for one batch (all tensors are (N, C, H, W)):

    rgb, aux --fuse--> stem --stage 0..L-1--> F^(l) --decode--> S0
    S0 --BARH--> Sb --IMDR x K--> S1..SK

Each encoder stage concatenates the frozen diffusion latent, derives a prompt
from the pooled features, runs the prompted multi-scale scan, and adds a
scaled projection of the latent. Every residual branch that could perturb
the output at initialization is zero-initialized, so a fresh model satisfies
SK == Sb == S0 and F^(l) == F_m^(l) exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import nn
from . import tensor as T
from .diffusion import LatentState, project_prior
from .scan import ALL_DIRECTIONS, A_CAP, MultiScaleConfig, ScanDirection, ScanParams, apply_prompt, \
    scan_direction, scan_multiscale
from .tensor import Tensor

LOGIT_CLAMP = 1e-6

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class ModelConfig:
    rgb_channels: int = 3
    aux_channels: int = 1
    stem_width: int = 16
    widths: tuple = (16, 32, 64, 128)
    dh: int = 16
    cz: int = 4
    dp: int = 32
    decoder_width: int = 16
    refine_width: int = 16
    embed_dim: int = 64
    K: int = 3
    scales: tuple = (1, 2, 4)
    directions: tuple = ALL_DIRECTIONS
    kernel: str = "sequential"
    precision: str = "f64"
    # ablation flags
    dsp: bool = True
    asp: bool = True
    msss: bool = True
    barh: bool = True
    imdr: bool = True
    kd: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.scales = tuple(int(s) for s in self.scales)
        self.directions = tuple(ScanDirection.parse(d) for d in self.directions)
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def latent_channels(self) -> int:
        return self.cz if self.dsp else 0

    @property
    def iterations(self) -> int:
        return self.K if self.imdr else 0

    @property
    def scan_config(self) -> MultiScaleConfig:
        if self.msss:
            return MultiScaleConfig(self.scales, self.directions)
        return MultiScaleConfig((1,), (ScanDirection.LEFT_TO_RIGHT,))


@dataclass
class SaliencyMap:
    """Probabilities in [0,1]; ``logit`` is kept when the map came from a sigmoid."""

    prob: Tensor
    logit: Tensor | None = None

    @classmethod
    def from_logit(cls, logit: Tensor) -> "SaliencyMap":
        return cls(T.sigmoid(logit), logit)

    def logits(self) -> Tensor:
        if self.logit is not None:
            return self.logit
        p = T.clamp(self.prob, LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
        return T.log(p) - T.log(1.0 - p)


def _rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    ms = T.mean(x * x, axis=-3, keepdims=True)
    return x / T.sqrt(ms + eps)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _a_logit_init(dh: int) -> np.ndarray:
    target = np.linspace(0.5, 0.95, dh) / A_CAP
    return np.log(target / (1.0 - target))


def sobel_edges(s) -> Tensor:
    """|Gx * s| + |Gy * s| with replicate padding; (1,H,W) or (N,1,H,W)."""
    x = s.prob if isinstance(s, SaliencyMap) else s
    x, squeeze = _batched(x)
    k = Tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None].astype(x.dtype))
    g = T.conv2d(T.pad(x, 1, "replicate"), k)
    e = T.absolute(g[:, 0:1]) + T.absolute(g[:, 1:2])
    return T.reshape(e, e.shape[1:]) if squeeze else e


class Fusion(nn.Module):
    """Early fusion: concat(rgb, aux or zeros) -> 1x1 projection to the stem width."""

    def __init__(self, cfg: ModelConfig, rng, init: str = "he"):
        self.aux_channels = cfg.aux_channels
        self.proj = nn.Conv2d(cfg.rgb_channels + cfg.aux_channels, cfg.stem_width, 1, rng, cfg.dtype,
                              init=init)

    def __call__(self, rgb: Tensor, aux: Tensor | None = None) -> Tensor:
        rgb, squeeze = _batched(rgb)
        if aux is None:
            aux = Tensor(np.zeros(rgb.shape[:1] + (self.aux_channels,) + rgb.shape[2:], dtype=rgb.dtype))
        else:
            aux, _ = _batched(aux)
        if aux.shape[-2:] != rgb.shape[-2:]:
            raise T.ShapeError(f"aux spatial dims {aux.shape[-2:]} != rgb {rgb.shape[-2:]}")
        y = self.proj(T.concat([rgb, aux], axis=1))
        return T.reshape(y, y.shape[1:]) if squeeze else y


def fuse_modalities(rgb: Tensor, aux: Tensor | None, fusion: Fusion) -> Tensor:
    return fusion(rgb, aux)


def inject_prior(x: Tensor, z_tstar: LatentState | None) -> Tensor:
    """Channel-concatenate the latent (nearest-resized to x) onto x."""
    if z_tstar is None or z_tstar.z.shape[-3] == 0:
        return x
    z = T.resize_nearest(z_tstar.z, x.shape[-2:])
    if z.ndim < x.ndim:
        z = T.reshape(z, (1,) * (x.ndim - z.ndim) + z.shape)
        if x.ndim == 4 and x.shape[0] != 1:
            z = T.concat([z] * x.shape[0], axis=0)
    return T.concat([x, z], axis=-3)


class PromptNet(nn.Module):
    """phi: Linear -> ReLU -> Linear on the globally pooled features."""

    def __init__(self, cin: int, dp: int, rng, dtype):
        self.fc1 = nn.Linear(cin, dp, rng, dtype)
        self.fc2 = nn.Linear(dp, dp, rng, dtype, init="lecun")

    def __call__(self, x_tilde: Tensor) -> Tensor:
        pooled = T.mean(x_tilde, axis=(-2, -1))
        return self.fc2(T.relu(self.fc1(pooled)))


def asp_prompt(x_tilde: Tensor, phi: PromptNet) -> Tensor:
    return phi(x_tilde)


class EncoderStage(nn.Module):
    def __init__(self, index: int, cin: int, cout: int, cfg: ModelConfig, rng):
        dt = cfg.dtype
        cz = cfg.latent_channels
        self.index = index
        self.cout = cout
        cx = cin + cz
        self.a_logit = nn.param(_a_logit_init(cfg.dh), dt)
        self.B = nn.he_normal(rng, (cfg.dh, cx), cx, dt, gain=1.0)
        self.C = nn.he_normal(rng, (cout, cfg.dh), cfg.dh, dt, gain=1.0)
        self.resid = nn.Conv2d(cx, cout, 1, rng, dt)
        if cfg.asp:
            self.phi = PromptNet(cx, cfg.dp, rng, dt)
            self.w_scale = nn.zeros((cfg.dh, cfg.dp), dt)
            self.w_shift = nn.zeros((cfg.dh, cfg.dp), dt)
        if cfg.dsp:
            self.lam = nn.zeros((), dt)
            self.psi = nn.he_normal(rng, (cout, cz), cz, dt, gain=1.0)
        self.cfg = cfg

    def scan_params(self) -> ScanParams:
        return ScanParams(A_CAP * T.sigmoid(self.a_logit), self.B, self.C)

    def __call__(self, x: Tensor, z: LatentState | None) -> tuple[Tensor, Tensor]:
        """Return (F, F_m) for this stage."""
        cfg = self.cfg
        x_t = inject_prior(x, z) if cfg.dsp else x
        params = self.scan_params()
        if cfg.asp:
            params = apply_prompt(params, asp_prompt(x_t, self.phi), self.w_scale, self.w_shift)
        scfg = cfg.scan_config
        n_terms = len(scfg.scales) * len(scfg.directions)
        ms = scan_multiscale(x_t, params, scfg, cfg.kernel)
        f_m = T.relu(_rms_norm(ms * (1.0 / n_terms) + self.resid(x_t)))
        if not cfg.dsp:
            return f_m, f_m
        f = f_m + self.lam * project_prior(z, f_m.shape, self.psi)
        return f, f_m


def encoder_stage_forward(x: Tensor, z_tstar: LatentState | None, stage: EncoderStage) -> Tensor:
    return stage(x, z_tstar)[0]


class ScanBlock(nn.Module):
    """Single-scale, single-direction residual scan used by the decoder."""

    def __init__(self, width: int, dh: int, rng, dtype, kernel: str):
        self.a_logit = nn.param(_a_logit_init(dh), dtype)
        self.B = nn.he_normal(rng, (dh, width), width, dtype, gain=1.0)
        self.C = nn.he_normal(rng, (width, dh), dh, dtype, gain=1.0)
        self.kernel = kernel

    def __call__(self, x: Tensor) -> Tensor:
        a = A_CAP * T.sigmoid(self.a_logit)
        y = scan_direction(x, a, self.B, self.C, ScanDirection.LEFT_TO_RIGHT, self.kernel)
        return T.relu(_rms_norm(x + y))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, rng):
        dt = cfg.dtype
        d = cfg.decoder_width
        self.lateral = [nn.Conv2d(w, d, 1, rng, dt) for w in cfg.widths]
        self.blocks = [ScanBlock(d, cfg.dh, rng, dt, cfg.kernel) for _ in cfg.widths]
        self.head = nn.Conv2d(d, 1, 3, rng, dt, init="lecun")

    def __call__(self, features: list[Tensor]) -> tuple[SaliencyMap, Tensor]:
        """features are shallowest-first; returns (S0, full-resolution decoder features)."""
        d = None
        for lvl in reversed(range(len(features))):
            lat = self.lateral[lvl](features[lvl])
            d = lat if d is None else T.upsample_nearest(d, 2) + lat
            d = self.blocks[lvl](d)
        return SaliencyMap.from_logit(self.head(d)), d


def decode(features: list[Tensor], decoder: Decoder) -> SaliencyMap:
    return decoder(features)[0]


class BoundaryHead(nn.Module):
    """concat(S0, E, projected decoder features) -> conv -> ReLU -> zero-init conv."""

    def __init__(self, cfg: ModelConfig, rng):
        dt = cfg.dtype
        self.feat = nn.Conv2d(cfg.decoder_width, 8, 1, rng, dt)
        self.conv1 = nn.Conv2d(10, cfg.refine_width, 3, rng, dt)
        self.conv2 = nn.Conv2d(cfg.refine_width, 1, 3, rng, dt, init="zero")

    def __call__(self, s0: SaliencyMap, decoder_feats: Tensor) -> tuple[SaliencyMap, Tensor]:
        edges = sobel_edges(s0.prob)
        x = T.concat([s0.prob, edges, self.feat(decoder_feats)], axis=-3)
        r = self.conv2(T.relu(self.conv1(x)))
        return SaliencyMap.from_logit(s0.logits() + r), edges


def barh_refine(s0: SaliencyMap, decoder_feats: Tensor, head: BoundaryHead) -> SaliencyMap:
    return head(s0, decoder_feats)[0]


class Refiner(nn.Module):
    """Correction module R(S_k, F_d), shared across iterations."""

    def __init__(self, cfg: ModelConfig, rng):
        dt = cfg.dtype
        self.cond_channels = 8 if cfg.dsp else 0
        if cfg.dsp:
            self.cond = nn.he_normal(rng, (8, cfg.cz), cfg.cz, dt, gain=1.0)
        self.conv1 = nn.Conv2d(1 + self.cond_channels, cfg.refine_width, 3, rng, dt)
        self.conv2 = nn.Conv2d(cfg.refine_width, 1, 3, rng, dt, init="zero")

    def condition(self, fd: LatentState | None, like: Tensor) -> Tensor | None:
        if not self.cond_channels or fd is None:
            return None
        return project_prior(fd, like.shape[:-3] + (self.cond_channels,) + like.shape[-2:], self.cond)

    def __call__(self, s: Tensor, cond: Tensor | None) -> Tensor:
        x = s if cond is None else T.concat([s, cond], axis=-3)
        return self.conv2(T.relu(self.conv1(x)))


@dataclass
class RefinementConfig:
    K: int = 3

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")


def imdr_refine(sb: SaliencyMap, fd: LatentState | None, cfg: RefinementConfig, refiner: Refiner,
                return_residuals: bool = False):
    """Iterate l_{k+1} = l_k + R(sigmoid(l_k), F_d) in logit space.

    Returns [S_1..S_K], or [sb] when K == 0.
    """
    if cfg.K == 0:
        return ([sb], []) if return_residuals else [sb]
    cond = refiner.condition(fd, sb.prob)
    logit = sb.logits()
    maps, residuals = [], []
    for _ in range(cfg.K):
        r = refiner(T.sigmoid(logit), cond)
        logit = logit + r
        maps.append(SaliencyMap.from_logit(logit))
        residuals.append(r)
    return (maps, residuals) if return_residuals else maps


class DGSSM(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.fusion = Fusion(cfg, rng)
        cins = (cfg.stem_width,) + cfg.widths[:-1]
        self.stages = [EncoderStage(i, cin, cout, cfg, rng) for i, (cin, cout) in enumerate(zip(cins, cfg.widths))]
        self.decoder = Decoder(cfg, rng)
        if cfg.barh:
            self.boundary = BoundaryHead(cfg, rng)
        if cfg.imdr:
            self.refiner = Refiner(cfg, rng)
        if cfg.kd:
            self.eta = [nn.Linear(w, cfg.embed_dim, rng, cfg.dtype) for w in cfg.widths]

    def forward(self, rgb: Tensor, aux: Tensor | None = None, prior: LatentState | None = None) -> dict:
        cfg = self.cfg
        if cfg.dsp and prior is None:
            raise ValueError("model built with the diffusion prior needs a prior latent")
        rgb, squeeze = _batched(rgb)
        if aux is not None:
            aux, _ = _batched(aux)
        if prior is not None and prior.z.ndim == 3:
            prior = LatentState(T.reshape(prior.z, (1,) + prior.z.shape), prior.t)
        h, w = rgb.shape[-2:]
        step = 2 ** (cfg.depth - 1) * max(cfg.scan_config.scales)
        if h % step or w % step:
            raise T.ShapeError(f"input {h}x{w} must be divisible by {step}")
        fd = prior if cfg.dsp else None

        x = self.fusion(rgb, aux)
        feats, feats_m = [], []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = T.avg_pool2d(x, 2)
            f, f_m = stage(x, fd)
            feats.append(f)
            feats_m.append(f_m)
            x = f

        s0, dfeat = self.decoder(feats)
        if cfg.barh:
            sb, edges = self.boundary(s0, dfeat)
        else:
            sb, edges = s0, None
        refined, residuals = imdr_refine(sb, fd, RefinementConfig(cfg.iterations),
                                         getattr(self, "refiner", None), return_residuals=True)
        out = {
            "s0": s0, "sb": sb, "refined": refined, "final": refined[-1],
            "features": feats, "features_m": feats_m, "edges": edges,
            "residuals": residuals, "decoder_features": dfeat,
        }
        if cfg.kd:
            out["embeddings"] = self.embed(feats)
        return _unbatch(out) if squeeze else out

    __call__ = forward

    def embed(self, feats: list[Tensor]) -> list[Tensor]:
        """eta: GAP -> linear -> L2 normalize. The deepest stage (teacher) is detached."""
        embs = []
        last = len(feats) - 1
        for i, (f, head) in enumerate(zip(feats, self.eta)):
            if i == last:
                with T.no_tape():
                    e = T.l2_normalize(head(T.mean(T.detach(f), axis=(-2, -1))))
            else:
                e = T.l2_normalize(head(T.mean(f, axis=(-2, -1))))
            embs.append(e)
        return embs


def _unbatch(obj):
    """Drop the leading batch axis of size one from every map and feature."""
    if isinstance(obj, SaliencyMap):
        return SaliencyMap(_unbatch(obj.prob), _unbatch(obj.logit))
    if isinstance(obj, Tensor):
        return T.reshape(obj, obj.shape[1:])
    if isinstance(obj, list):
        return [_unbatch(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _unbatch(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: ModelConfig) -> dict:
    from .scan import DIRECTION_CODES
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "directions":
            v = ",".join(DIRECTION_CODES[d] for d in v)
        elif isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        out[f.name] = str(v)
    return out
