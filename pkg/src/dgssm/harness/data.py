"""Synthetic RGB + auxiliary saliency data, binary PGM/PPM I/O and manifests.

Every sample is drawn from its own generator seed, so a sample can be
regenerated in isolation. Pixel values are quantized to k/255 at generation
time, which makes a write/read round trip through 8-bit files exact.
"""
from __future__ import annotations

import colorsys
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

FG_MIN, FG_MAX = 0.05, 0.60
DECORRELATED_EVERY = 5  # every fifth sample has an aux channel unrelated to the mask


@dataclass
class SyntheticSample:
    sample_id: str
    rgb: np.ndarray   # (3, H, W) in [0, 1]
    aux: np.ndarray   # (1, H, W) in [0, 1]
    gt: np.ndarray    # (1, H, W) in {0, 1}
    seed: int
    decorrelated: bool = False


TRAIN, TEST = 0, 1


def sample_seed(base_seed: int, index: int, split: int = TRAIN) -> int:
    return int(np.random.SeedSequence([base_seed, split, index]).generate_state(1)[0])


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int = 4) -> np.ndarray:
    """Bilinearly upsampled coarse noise in [0, 1]."""
    coarse = rng.random((cells + 1, cells + 1))
    yy = np.linspace(0, cells, h)
    xx = np.linspace(0, cells, w)
    y0 = np.minimum(yy.astype(int), cells - 1)
    x0 = np.minimum(xx.astype(int), cells - 1)
    fy = (yy - y0)[:, None]
    fx = (xx - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx)


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    kind = rng.choice(("ellipse", "rectangle", "blob"))
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    ry, rx = rng.uniform(0.08, 0.3) * h, rng.uniform(0.08, 0.3) * w
    if kind == "ellipse":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    # blob: a circle whose radius wobbles with angle
    r0 = 0.5 * (ry + rx)
    ang = np.arctan2(yy - cy, xx - cx)
    harmonics = rng.integers(2, 5, size=2)
    amps = rng.uniform(0.1, 0.3, size=2)
    radius = r0 * (1.0 + amps[0] * np.sin(harmonics[0] * ang + rng.uniform(0, 2 * np.pi))
                   + amps[1] * np.cos(harmonics[1] * ang))
    return np.hypot(yy - cy, xx - cx) <= radius


def _hue_rgb(hue: float, sat: float, val: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, sat, val))


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def make_sample(seed: int, h: int = 64, w: int = 64, decorrelated: bool = False,
                sample_id: str = "s") -> SyntheticSample:
    rng = np.random.default_rng(seed)
    # rejection sample the layout until the foreground fraction is in range
    for _ in range(1000):
        n_shapes = int(rng.integers(1, 4))
        masks = [_shape_mask(rng, h, w) for _ in range(n_shapes)]
        gt = np.logical_or.reduce(masks)
        if FG_MIN <= gt.mean() <= FG_MAX:
            break
    else:
        raise RuntimeError(f"could not draw a valid layout for seed {seed}")

    bg_hue = rng.random()
    texture = _smooth_field(rng, h, w, cells=int(rng.integers(3, 8)))
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (np.arange(w)[None, :] * rng.uniform(0.05, 0.2)
                                             + np.arange(h)[:, None] * rng.uniform(0.05, 0.2)))
    bg_val = 0.35 + 0.3 * texture + 0.1 * stripes
    rgb = _hue_rgb(bg_hue, rng.uniform(0.2, 0.5), 1.0)[:, None, None] * bg_val[None]
    for m in masks:
        hue = bg_hue + rng.uniform(0.3, 0.7)
        color = _hue_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0))
        shade = 0.85 + 0.15 * _smooth_field(rng, h, w)
        rgb = np.where(m[None], color[:, None, None] * shade[None], rgb)
    rgb = rgb + rng.normal(0.0, 0.04, size=rgb.shape)

    if decorrelated:
        aux = _smooth_field(rng, h, w, cells=int(rng.integers(2, 6)))
    else:
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(theta) * xx / w + np.sin(theta) * yy / h)
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
        aux = 0.1 + 0.35 * ramp
        # foreground is closer, so it reads higher
        for m in masks:
            aux = np.where(m, rng.uniform(0.6, 0.9), aux)
    aux = aux + rng.normal(0.0, 0.05, size=aux.shape)

    return SyntheticSample(sample_id, _quantize(rgb), _quantize(aux)[None], gt[None].astype(np.float64),
                           seed, decorrelated)


def generate_dataset(n: int, h: int = 64, w: int = 64, seed: int = 0, prefix: str = "s",
                     threads: int = 1, split: int = TRAIN) -> list[SyntheticSample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    jobs = [(sample_seed(seed, i, split), i % DECORRELATED_EVERY == DECORRELATED_EVERY - 1, f"{prefix}{i:04d}")
            for i in range(n)]

    def one(job):
        s, dec, sid = job
        return make_sample(s, h, w, dec, sid)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


# -- PGM / PPM ---------------------------------------------------------------

def write_pnm(path, img: np.ndarray) -> None:
    """Write (1,H,W) as binary PGM or (3,H,W) as binary PPM; values in [0,1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (1,H,W) or (3,H,W), got {img.shape}")
    c, h, w = img.shape
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(u8.transpose(1, 2, 0)).tobytes())


def _tokens(data: bytes, start: int, count: int) -> tuple[list[int], int]:
    out, i = [], start
    while len(out) < count:
        while data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while data[i:i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while not data[j:j + 1].isspace():
            j += 1
        out.append(int(data[i:j]))
        i = j
    return out, i + 1  # exactly one whitespace byte precedes the raster


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: only binary PGM/PPM is supported")
    (w, h, maxval), off = _tokens(data, 2, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    c = 1 if magic == b"P5" else 3
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=off)
    return raster.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / 255.0


# -- manifests -----------------------------------------------------------------

def write_dataset(samples: list[SyntheticSample], out_dir) -> str:
    """Write every sample as PPM/PGM files plus ``manifest.txt``; return its path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for s in samples:
        paths = []
        for kind, arr, ext in (("rgb", s.rgb, "ppm"), ("aux", s.aux, "pgm"), ("gt", s.gt, "pgm")):
            name = f"{s.sample_id}_{kind}.{ext}"
            write_pnm(os.path.join(out_dir, name), arr)
            paths.append(name)
        lines.append(f"{s.sample_id} {paths[0]} {paths[1]} {paths[2]} {s.seed}\n")
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w") as fh:
        fh.writelines(lines)
    return path


def read_manifest(path) -> list[SyntheticSample]:
    """Load a manifest; relative image paths resolve against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 'id rgb aux gt seed'")
            sid, rgb, aux, gt, seed = parts
            load = lambda p: read_pnm(p if os.path.isabs(p) else os.path.join(base, p))
            g = load(gt)
            samples.append(SyntheticSample(sid, load(rgb), load(aux), (g > 0.5).astype(np.float64), int(seed)))
    if not samples:
        raise ValueError(f"{path}: empty manifest")
    return samples


def stack(samples: list[SyntheticSample], dtype=np.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb = np.stack([s.rgb for s in samples]).astype(dtype)
    aux = np.stack([s.aux for s in samples]).astype(dtype)
    gt = np.stack([s.gt for s in samples]).astype(dtype)
    return rgb, aux, gt
