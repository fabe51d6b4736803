"""Run configuration and its plain-text file format.

Grammar, one setting per line::

    # comment
    key = value

Blank lines and ``#`` comments are ignored. Values are parsed according to
the field type: ints, floats, ``true``/``false`` for flags, comma-separated
lists for tuples (``widths = 16,32,64,128``), and bare strings otherwise.
``omega`` may be ``none``. Unknown keys are an error, as is a missing seed.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from ..diffusion import NoiseSchedule
from ..losses import LossWeights
from ..network import ModelConfig
from ..scan import DIRECTION_CODES, ScanDirection

FLAGS = ("dsp", "asp", "msss", "barh", "imdr", "kd")


@dataclass
class RunConfig:
    seed: int
    precision: str = "f32"
    # model
    widths: tuple = (16, 32, 64, 128)
    stem_width: int = 16
    dh: int = 16
    cz: int = 4
    dp: int = 32
    decoder_width: int = 16
    refine_width: int = 16
    embed_dim: int = 64
    K: int = 3
    scales: tuple = (1, 2, 4)
    directions: tuple = ("lr", "rl", "tb", "bt")
    kernel: str = "sequential"
    # diffusion prior
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_noise: int = 50
    t_star: int = 25
    denoiser_epochs: int = 30
    denoiser_width: int = 16
    denoiser_lr: float = 0.01
    # objective
    gamma: float = 1.0
    delta: float = 0.1
    omega: tuple | None = None
    # optimizer
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 5.0
    epochs: int = 30
    batch_size: int = 8
    # data
    n_train: int = 200
    n_test: int = 50
    size: int = 64
    train_manifest: str = ""
    test_manifest: str = ""
    deterministic: bool = True
    # scan benchmark
    bench_lengths: tuple = (64, 256, 1024, 4096, 16384)
    bench_dh: int = 16
    bench_reps: int = 3
    # ablation flags
    dsp: bool = True
    asp: bool = True
    msss: bool = True
    barh: bool = True
    imdr: bool = True
    kd: bool = True

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed is mandatory")
        self.seed = int(self.seed)
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        self.directions = tuple(DIRECTION_CODES[ScanDirection.parse(d)] for d in self.directions)
        if not 0 <= self.t_star <= self.t_noise <= self.T:
            raise ValueError(f"need 0 <= t_star <= t_noise <= T, got {self.t_star}, {self.t_noise}, {self.T}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("need at least one training and one test sample")
        # fail early on bad model settings
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            stem_width=self.stem_width, widths=self.widths, dh=self.dh, cz=self.cz, dp=self.dp,
            decoder_width=self.decoder_width, refine_width=self.refine_width, embed_dim=self.embed_dim,
            K=self.K, scales=self.scales, directions=self.directions, kernel=self.kernel,
            precision=self.precision, **{f: getattr(self, f) for f in FLAGS})

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.T, self.beta_start, self.beta_end)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.gamma, self.delta, self.omega)

    def with_flags(self, **flags) -> "RunConfig":
        bad = set(flags) - set(FLAGS)
        if bad:
            raise ValueError(f"unknown ablation flags {sorted(bad)}")
        return dataclasses.replace(self, **flags)

    def to_dict(self) -> dict[str, str]:
        return {f.name: _format(getattr(self, f.name)) for f in fields(self)}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_TUPLE_ITEM = {"widths": int, "scales": int, "directions": str, "omega": float, "bench_lengths": int}


def _parse_value(name: str, default, raw: str):
    raw = raw.strip()
    if name in _TUPLE_ITEM:
        if name == "omega" and raw.lower() in ("none", ""):
            return None
        return tuple(_TUPLE_ITEM[name](x.strip()) for x in raw.split(",") if x.strip())
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse ``key = value`` text; keyword overrides (e.g. from the CLI) win."""
    defaults = {f.name: f.default for f in fields(RunConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in defaults:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(key, defaults[key], raw) if key != "seed" else int(raw)
        except ValueError as e:
            raise ValueError(f"line {lineno}: bad value for {key}: {e}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "seed" not in values:
        raise ValueError("config has no seed (set 'seed = <int>' or pass --seed)")
    return RunConfig(**values)


def load_config(path, **overrides) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), **overrides)


def config_from_dict(d: dict[str, str]) -> RunConfig:
    return parse_config("".join(f"{k} = {v}\n" for k, v in d.items()))
