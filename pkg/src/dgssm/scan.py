"""Selective state-space scanning over 2-D feature grids.

Each row (or column) of a feature map is treated as an independent token
sequence and run through the diagonal linear recurrence

    h[i+1] = a * h[i] + B x[i],     y[i] = C h[i+1]

with ``a`` the (prompt-modulated) diagonal of the transition matrix. Two
kernels evaluate the recurrence: a plain sequential loop, and a
work-efficient up-sweep/down-sweep scan over the associative pair
composition ``(a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2)``. They agree to
rounding error and both back the differentiable op :func:`linear_recurrence`.
"""
from __future__ import annotations

import csv
import enum
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

A_CAP = 0.999


class ScanDirection(enum.Enum):
    LEFT_TO_RIGHT = "left-to-right"
    RIGHT_TO_LEFT = "right-to-left"
    TOP_TO_BOTTOM = "top-to-bottom"
    BOTTOM_TO_TOP = "bottom-to-top"

    @property
    def axis(self) -> int:
        return -1 if self in (ScanDirection.LEFT_TO_RIGHT, ScanDirection.RIGHT_TO_LEFT) else -2

    @property
    def reversed(self) -> bool:
        return self in (ScanDirection.RIGHT_TO_LEFT, ScanDirection.BOTTOM_TO_TOP)

    @classmethod
    def parse(cls, s: "str | ScanDirection") -> "ScanDirection":
        if isinstance(s, ScanDirection):
            return s
        try:
            return _DIR_ALIASES[s.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown scan direction {s!r}") from None


ALL_DIRECTIONS = tuple(ScanDirection)

_DIR_ALIASES = {d.value: d for d in ScanDirection}
_DIR_ALIASES.update({
    "lr": ScanDirection.LEFT_TO_RIGHT, "rl": ScanDirection.RIGHT_TO_LEFT,
    "tb": ScanDirection.TOP_TO_BOTTOM, "bt": ScanDirection.BOTTOM_TO_TOP,
    "→": ScanDirection.LEFT_TO_RIGHT, "←": ScanDirection.RIGHT_TO_LEFT,
    "↓": ScanDirection.TOP_TO_BOTTOM, "↑": ScanDirection.BOTTOM_TO_TOP,
})
DIRECTION_CODES = {ScanDirection.LEFT_TO_RIGHT: "lr", ScanDirection.RIGHT_TO_LEFT: "rl",
                   ScanDirection.TOP_TO_BOTTOM: "tb", ScanDirection.BOTTOM_TO_TOP: "bt"}


@dataclass(frozen=True)
class MultiScaleConfig:
    scales: tuple = (1, 2, 4)
    directions: tuple = ALL_DIRECTIONS

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        if not scales or any(s <= 0 for s in scales):
            raise ValueError(f"scales must be positive integers, got {self.scales}")
        if list(scales) != sorted(scales) or scales[0] != 1:
            raise ValueError(f"scales must be ascending and start at 1, got {scales}")
        dirs = tuple(ScanDirection.parse(d) for d in self.directions)
        if not dirs:
            raise ValueError("direction set must be non-empty")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "directions", dirs)


@dataclass
class ScanParams:
    """Per-stage SSM parameters.

    ``A`` holds the diagonal of the transition matrix, shape (Dh,). ``B`` is
    (Dh, Din) and ``C_out`` is (Dout, Dh). The prompt modulation fields are
    None until :func:`apply_prompt` fills them; they may carry a leading batch
    axis when every sample has its own prompt.
    """

    A: Tensor
    B: Tensor
    C_out: Tensor
    prompt_scale: Tensor | None = None
    prompt_shift: Tensor | None = None
    cap: float = A_CAP

    def __post_init__(self):
        if self.A.ndim != 1:
            raise T.ShapeError(f"A must be a diagonal vector (Dh,), got {self.A.shape}")
        dh = self.A.shape[0]
        if self.B.ndim != 2 or self.B.shape[0] != dh:
            raise T.ShapeError(f"B must be (Dh={dh}, Din), got {self.B.shape}")
        if self.C_out.ndim != 2 or self.C_out.shape[1] != dh:
            raise T.ShapeError(f"C_out must be (Dout, Dh={dh}), got {self.C_out.shape}")
        if min(dh, self.B.shape[1], self.C_out.shape[0]) <= 0:
            raise T.ShapeError("Dh, Din and Dout must be positive")

    @property
    def dh(self) -> int:
        return self.A.shape[0]

    @property
    def din(self) -> int:
        return self.B.shape[1]

    @property
    def dout(self) -> int:
        return self.C_out.shape[0]

    def effective(self) -> tuple[Tensor, Tensor]:
        """Return (a_eff, B_eff) after prompt modulation and the stability clamp."""
        a = self.A if self.prompt_scale is None else self.A * self.prompt_scale
        a = T.clamp(a, -self.cap, self.cap)
        b = self.B
        if self.prompt_shift is not None:
            shift = self.prompt_shift
            b = b + T.reshape(shift, shift.shape + (1,))
        return a, b


# -- raw kernels -----------------------------------------------------------

def _sequential_rows(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """h[:, i] = a[:, i] h[:, i-1] + u[:, i] for 2-d (rows, L) arrays."""
    at = np.ascontiguousarray(a.T)
    ut = np.ascontiguousarray(u.T)
    h = np.empty_like(ut)
    prev = np.zeros(ut.shape[1], dtype=ut.dtype)
    for i in range(ut.shape[0]):
        prev = at[i] * prev + ut[i]
        h[i] = prev
    return np.ascontiguousarray(h.T)


def _blelloch_rows(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inclusive scan of the affine pairs (a_i, u_i) via up-sweep/down-sweep."""
    rows, L = u.shape
    n = 1
    while n < L:
        n *= 2
    A = np.ones((rows, n), dtype=u.dtype)
    b = np.zeros((rows, n), dtype=u.dtype)
    A[:, :L] = a
    b[:, :L] = u
    d = 1
    while d < n:
        la, lb = A[:, d - 1::2 * d], b[:, d - 1::2 * d]
        ra, rb = A[:, 2 * d - 1::2 * d], b[:, 2 * d - 1::2 * d]
        rb += ra * lb
        ra *= la
        d *= 2
    A[:, n - 1] = 1.0
    b[:, n - 1] = 0.0
    d = n // 2
    while d >= 1:
        la, lb = A[:, d - 1::2 * d], b[:, d - 1::2 * d]
        ra, rb = A[:, 2 * d - 1::2 * d], b[:, 2 * d - 1::2 * d]
        ta, tb = la.copy(), lb.copy()
        la[...] = ra
        lb[...] = rb
        # prefix of the parent block first, then the left child's aggregate
        rb[...] = ta * rb + tb
        ra[...] = ta * ra
        d //= 2
    return a * b[:, :L] + u


_KERNELS = {"sequential": _sequential_rows, "parallel": _blelloch_rows}


def recurrence(a: np.ndarray, u: np.ndarray, axis: int = -1, kernel: str = "sequential",
               workers: int = 1, reverse: bool = False) -> np.ndarray:
    """Run h_i = a h_{i-1} + u_i along ``axis`` of ``u`` with h_{-1} = 0.

    ``a`` must broadcast against ``u``. The parallel kernel splits rows across
    ``workers`` threads; each row is computed independently, so the result does
    not depend on the worker count.
    """
    if kernel not in _KERNELS:
        raise ValueError(f"unknown scan kernel {kernel!r}")
    ax = axis % u.ndim
    a = np.asarray(a)
    a = a.reshape((1,) * (u.ndim - a.ndim) + a.shape)
    if reverse:
        a, u = np.flip(a, ax), np.flip(u, ax)
    if kernel == "sequential" and a.shape[ax] == 1:
        h = _sequential_axis(a, u, ax)
    else:
        fn = _KERNELS[kernel]
        am = np.moveaxis(np.broadcast_to(a, u.shape), ax, -1)
        um = np.moveaxis(u, ax, -1)
        shape = um.shape
        u2 = np.ascontiguousarray(um).reshape(-1, shape[-1])
        a2 = np.ascontiguousarray(am).reshape(-1, shape[-1])
        if workers > 1 and u2.shape[0] > 1:
            chunks = [c for c in np.array_split(np.arange(u2.shape[0]), workers) if len(c)]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda idx: fn(a2[idx], u2[idx]), chunks))
            h2 = np.concatenate(parts, axis=0)
        else:
            h2 = fn(a2, u2)
        h = np.moveaxis(h2.reshape(shape), -1, ax)
    if reverse:
        h = np.flip(h, ax)
    h = np.ascontiguousarray(h)
    if not np.isfinite(h).all():
        raise T.NonFiniteError("non-finite scan state; transition is unstable")
    return h


def _sequential_axis(a: np.ndarray, u: np.ndarray, ax: int) -> np.ndarray:
    """Sequential loop along ``ax`` for a transition that is constant along it."""
    ut = np.ascontiguousarray(np.moveaxis(u, ax, 0))
    at = np.moveaxis(a, ax, 0)[0]
    h = np.empty(ut.shape, dtype=np.result_type(ut, at))
    prev = ut[0].astype(h.dtype)
    h[0] = prev
    for i in range(1, ut.shape[0]):
        prev = at * prev + ut[i]
        h[i] = prev
    return np.moveaxis(h, 0, ax)


def linear_recurrence(u: Tensor, a: Tensor, axis: int = -1, kernel: str = "sequential",
                      workers: int = 1, reverse: bool = False) -> Tensor:
    """Differentiable diagonal recurrence along ``axis`` (backwards if ``reverse``).

    ``a`` must have size 1 along ``axis`` (a time-invariant transition).
    """
    ax = axis % u.ndim
    a_shape = (1,) * (u.ndim - a.ndim) + a.shape
    if a_shape[ax] != 1:
        raise T.ShapeError("transition must be constant along the scan axis")
    h = recurrence(a.data, u.data, ax, kernel, workers, reverse)

    def bw(g):
        # the adjoint of a forward recurrence is the same recurrence run backwards
        lam = recurrence(a.data, g, ax, kernel, workers, reverse=not reverse)
        ga = None
        if a.requires_grad:
            head = [slice(None)] * h.ndim
            tail = [slice(None)] * h.ndim
            head[ax], tail[ax] = slice(0, -1), slice(1, None)
            if reverse:
                prod = lam[tuple(head)] * h[tuple(tail)]
            else:
                prod = lam[tuple(tail)] * h[tuple(head)]
            ga = T._unbroadcast(prod, a_shape).reshape(a.shape)
        return (lam if u.requires_grad else None), ga

    return T.make_op(h, (u, a), bw)


# -- 2-D scans -------------------------------------------------------------

def _channel_apply(m: Tensor, x: Tensor) -> Tensor:
    """Apply a (.., Do, Di) matrix over the channel axis of (.., Di, H, W)."""
    lead, (di, h, w) = x.shape[:-3], x.shape[-3:]
    flat = T.reshape(x, lead + (di, h * w))
    out = T.matmul(m, flat)
    return T.reshape(out, out.shape[:-1] + (h, w))


def scan_direction(x: Tensor, a_eff: Tensor, b_eff: Tensor, c_out: Tensor,
                   direction: ScanDirection, kernel: str = "sequential", workers: int = 1) -> Tensor:
    direction = ScanDirection.parse(direction)
    u = _channel_apply(b_eff, x)
    h = _directional_states(u, a_eff, direction, kernel, workers)
    return _channel_apply(c_out, h)


def _directional_states(u: Tensor, a_eff: Tensor, direction: ScanDirection, kernel: str, workers: int) -> Tensor:
    a = T.reshape(a_eff, a_eff.shape + (1, 1))
    return linear_recurrence(u, a, direction.axis, kernel, workers, reverse=direction.reversed)


def scan_sequential(x: Tensor, params: ScanParams, direction) -> Tensor:
    """Scan (Din,H,W) or (N,Din,H,W) input along one direction -> (.., Dout, H, W)."""
    if x.shape[-3] != params.din:
        raise T.ShapeError(f"input has {x.shape[-3]} channels, params expect {params.din}")
    a, b = params.effective()
    return scan_direction(x, a, b, params.C_out, direction, "sequential")


def scan_parallel(x: Tensor, params: ScanParams, direction, workers: int = 1) -> Tensor:
    """Same contract as :func:`scan_sequential`, evaluated with the associative scan."""
    if x.shape[-3] != params.din:
        raise T.ShapeError(f"input has {x.shape[-3]} channels, params expect {params.din}")
    a, b = params.effective()
    return scan_direction(x, a, b, params.C_out, direction, "parallel", workers)


def scan_multiscale(x: Tensor, params: ScanParams, cfg: MultiScaleConfig,
                    kernel: str = "parallel", workers: int = 1) -> Tensor:
    """Sum of upsample_s(scan_d(avgpool_s(x))) over every (scale, direction) pair.

    Pooling, upsampling and the channel maps B and C all commute, so B is
    applied once per scale and C once to the summed states.
    """
    h, w = x.shape[-2:]
    smax = cfg.scales[-1]
    if h % smax or w % smax:
        raise T.ShapeError(f"spatial dims {(h, w)} not divisible by max scale {smax}")
    if x.shape[-3] != params.din:
        raise T.ShapeError(f"input has {x.shape[-3]} channels, params expect {params.din}")
    a, b = params.effective()
    total = None
    for s in cfg.scales:
        u = _channel_apply(b, T.avg_pool2d(x, s))
        states = None
        for d in cfg.directions:
            hd = _directional_states(u, a, d, kernel, workers)
            states = hd if states is None else states + hd
        states = T.upsample_nearest(states, s)
        total = states if total is None else total + states
    return _channel_apply(params.C_out, total)


def apply_prompt(params: ScanParams, p: Tensor, w_scale: Tensor, w_shift: Tensor) -> ScanParams:
    """Condition scan parameters on a prompt vector ``p`` of shape (Dp,) or (N, Dp).

    prompt_scale = 1 + tanh(W_s p) multiplies the transition diagonal and
    prompt_shift = W_b p is added to every column of B. Both projections are
    (Dh, Dp); zero projections leave the parameters unchanged.
    """
    if w_scale.shape != (params.dh, p.shape[-1]) or w_shift.shape != (params.dh, p.shape[-1]):
        raise T.ShapeError(
            f"prompt projections must be ({params.dh}, {p.shape[-1]}), "
            f"got {w_scale.shape} and {w_shift.shape}"
        )
    pc = T.reshape(p, p.shape + (1,))
    scale = 1.0 + T.tanh(T.reshape(T.matmul(w_scale, pc), p.shape[:-1] + (params.dh,)))
    shift = T.reshape(T.matmul(w_shift, pc), p.shape[:-1] + (params.dh,))
    return replace(params, prompt_scale=scale, prompt_shift=shift)


# -- benchmark -------------------------------------------------------------

BENCH_COLUMNS = ("kernel", "length", "Dh", "threads", "elements_per_sec", "max_residual_vs_sequential")


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(BENCH_COLUMNS)
        for r in self.rows:
            wr.writerow([r["kernel"], r["length"], r["Dh"], r["threads"],
                         f"{r['elements_per_sec']:.6g}", f"{r['max_residual_vs_sequential']:.3e}"])
        return buf.getvalue()

    def summary(self) -> str:
        lines = []
        by_len: dict = {}
        for r in self.rows:
            by_len.setdefault(r["length"], {})[r["kernel"]] = r
        for L, d in sorted(by_len.items()):
            seq, par = d.get("sequential"), d.get("parallel")
            if seq and par:
                ratio = par["elements_per_sec"] / seq["elements_per_sec"]
                lines.append(f"L={L:>7}  parallel/sequential throughput = {ratio:6.2f}x  "
                             f"residual = {par['max_residual_vs_sequential']:.2e}")
        return "\n".join(lines)


def bench_scan(lengths, dh: int = 16, reps: int = 3, threads: int = 1, seed: int = 0) -> BenchReport:
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ValueError("lengths must be sorted ascending")
    rng = np.random.default_rng(seed)
    report = BenchReport()
    for L in lengths:
        a = rng.uniform(-A_CAP, A_CAP, size=(dh, 1))
        u = rng.standard_normal((dh, L))
        results = {}
        for kernel in ("sequential", "parallel"):
            workers = threads if kernel == "parallel" else 1
            best = np.inf
            for _ in range(max(1, reps)):
                t0 = time.perf_counter()
                h = recurrence(a, u, -1, kernel, workers)
                best = min(best, time.perf_counter() - t0)
            results[kernel] = h
            resid = float(np.max(np.abs(h - results["sequential"])))
            report.rows.append({
                "kernel": kernel, "length": L, "Dh": dh, "threads": workers,
                "elements_per_sec": dh * L / max(best, 1e-9),
                "max_residual_vs_sequential": resid,
            })
    return report
