"""Dense float64 numeric substrate.

Tensors are plain C-ordered ``numpy.float64`` arrays: shape plus a flat
row-major buffer, which is all the projector needs.  Every differentiable op
comes in two flavours: ``op(...)`` returns the value, ``op_vjp(...)`` returns
``(value, backward)`` where ``backward(upstream)`` maps the output cotangent to
input cotangents.  Backward closures own their activations, so concurrent
forward/backward pairs never share state.

Multiply-accumulate counts are recorded by :func:`matmul` and
:func:`depthwise_conv3x3` into the active :class:`MacCounter`, if any.  Only
forward calls count; backward closures use raw ``@``.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, EvaluationError

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream: identical seed gives the identical draw sequence on any platform."""
    if seed < 0 or seed >= 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# MAC instrumentation
# ---------------------------------------------------------------------------

@dataclass
class StageRecord:
    name: str
    kind: str
    macs: int = 0
    in_shape: tuple = ()
    out_shape: tuple = ()

    def as_dict(self) -> dict:
        return {
            "stage": self.name,
            "kind": self.kind,
            "macs": int(self.macs),
            "in_shape": list(self.in_shape),
            "out_shape": list(self.out_shape),
        }


@dataclass
class MacCounter:
    """Collects per-stage multiply-accumulate counts while active."""

    stages: list[StageRecord] = field(default_factory=list)
    _open: list[StageRecord] = field(default_factory=list)

    def add(self, macs: int) -> None:
        if self._open:
            self._open[-1].macs += macs
        else:
            if not self.stages or self.stages[-1].name != "<unstaged>":
                self.stages.append(StageRecord("<unstaged>", "other"))
            self.stages[-1].macs += macs

    @contextlib.contextmanager
    def stage(self, name: str, kind: str, in_shape: tuple = ()):
        rec = StageRecord(name, kind, 0, tuple(in_shape))
        self.stages.append(rec)
        self._open.append(rec)
        try:
            yield rec
        finally:
            self._open.pop()

    @property
    def total(self) -> int:
        return sum(s.macs for s in self.stages)

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s in self.stages:
            out[s.kind] = out.get(s.kind, 0) + s.macs
        return out


_ACTIVE: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar("mac_counter", default=None)


@contextlib.contextmanager
def counting(counter: MacCounter | None = None):
    counter = counter if counter is not None else MacCounter()
    token = _ACTIVE.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE.reset(token)


def active_counter() -> MacCounter | None:
    return _ACTIVE.get()


@contextlib.contextmanager
def stage(name: str, kind: str, in_shape: tuple = ()):
    """Open a trace stage on the active counter; no-op when nothing is counting."""
    counter = _ACTIVE.get()
    if counter is None:
        yield None
        return
    with counter.stage(name, kind, in_shape) as rec:
        yield rec


def _count(macs: int) -> None:
    counter = _ACTIVE.get()
    if counter is not None:
        counter.add(int(macs))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes; leading axes broadcast.

    Reduction order is whatever the linked BLAS uses for a fixed thread count,
    which is deterministic run to run.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} x {b.shape}") from None
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _count(math.prod(batch) * m * k * n)
    return np.matmul(a, b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul_vjp(a: np.ndarray, b: np.ndarray):
    y = matmul(a, b)

    def backward(g):
        da = g @ np.swapaxes(b, -1, -2)
        db = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return y, backward


# ---------------------------------------------------------------------------
# Pointwise and normalisation
# ---------------------------------------------------------------------------

def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last dimension, got {x.shape}")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(x: np.ndarray):
    y = softmax_lastdim(x)

    def backward(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return y, backward


def layer_norm(x, gamma, beta, eps: float = LN_EPS):
    return layer_norm_vjp(x, gamma, beta, eps)[0]


def layer_norm_vjp(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS):
    """Normalise over the last axis with biased variance, then apply ``gamma, beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm affine params {gamma.shape}/{beta.shape} do not match last dim {c}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma + beta

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return y, backward


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_vjp(x: np.ndarray):
    mask = x > 0

    def backward(g):
        return g * mask

    return np.where(mask, x, 0.0), backward


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf) GELU."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_vjp(x: np.ndarray):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    y = x * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return g * (cdf + x * pdf)

    return y, backward


# ---------------------------------------------------------------------------
# Spatial ops (channel-first C x H x W)
# ---------------------------------------------------------------------------

def depthwise_conv3x3(x: np.ndarray, kernels: np.ndarray, groups: int = 1) -> np.ndarray:
    return depthwise_conv3x3_vjp(x, kernels, groups)[0]


def depthwise_conv3x3_vjp(x: np.ndarray, kernels: np.ndarray, groups: int = 1):
    """Per-channel 3x3 cross-correlation with zero padding 1.

    ``groups`` only has to divide the channel count; every channel still owns
    its own kernel, so the arithmetic is identical for any valid grouping.
    """
    if x.ndim != 3:
        raise DimensionError(f"depthwise_conv3x3 expects C x H x W, got {x.shape}")
    c, h, w = x.shape
    if kernels.shape != (c, 3, 3):
        raise DimensionError(f"kernels {kernels.shape} do not match input channels {c}")
    if groups < 1 or c % groups:
        raise ConfigError(f"channel count {c} is not divisible by groups={groups}")
    _count(c * h * w * 9)
    xp = np.zeros((c, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    y = np.zeros_like(x)
    for a in range(3):
        for b in range(3):
            y += kernels[:, a, b, None, None] * xp[:, a:a + h, b:b + w]

    def backward(g):
        dk = np.empty_like(kernels)
        dxp = np.zeros_like(xp)
        for a in range(3):
            for b in range(3):
                dk[:, a, b] = (g * xp[:, a:a + h, b:b + w]).sum(axis=(1, 2))
                dxp[:, a:a + h, b:b + w] += kernels[:, a, b, None, None] * g
        return dxp[:, 1:-1, 1:-1].copy(), dk

    return y, backward


def _half_pixel_coords(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``n_out x n_in`` half-pixel linear interpolation weights along one axis."""
    i0, i1, f = _half_pixel_coords(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return bilinear_resize_vjp(x, out_h, out_w)[0]


def bilinear_resize_vjp(x: np.ndarray, out_h: int, out_w: int):
    """Half-pixel-centre bilinear resize of a C x H x W grid.

    Evaluated in lerp form ``a + f*(b - a)`` so constant fields survive
    resampling bit-for-bit.  Interpolation arithmetic is not MAC-counted.
    """
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize expects C x H x W, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be >= 1x1, got {out_h}x{out_w}")
    _, h, w = x.shape
    r0, r1, rf = _half_pixel_coords(h, out_h)
    c0, c1, cf = _half_pixel_coords(w, out_w)
    t = x[:, r0, :] + rf[None, :, None] * (x[:, r1, :] - x[:, r0, :])
    y = t[:, :, c0] + cf[None, None, :] * (t[:, :, c1] - t[:, :, c0])
    ry = interp_matrix(h, out_h)
    rx = interp_matrix(w, out_w)

    def backward(g):
        return np.einsum("oh,cop,pw->chw", ry, g, rx)

    return y, backward


def sinusoidal_pos2d(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table, one row per grid cell in row-major order.

    The first ``dim/2`` columns encode the row index, the rest the column
    index; each half interleaves ``sin, cos`` pairs over geometric
    frequencies ``10000**(-k / (dim/4))``.
    """
    if dim < 4 or dim % 4:
        raise ConfigError(f"positional embedding dim must be a positive multiple of 4, got {dim}")
    if grid_h < 1 or grid_w < 1:
        raise ConfigError(f"grid must be at least 1x1, got {grid_h}x{grid_w}")
    nf = dim // 4
    omega = 10000.0 ** (-np.arange(nf) / nf)

    def encode(pos):
        ang = pos[:, None] * omega[None, :]
        out = np.empty((pos.size, 2 * nf))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows = encode(np.arange(grid_h, dtype=np.float64))
    cols = encode(np.arange(grid_w, dtype=np.float64))
    table = np.empty((grid_h, grid_w, dim))
    table[:, :, : dim // 2] = rows[:, None, :]
    table[:, :, dim // 2:] = cols[None, :, :]
    return table.reshape(grid_h * grid_w, dim)


# ---------------------------------------------------------------------------
# Verification substrate
# ---------------------------------------------------------------------------

def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-5,
    indices=None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    With ``indices`` (flat positions) only those entries are estimated and a
    1-D array in the same order is returned; otherwise the result has
    ``x.shape``.
    """
    x = as_tensor(x)
    flat_idx = range(x.size) if indices is None else [int(i) for i in indices]
    est = np.empty(len(flat_idx))
    work = x.copy()
    wflat = work.reshape(-1)
    for n, i in enumerate(flat_idx):
        orig = wflat[i]
        wflat[i] = orig + h
        fp = float(f(work))
        wflat[i] = orig - h
        fm = float(f(work))
        wflat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise EvaluationError(f"non-finite objective while differencing entry {i}")
        est[n] = (fp - fm) / (2.0 * h)
    return est.reshape(x.shape) if indices is None else est


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a-b| / max(|a|+|b|, tiny)`` in the 2-norm; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
