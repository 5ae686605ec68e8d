"""Specialisation blocks: MHCA, EMHSA, windowed cross-attention, FFN and the NTB cascade.

Token matrices are ``N x C`` in row-major grid order; MHCA works on the
channel-first grid ``C x H x W`` and :func:`ntb_forward` converts between the
two layouts with plain reshapes.  Linear weights are stored ``out x in`` and
applied as ``x @ W.T``.  None of the blocks carry biases.

Every ``*_vjp`` returns ``(y, backward)``; ``backward(dy)`` returns
``(dx, grads)`` where ``grads`` maps parameter field names to gradients.
"""
from __future__ import annotations

import math
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, annotate_stage
from .numerics import (
    LN_EPS,
    bilinear_resize_vjp,
    depthwise_conv3x3_vjp,
    gelu_vjp,
    layer_norm_vjp,
    matmul,
    relu_vjp,
    softmax_vjp,
    stage,
)

DEFAULT_FFN_HIDDEN = 4096

# Debug/mutation hook: when set, applied to every windowed-attention
# probability tensor (H x q x m) right after the softmax.
debug_attention_hook: Callable[[np.ndarray], np.ndarray] | None = None


def _traced(name, kind, shape):
    return stage(name, kind, shape) if name else nullcontext()


def _split_heads(t: np.ndarray, heads: int) -> np.ndarray:
    n, c = t.shape
    return t.reshape(n, heads, c // heads).transpose(1, 0, 2)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    h, n, d = t.shape
    return t.transpose(1, 0, 2).reshape(n, h * d)


# ---------------------------------------------------------------------------
# MHCA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MhcaBlock:
    """Grouped depthwise 3x3 conv -> LayerNorm -> ReLU -> 1x1 merge, plus residual."""

    kernels: np.ndarray  # C x 3 x 3
    merge: np.ndarray  # C x C
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    heads: int = 1
    eps: float = LN_EPS

    def __post_init__(self):
        c = self.kernels.shape[0]
        if self.heads < 1 or c % self.heads:
            raise ConfigError(f"MHCA channels {c} not divisible by heads={self.heads}")
        if self.merge.shape != (c, c):
            raise DimensionError(f"merge weight {self.merge.shape} must be {c}x{c}")


def mhca_init(channels: int, heads: int, rng: np.random.Generator) -> MhcaBlock:
    kernels = rng.uniform(-1.0, 1.0, (channels, 3, 3)) / 3.0
    merge = rng.uniform(-1.0, 1.0, (channels, channels)) / math.sqrt(channels)
    return MhcaBlock(kernels, merge, np.ones(channels), np.zeros(channels), heads)


def mhca_vjp(block: MhcaBlock, x: np.ndarray, name: str | None = None):
    if x.ndim != 3 or x.shape[0] != block.kernels.shape[0]:
        raise DimensionError(f"MHCA input {x.shape} does not match {block.kernels.shape[0]} channels")
    c, h, w = x.shape
    with _traced(name, "mhca", x.shape):
        conv, conv_back = depthwise_conv3x3_vjp(x, block.kernels, block.heads)
        tok = conv.reshape(c, h * w).T
        ln, ln_back = layer_norm_vjp(tok, block.ln_gamma, block.ln_beta, block.eps)
        act, act_back = relu_vjp(ln)
        mixed = matmul(act, block.merge.T)
        y = x + mixed.T.reshape(c, h, w)

    def backward(g):
        gm = g.reshape(c, h * w).T
        dmerge = gm.T @ act
        dln = act_back(gm @ block.merge)
        dtok, dgamma, dbeta = ln_back(dln)
        dx_conv, dk = conv_back(dtok.T.reshape(c, h, w))
        grads = {"kernels": dk, "merge": dmerge, "ln_gamma": dgamma, "ln_beta": dbeta}
        return g + dx_conv, grads

    return y, backward


def mhca_forward(block: MhcaBlock, x: np.ndarray) -> np.ndarray:
    return mhca_vjp(block, x)[0]


# ---------------------------------------------------------------------------
# EMHSA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmhsaBlock:
    """Pre-norm multi-head self-attention; K and V are bilinearly reduced by ``reduce``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    heads: int = 1
    reduce: int = 1
    eps: float = LN_EPS

    def __post_init__(self):
        c = self.wq.shape[0]
        if self.heads < 1 or c % self.heads:
            raise ConfigError(f"EMHSA width {c} not divisible by heads={self.heads}")
        if self.reduce < 1:
            raise ConfigError(f"EMHSA reduction must be >= 1, got {self.reduce}")
        for nm in ("wq", "wk", "wv", "wo"):
            if getattr(self, nm).shape != (c, c):
                raise DimensionError(f"{nm} must be {c}x{c}")

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.heads


def emhsa_init(channels: int, heads: int, rng: np.random.Generator, reduce: int = 1) -> EmhsaBlock:
    bound = 1.0 / math.sqrt(channels)
    ws = [rng.uniform(-bound, bound, (channels, channels)) for _ in range(4)]
    return EmhsaBlock(*ws, np.ones(channels), np.zeros(channels), heads, reduce)


def _emhsa(block: EmhsaBlock, x: np.ndarray, grid_h: int, grid_w: int, name: str | None):
    n, c = x.shape
    if c != block.wq.shape[0]:
        raise DimensionError(f"EMHSA input width {c} != block width {block.wq.shape[0]}")
    if n != grid_h * grid_w:
        raise DimensionError(f"EMHSA got {n} tokens for a {grid_h}x{grid_w} grid")
    s = block.reduce
    if s > 1 and (grid_h % s or grid_w % s):
        raise ConfigError(f"EMHSA reduction s={s} must divide grid {grid_h}x{grid_w}")
    hd = block.head_dim
    scale = 1.0 / math.sqrt(hd)
    with _traced(name, "emhsa", x.shape):
        xn, ln_back = layer_norm_vjp(x, block.ln_gamma, block.ln_beta, block.eps)
        q = matmul(xn, block.wq.T)
        k = matmul(xn, block.wk.T)
        v = matmul(xn, block.wv.T)
        if s > 1:
            rh, rw = grid_h // s, grid_w // s
            kg, k_back = bilinear_resize_vjp(k.T.reshape(c, grid_h, grid_w), rh, rw)
            vg, v_back = bilinear_resize_vjp(v.T.reshape(c, grid_h, grid_w), rh, rw)
            kr, vr = kg.reshape(c, -1).T, vg.reshape(c, -1).T
        else:
            kr, vr = k, v
        qh = _split_heads(q, block.heads)
        kh = _split_heads(kr, block.heads)
        vh = _split_heads(vr, block.heads)
        scores = matmul(qh, kh.transpose(0, 2, 1)) * scale
        attn, sm_back = softmax_vjp(scores)
        oh = matmul(attn, vh)
        o = _merge_heads(oh)
        y = x + matmul(o, block.wo.T)

    def backward(g):
        dwo = g.T @ o
        doh = _split_heads(g @ block.wo, block.heads)
        dattn = doh @ vh.transpose(0, 2, 1)
        dvh = attn.transpose(0, 2, 1) @ doh
        dscores = sm_back(dattn) * scale
        dqh = dscores @ kh
        dkh = dscores.transpose(0, 2, 1) @ qh
        dq, dkr, dvr = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
        if s > 1:
            dk = k_back(dkr.T.reshape(c, grid_h // s, grid_w // s)).reshape(c, -1).T
            dv = v_back(dvr.T.reshape(c, grid_h // s, grid_w // s)).reshape(c, -1).T
        else:
            dk, dv = dkr, dvr
        dxn = dq @ block.wq + dk @ block.wk + dv @ block.wv
        dx_ln, dgamma, dbeta = ln_back(dxn)
        grads = {
            "wq": dq.T @ xn,
            "wk": dk.T @ xn,
            "wv": dv.T @ xn,
            "wo": dwo,
            "ln_gamma": dgamma,
            "ln_beta": dbeta,
        }
        return g + dx_ln, grads

    return y, backward, attn


def emhsa_vjp(block: EmhsaBlock, x: np.ndarray, grid_h: int, grid_w: int, name: str | None = None):
    y, backward, _ = _emhsa(block, x, grid_h, grid_w, name)
    return y, backward


def emhsa_forward(block: EmhsaBlock, x, grid_h: int, grid_w: int, return_attn: bool = False):
    y, _, attn = _emhsa(block, x, grid_h, grid_w, None)
    return (y, attn) if return_attn else y


# ---------------------------------------------------------------------------
# Windowed cross-attention
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowedCrossAttn:
    """Parameter-free: Q, K and V arrive already projected."""

    window: int
    heads: int = 1


def window_rows(grid_h: int, grid_w: int, window: int) -> list[np.ndarray]:
    """Query row indices per window; windows and cells both in row-major order."""
    if window < 1 or grid_h % window or grid_w % window:
        raise ConfigError(f"window {window} does not tile the {grid_h}x{grid_w} query grid")
    idx = np.arange(grid_h * grid_w).reshape(grid_h, grid_w)
    out = []
    for wr in range(grid_h // window):
        for wc in range(grid_w // window):
            blk = idx[wr * window:(wr + 1) * window, wc * window:(wc + 1) * window]
            out.append(blk.reshape(-1))
    return out


def partition_memory(
    n_mem: int,
    grid_h: int,
    grid_w: int,
    window: int,
    positions: np.ndarray | None = None,
    scale: int = 1,
) -> tuple[list[np.ndarray], str]:
    """Assign memory tokens to query windows.

    With ``positions`` (``n_mem x 2`` raw patch-grid ``(row, col)``), each
    memory token goes to the window containing its coordinate after dividing
    by ``scale``; an empty window is an error.  Without positions the
    round-robin rule ``j mod k == i mod k`` with ``k = min(windows, n_mem)``
    is used, which never leaves a window empty.  Returns the per-window index
    arrays and the mode name.
    """
    if window < 1 or grid_h % window or grid_w % window:
        raise ConfigError(f"window {window} does not tile the {grid_h}x{grid_w} query grid")
    n_win = (grid_h // window) * (grid_w // window)
    if positions is None:
        k = min(n_win, n_mem)
        j = np.arange(n_mem)
        return [j[j % k == i % k] for i in range(n_win)], "round_robin"
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (n_mem, 2):
        raise DimensionError(f"memory positions {positions.shape} must be {n_mem}x2")
    qr = np.clip(np.floor(positions[:, 0] / scale).astype(np.int64), 0, grid_h - 1)
    qc = np.clip(np.floor(positions[:, 1] / scale).astype(np.int64), 0, grid_w - 1)
    win = (qr // window) * (grid_w // window) + qc // window
    parts = [np.flatnonzero(win == i) for i in range(n_win)]
    empty = [i for i, p in enumerate(parts) if p.size == 0]
    if empty:
        raise DimensionError(f"memory partition leaves windows {empty} without keys")
    return parts, "positions"


def windowed_cross_attention_vjp(
    attn: WindowedCrossAttn,
    queries: np.ndarray,
    mem_k: np.ndarray,
    mem_v: np.ndarray,
    grid_h: int,
    grid_w: int,
    partition: Sequence[np.ndarray],
    name: str | None = None,
):
    n, d = queries.shape
    if n != grid_h * grid_w:
        raise DimensionError(f"{n} queries do not fill a {grid_h}x{grid_w} grid")
    if mem_k.shape != mem_v.shape or mem_k.shape[1] != d:
        raise DimensionError(f"memory keys {mem_k.shape} / values {mem_v.shape} incompatible with width {d}")
    if attn.heads < 1 or d % attn.heads:
        raise ConfigError(f"cross-attention width {d} not divisible by heads={attn.heads}")
    rows = window_rows(grid_h, grid_w, attn.window)
    if len(partition) != len(rows):
        raise DimensionError(f"memory partition has {len(partition)} subsets for {len(rows)} windows")
    scale = 1.0 / math.sqrt(d // attn.heads)
    out = np.empty_like(queries)
    saved = []
    with _traced(name, "cross_attn", queries.shape):
        for ridx, midx in zip(rows, partition):
            midx = np.asarray(midx, dtype=np.int64)
            if midx.size == 0:
                raise DimensionError("a window has an empty memory subset")
            qh = _split_heads(queries[ridx], attn.heads)
            kh = _split_heads(mem_k[midx], attn.heads)
            vh = _split_heads(mem_v[midx], attn.heads)
            probs, sm_back = softmax_vjp(matmul(qh, kh.transpose(0, 2, 1)) * scale)
            if debug_attention_hook is not None:
                probs = debug_attention_hook(probs)
            out[ridx] = _merge_heads(matmul(probs, vh))
            saved.append((ridx, midx, qh, kh, vh, probs, sm_back))

    def backward(g):
        dq = np.zeros_like(queries)
        dk = np.zeros_like(mem_k)
        dv = np.zeros_like(mem_v)
        for ridx, midx, qh, kh, vh, probs, sm_back in saved:
            go = _split_heads(g[ridx], attn.heads)
            dprobs = go @ vh.transpose(0, 2, 1)
            dvh = probs.transpose(0, 2, 1) @ go
            ds = sm_back(dprobs) * scale
            dq[ridx] = _merge_heads(ds @ kh)
            dk[midx] += _merge_heads(ds.transpose(0, 2, 1) @ qh)
            dv[midx] += _merge_heads(dvh)
        return dq, dk, dv

    return out, backward


def windowed_cross_attention(attn, queries, mem_k, mem_v, grid_h, grid_w, partition) -> np.ndarray:
    return windowed_cross_attention_vjp(attn, queries, mem_k, mem_v, grid_h, grid_w, partition)[0]


# ---------------------------------------------------------------------------
# Feed-forward refinement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FfnBlock:
    """``t + w2 @ gelu(w1 @ LN(t))`` applied per token."""

    w1: np.ndarray  # hidden x d
    w2: np.ndarray  # d x hidden
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    eps: float = LN_EPS

    def __post_init__(self):
        h, d = self.w1.shape
        if self.w2.shape != (d, h):
            raise DimensionError(f"w2 {self.w2.shape} must be {d}x{h} to match w1 {self.w1.shape}")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]


def ffn_init(dim: int, rng: np.random.Generator, hidden: int = DEFAULT_FFN_HIDDEN) -> FfnBlock:
    w1 = rng.uniform(-1.0, 1.0, (hidden, dim)) / math.sqrt(dim)
    w2 = rng.uniform(-1.0, 1.0, (dim, hidden)) / math.sqrt(hidden)
    return FfnBlock(w1, w2, np.ones(dim), np.zeros(dim))


def ffn_vjp(block: FfnBlock, t: np.ndarray, name: str | None = None):
    if t.ndim != 2 or t.shape[1] != block.w1.shape[1]:
        raise DimensionError(f"FFN input {t.shape} does not match width {block.w1.shape[1]}")
    with _traced(name, "ffn", t.shape):
        tn, ln_back = layer_norm_vjp(t, block.ln_gamma, block.ln_beta, block.eps)
        hpre = matmul(tn, block.w1.T)
        act, act_back = gelu_vjp(hpre)
        y = t + matmul(act, block.w2.T)

    def backward(g):
        dw2 = g.T @ act
        dh = act_back(g @ block.w2)
        dw1 = dh.T @ tn
        dx_ln, dgamma, dbeta = ln_back(dh @ block.w1)
        return g + dx_ln, {"w1": dw1, "w2": dw2, "ln_gamma": dgamma, "ln_beta": dbeta}

    return y, backward


def ffn_refine(block: FfnBlock, t: np.ndarray) -> np.ndarray:
    return ffn_vjp(block, t)[0]


# ---------------------------------------------------------------------------
# NTB cascade
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NtbLayer:
    """One EMHSA -> MHCA -> FFN repetition; a ``None`` stage is the identity."""

    emhsa: EmhsaBlock | None
    mhca: MhcaBlock | None
    ffn: FfnBlock | None


def ntb_init(depth: int, dim: int, heads: int, hidden: int, rng, reduce: int = 1) -> list[NtbLayer]:
    return [
        NtbLayer(emhsa_init(dim, heads, rng, reduce), mhca_init(dim, heads, rng), ffn_init(dim, rng, hidden))
        for _ in range(depth)
    ]


def ntb_vjp(layers: Sequence[NtbLayer], q0: np.ndarray, grid_h: int, grid_w: int, prefix: str | None = "ntb"):
    n, d = q0.shape
    if n != grid_h * grid_w:
        raise DimensionError(f"NTB got {n} tokens for a {grid_h}x{grid_w} grid")
    backs = []
    q = q0
    for i, layer in enumerate(layers):
        tag = f"{prefix}.{i}" if prefix else f"ntb.{i}"
        nm = (lambda s: f"{tag}.{s}") if prefix else (lambda s: None)
        with annotate_stage(f"{tag}.emhsa"), _traced(nm("emhsa"), "emhsa", q.shape):
            if layer.emhsa is not None:
                q, b_e = emhsa_vjp(layer.emhsa, q, grid_h, grid_w)
            else:
                b_e = None
        with annotate_stage(f"{tag}.mhca"), _traced(nm("mhca"), "mhca", q.shape):
            if layer.mhca is not None:
                grid, b_m = mhca_vjp(layer.mhca, q.T.reshape(d, grid_h, grid_w))
                q = grid.reshape(d, n).T
            else:
                b_m = None
        with annotate_stage(f"{tag}.ffn"), _traced(nm("ffn"), "ffn", q.shape):
            if layer.ffn is not None:
                q, b_f = ffn_vjp(layer.ffn, q)
            else:
                b_f = None
        backs.append((b_e, b_m, b_f))

    def backward(g):
        grads: list[dict] = [dict() for _ in layers]
        for i in reversed(range(len(layers))):
            b_e, b_m, b_f = backs[i]
            if b_f is not None:
                g, grads[i]["ffn"] = b_f(g)
            if b_m is not None:
                gg, grads[i]["mhca"] = b_m(g.T.reshape(d, grid_h, grid_w))
                g = gg.reshape(d, n).T
            if b_e is not None:
                g, grads[i]["emhsa"] = b_e(g)
        return g, grads

    return q, backward


def ntb_forward(layers: Sequence[NtbLayer], q0: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    return ntb_vjp(layers, q0, grid_h, grid_w, prefix=None)[0]
