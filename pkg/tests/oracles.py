"""Test-side oracles written independently of the package internals."""
import math

import numpy as np


def triple_loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            out[i, j] = sum(a[i, t] * b[t, j] for t in range(a.shape[1]))
    return out


def six_loop_conv(x, k):
    c, h, w = x.shape
    out = np.zeros_like(x)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                for a in range(3):
                    for b in range(3):
                        ii, jj = i + a - 1, j + b - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            out[ch, i, j] += k[ch, a, b] * x[ch, ii, jj]
    return out


def half_pixel_resize_1d(vec, n_out):
    n_in = len(vec)
    out = np.empty(n_out)
    for i in range(n_out):
        src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        f = src - lo
        out[i] = vec[lo] * (1 - f) + vec[hi] * f
    return out


def separable_resize(x, oh, ow):
    c = x.shape[0]
    rows = np.stack([np.stack([half_pixel_resize_1d(x[ch, :, j], oh) for j in range(x.shape[2])], axis=1)
                     for ch in range(c)])
    return np.stack([np.stack([half_pixel_resize_1d(rows[ch, i, :], ow) for i in range(oh)])
                     for ch in range(c)])


def softmax(v):
    e = np.exp(v - np.max(v, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mhsa(x, wq, wk, wv, wo, gamma, beta, heads, eps=1e-5, kv_tokens=None):
    mu = x.mean(1, keepdims=True)
    xn = (x - mu) / np.sqrt(((x - mu) ** 2).mean(1, keepdims=True) + eps) * gamma + beta
    q, k, v = xn @ wq.T, xn @ wk.T, xn @ wv.T
    if kv_tokens is not None:
        k, v = kv_tokens(k), kv_tokens(v)
    hd = x.shape[1] // heads
    o = np.zeros_like(q)
    for h in range(heads):
        s = slice(h * hd, (h + 1) * hd)
        o[:, s] = softmax(q[:, s] @ k[:, s].T / math.sqrt(hd)) @ v[:, s]
    return x + o @ wo.T


def prefill_macs_per_layer(s, d, ratio, mats):
    return 4 * s * d * d + 2 * s * s * d + mats * ratio * s * d * d


def vit_flops(img, patch, layers=24, d=1024, mlp=4096):
    p = (img // patch) ** 2
    n = p + 1
    macs = p * patch * patch * 3 * d + layers * (4 * n * d * d + 2 * n * n * d + 2 * n * d * mlp)
    return 2 * macs
