"""Slow textbook implementations used as oracles by the verification suites.

Nothing here shares code with the production blocks beyond numpy itself.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_conv3x3(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros_like(x)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for a in range(3):
                    for b in range(3):
                        ii, jj = i + a - 1, j + b - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            acc += kernels[ch, a, b] * x[ch, ii, jj]
                out[ch, i, j] = acc
    return out


def softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm_rows(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def full_mhsa(x, wq, wk, wv, wo, gamma, beta, heads, eps):
    """Pre-norm multi-head self-attention with a residual, one head at a time."""
    xn = layer_norm_rows(x, gamma, beta, eps)
    q, k, v = xn @ wq.T, xn @ wk.T, xn @ wv.T
    hd = x.shape[1] // heads
    outs = []
    for hh in range(heads):
        sl = slice(hh * hd, (hh + 1) * hd)
        p = softmax_rows(q[:, sl] @ k[:, sl].T / math.sqrt(hd))
        outs.append(p @ v[:, sl])
    return x + np.concatenate(outs, axis=1) @ wo.T


def global_cross_attention(q, k, v, heads):
    hd = q.shape[1] // heads
    outs = []
    for hh in range(heads):
        sl = slice(hh * hd, (hh + 1) * hd)
        outs.append(softmax_rows(q[:, sl] @ k[:, sl].T / math.sqrt(hd)) @ v[:, sl])
    return np.concatenate(outs, axis=1)


def gelu_exact(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def ffn_formula(t, w1, w2, gamma, beta, eps):
    return t + gelu_exact(layer_norm_rows(t, gamma, beta, eps) @ w1.T) @ w2.T


def mhca_formula(x, kernels, merge, gamma, beta, eps):
    c, h, w = x.shape
    conv = naive_conv3x3(x, kernels).reshape(c, h * w).T
    act = np.maximum(layer_norm_rows(conv, gamma, beta, eps), 0.0)
    return x + (act @ merge.T).T.reshape(c, h, w)
