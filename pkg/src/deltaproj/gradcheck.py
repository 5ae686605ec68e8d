"""Analytic-vs-finite-difference gradient comparison over named input tensors."""
from __future__ import annotations

from dataclasses import replace
from typing import Callable

import numpy as np

from .blocks import (
    EmhsaBlock,
    FfnBlock,
    MhcaBlock,
    WindowedCrossAttn,
    emhsa_init,
    emhsa_vjp,
    ffn_init,
    ffn_vjp,
    mhca_init,
    mhca_vjp,
    partition_memory,
    windowed_cross_attention_vjp,
)
from .config import ProjectorConfig
from .delta import DeltaLinear, delta_apply_vjp
from .numerics import depthwise_conv3x3, finite_diff_grad, layer_norm, relative_error
from .pipeline import Projector, init_params, randomize_deltas, synth_features
from .tree import flatten, replace_leaf

FD_STEP = 1e-5
GRAD_TOL = 1e-6

# fn(arrays) -> (y, backward) with backward(dy) -> {name: grad}
VjpFn = Callable[[dict], tuple]


def _sample(rng, size: int, max_coords: int | None):
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, max_coords, replace=False))


def check_vjp(fn: VjpFn, arrays: dict, rng: np.random.Generator, max_coords: int | None = None,
              h: float = FD_STEP) -> dict[str, float]:
    """Relative error per input for the scalar loss ``sum(fn(arrays) * R)`` with Gaussian ``R``."""
    y, backward = fn(arrays)
    weight = rng.standard_normal(y.shape)
    analytic = backward(weight)
    errors = {}
    for name, value in arrays.items():
        idx = _sample(rng, value.size, max_coords)

        def loss(t, name=name):
            return float(np.sum(fn({**arrays, name: t})[0] * weight))

        numeric = finite_diff_grad(loss, value, h, indices=idx)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    return errors


# ---------------------------------------------------------------------------
# Block adapters
# ---------------------------------------------------------------------------

def delta_case(rng, n=4, d_in=6, d_out=5, r=2):
    arrays = {
        "x": rng.standard_normal((n, d_in)),
        "base": rng.standard_normal((d_out, d_in)),
        "u": rng.standard_normal((d_out, r)),
        "v": rng.standard_normal((d_in, r)),
    }

    def fn(a):
        y, b = delta_apply_vjp(DeltaLinear(a["base"], a["u"], a["v"]), a["x"])

        def back(g):
            dx, gr = b(g)
            return {"x": dx, **gr}

        return y, back

    return fn, arrays


def _block_arrays(block) -> dict:
    return {k: v.copy() for k, v in flatten(block).items()}


def _perturb(arrays: dict, rng, scale=0.3) -> dict:
    # Unit LayerNorm affines and zero betas are special points; move off them.
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in arrays.items()}


def emhsa_case(rng, channels=8, heads=2, grid=(4, 4), reduce=1):
    block = emhsa_init(channels, heads, rng, reduce)
    arrays = _perturb(_block_arrays(block), rng)
    arrays["x"] = rng.standard_normal((grid[0] * grid[1], channels))

    def fn(a):
        blk = EmhsaBlock(a["wq"], a["wk"], a["wv"], a["wo"], a["ln_gamma"], a["ln_beta"], heads, reduce)
        y, b = emhsa_vjp(blk, a["x"], *grid)

        def back(g):
            dx, gr = b(g)
            return {"x": dx, **gr}

        return y, back

    return fn, arrays


KINK_MARGIN = 1e-3


def _relu_margin(a: dict, heads: int) -> float:
    c = a["x"].shape[0]
    conv = depthwise_conv3x3(a["x"], a["kernels"], heads).reshape(c, -1).T
    return float(np.abs(layer_norm(conv, a["ln_gamma"], a["ln_beta"])).min())


def mhca_case(rng, channels=6, heads=2, grid=(4, 5)):
    block = mhca_init(channels, heads, rng)
    arrays = _perturb(_block_arrays(block), rng)
    # Central differences straddling a ReLU kink are meaningless; redraw x until
    # every pre-activation sits well clear of zero.
    while True:
        arrays["x"] = rng.standard_normal((channels, *grid))
        if _relu_margin(arrays, heads) > KINK_MARGIN:
            break

    def fn(a):
        blk = MhcaBlock(a["kernels"], a["merge"], a["ln_gamma"], a["ln_beta"], heads)
        y, b = mhca_vjp(blk, a["x"])

        def back(g):
            dx, gr = b(g)
            return {"x": dx, **gr}

        return y, back

    return fn, arrays


def ffn_case(rng, dim=6, hidden=10, n=5):
    block = ffn_init(dim, rng, hidden)
    arrays = _perturb(_block_arrays(block), rng)
    arrays["t"] = rng.standard_normal((n, dim))

    def fn(a):
        y, b = ffn_vjp(FfnBlock(a["w1"], a["w2"], a["ln_gamma"], a["ln_beta"]), a["t"])

        def back(g):
            dt, gr = b(g)
            return {"t": dt, **gr}

        return y, back

    return fn, arrays


def cross_case(rng, dim=8, heads=2, grid=4, window=2, n_mem=6):
    attn = WindowedCrossAttn(window, heads)
    parts, _ = partition_memory(n_mem, grid, grid, window)
    arrays = {
        "q": rng.standard_normal((grid * grid, dim)),
        "k": rng.standard_normal((n_mem, dim)),
        "v": rng.standard_normal((n_mem, dim)),
    }

    def fn(a):
        y, b = windowed_cross_attention_vjp(attn, a["q"], a["k"], a["v"], grid, grid, parts)

        def back(g):
            dq, dk, dv = b(g)
            return {"q": dq, "k": dk, "v": dv}

        return y, back

    return fn, arrays


BLOCK_CASES = {
    "delta_apply": delta_case,
    "emhsa": emhsa_case,
    "emhsa_reduced": lambda rng: emhsa_case(rng, grid=(4, 4), reduce=2),
    "mhca": mhca_case,
    "ffn": ffn_case,
    "cross_attn": cross_case,
}


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------

def tiny_config(seed: int = 0, **overrides) -> ProjectorConfig:
    """6x6 query grid from a 12x12 patch grid, width 16, four memory tokens.

    One 6x6 window keeps every key visible to every query.  A window that
    receives a single key returns that key's value regardless of the query,
    which would leave the query path with identically zero gradients.
    """
    base = dict(
        img_h=168, img_w=168, patch=14, scale=2, feat_dim=16, embed_dim=16, heads=2,
        rank=4, window=6, mem_tokens=4, ntb_depth=1, ffn_hidden=24, seed=seed,
    )
    base.update(overrides)
    return ProjectorConfig(**base).validate()


def _perturbed_params(cfg, rng):
    params = randomize_deltas(init_params(cfg), rng)
    for path, leaf in flatten(params).items():
        if path.endswith(("ln_gamma", "ln_beta")):
            params = replace_leaf(params, path, leaf + 0.3 * rng.standard_normal(leaf.shape))
    return params


def end_to_end_errors(cfg: ProjectorConfig, rng: np.random.Generator, max_coords: int = 4,
                      h: float = FD_STEP) -> dict[str, float]:
    """Sampled-coordinate check of every parameter tensor and both feature inputs."""
    params = _perturbed_params(cfg, rng)
    feats, _ = synth_features(cfg, rng)
    proj = Projector(cfg, params)
    out = proj.project(feats, keep_activations=True, trace=False)
    weight = rng.standard_normal(out.tokens.shape)
    grads = proj.backward(weight)
    analytic = {f"params.{k}": v for k, v in flatten(grads["params"]).items()}
    analytic["patch_grid"] = grads["patch_grid"]
    analytic["summary"] = grads["summary"]

    def loss_with(p, f):
        return float(np.sum(Projector(cfg, p).project(f, trace=False).tokens * weight))

    errors = {}
    for path, leaf in flatten(params).items():
        idx = _sample(rng, leaf.size, max_coords)
        numeric = finite_diff_grad(lambda t, path=path: loss_with(replace_leaf(params, path, t), feats),
                                   leaf, h, indices=idx)
        errors[f"params.{path}"] = relative_error(analytic[f"params.{path}"].reshape(-1)[idx], numeric)
    for name in ("patch_grid", "summary"):
        leaf = getattr(feats, name)
        idx = _sample(rng, leaf.size, max_coords)
        numeric = finite_diff_grad(lambda t, name=name: loss_with(params, replace(feats, **{name: t})),
                                   leaf, h, indices=idx)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    return errors

