"""End-to-end projector: vision features in, ``V`` visual tokens out.

Stage order: interpolate the patch grid by ``scale`` -> refine (EMHSA, MHCA)
-> add 2-D positions -> delta query projection -> NTB cascade -> delta K/V
projection of the multi-level summary -> windowed cross-attention -> FFN.
"""
from __future__ import annotations

import dataclasses
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dltn
from .blocks import (
    EmhsaBlock,
    FfnBlock,
    MhcaBlock,
    NtbLayer,
    WindowedCrossAttn,
    emhsa_init,
    emhsa_vjp,
    ffn_init,
    ffn_vjp,
    mhca_init,
    mhca_vjp,
    ntb_init,
    ntb_vjp,
    partition_memory,
    windowed_cross_attention_vjp,
)
from .config import ProjectorConfig, token_count
from .delta import DeltaFamily, delta_apply_vjp, delta_family_init
from .errors import ConfigError, DimensionError, FormatError, NumericError, StateError, annotate_stage
from .numerics import MacCounter, bilinear_resize_vjp, counting, make_rng, sinusoidal_pos2d, stage
from .tree import flatten

FIXTURE_FILES = ("patch_grid.dltn", "summary.dltn")


@dataclass(frozen=True)
class VisionFeatures:
    """Dense patch features ``N x C`` on a ``grid_h x grid_w`` grid plus ``L_m x C`` memory summary."""

    patch_grid: np.ndarray
    grid_h: int
    grid_w: int
    summary: np.ndarray
    memory_pos: np.ndarray | None = None

    def check(self, cfg: ProjectorConfig) -> None:
        want_z = (cfg.num_patches, cfg.feat_dim)
        if (self.grid_h, self.grid_w) != (cfg.grid_h0, cfg.grid_w0) or self.patch_grid.shape != want_z:
            raise DimensionError(
                f"patch grid {self.grid_h}x{self.grid_w} {self.patch_grid.shape} does not match config "
                f"{cfg.grid_h0}x{cfg.grid_w0} {want_z}"
            )
        want_m = (cfg.mem_tokens, cfg.feat_dim)
        if self.summary.shape != want_m:
            raise DimensionError(f"summary {self.summary.shape} does not match config {want_m}")

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        c = self.patch_grid.shape[1]
        dltn.save(directory / "patch_grid.dltn", self.patch_grid.reshape(self.grid_h, self.grid_w, c))
        dltn.save(directory / "summary.dltn", self.summary)
        if self.memory_pos is not None:
            dltn.save(directory / "memory_pos.dltn", self.memory_pos)

    @classmethod
    def load(cls, directory) -> "VisionFeatures":
        directory = Path(directory)
        if not directory.is_dir():
            raise FormatError(f"feature fixture {directory} is not a directory")
        grid = dltn.load(directory / "patch_grid.dltn")
        if grid.ndim != 3:
            raise FormatError(f"patch_grid.dltn must be rank 3 (H x W x C), got shape {grid.shape}")
        summary = dltn.load(directory / "summary.dltn")
        if summary.ndim != 2:
            raise FormatError(f"summary.dltn must be rank 2, got shape {summary.shape}")
        pos_path = directory / "memory_pos.dltn"
        pos = dltn.load(pos_path) if pos_path.exists() else None
        h, w, c = grid.shape
        return cls(grid.reshape(h * w, c), h, w, summary, pos)


@dataclass(frozen=True)
class VisualTokens:
    tokens: np.ndarray
    token_count: int
    config_hash: str
    ablation_flags: dict
    stage_trace: list = field(default_factory=list)
    window: int = 0
    partition_mode: str = ""
    wall_ms: dict = field(default_factory=dict)

    def sidecar(self) -> dict:
        return {
            "version": 1,
            "config_hash": self.config_hash,
            "V": self.token_count,
            "d_v": int(self.tokens.shape[1]),
            "ablation_flags": self.ablation_flags,
            "window": self.window,
            "memory_partition": self.partition_mode,
            "stage_trace": self.stage_trace,
            "wall_ms": self.wall_ms,
        }


@dataclass(frozen=True)
class ProjectorParams:
    refine_emhsa: EmhsaBlock
    refine_mhca: MhcaBlock
    family: DeltaFamily
    ntb: tuple[NtbLayer, ...]
    cross: WindowedCrossAttn
    ffn: FfnBlock


def init_params(cfg: ProjectorConfig) -> ProjectorParams:
    """Deterministic weights from ``cfg.seed``; ablated blocks are still drawn so arms share weights."""
    cfg.validate()
    rng = make_rng(cfg.seed)
    c, d = cfg.feat_dim, cfg.embed_dim
    return ProjectorParams(
        refine_emhsa=emhsa_init(c, cfg.heads, rng, cfg.attn_reduce),
        refine_mhca=mhca_init(c, cfg.heads, rng),
        family=delta_family_init(d, c, cfg.rank, rng),
        ntb=tuple(ntb_init(cfg.ntb_depth, d, cfg.heads, cfg.ffn_hidden, rng, cfg.attn_reduce)),
        cross=WindowedCrossAttn(cfg.window, cfg.heads),
        ffn=ffn_init(d, rng, cfg.ffn_hidden),
    )


def randomize_deltas(params: ProjectorParams, rng: np.random.Generator, scale: float = 0.5) -> ProjectorParams:
    """Replace the zero ``v`` factors with random draws (exercises the low-rank path)."""
    fam = params.family
    deltas = {k: (u, rng.uniform(-scale, scale, v.shape)) for k, (u, v) in fam.deltas.items()}
    return dataclasses.replace(params, family=dataclasses.replace(fam, deltas=deltas))


def synth_features(cfg: ProjectorConfig, rng: np.random.Generator) -> tuple[VisionFeatures, np.ndarray]:
    """Gaussian patch grid plus a summary built as mean-pools over a random partition of the patches.

    Returns the features and the per-patch group index used for the pooling.
    """
    cfg.validate()
    n, m = cfg.num_patches, cfg.mem_tokens
    if n < m:
        raise ConfigError(f"cannot pool {n} patches into {m} non-empty memory groups")
    z = rng.standard_normal((n, cfg.feat_dim))
    groups = np.empty(n, dtype=np.int64)
    groups[rng.permutation(n)] = np.arange(n) % m
    summary = np.stack([z[groups == g].mean(axis=0) for g in range(m)])
    return VisionFeatures(z, cfg.grid_h0, cfg.grid_w0, summary), groups


def _finite(t: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(t)):
        raise NumericError(f"non-finite values after stage {name}")


def _build_queries_vjp(cfg: ProjectorConfig, params: ProjectorParams, features: VisionFeatures):
    c = cfg.feat_dim
    gh, gw = cfg.grid_h, cfg.grid_w
    z = features.patch_grid
    backs = []
    with annotate_stage("interp"), stage("interp", "interp", z.shape):
        grid, b = bilinear_resize_vjp(z.T.reshape(c, features.grid_h, features.grid_w), gh, gw)
        backs.append(("grid", b))
    for st in cfg.refine:
        name = f"refine.{st}"
        with annotate_stage(name):
            if st == "emhsa":
                with stage(name, "emhsa", (gh * gw, c)):
                    if cfg.use_emhsa:
                        tok, b = emhsa_vjp(params.refine_emhsa, grid.reshape(c, -1).T, gh, gw)
                        grid = tok.T.reshape(c, gh, gw)
                        backs.append(("tokens", b, "refine_emhsa"))
            else:
                grid, b = mhca_vjp(params.refine_mhca, grid, name)
                backs.append(("grid", b, "refine_mhca"))
        _finite(grid, name)
    q = grid.reshape(c, -1).T
    if cfg.add_pos2d:
        q = q + sinusoidal_pos2d(gh, gw, c)

    def backward(g):
        grads = {}
        gg = g.T.reshape(c, gh, gw)
        for item in reversed(backs):
            layout, b = item[0], item[1]
            if layout == "tokens":
                dt, grads[item[2]] = b(gg.reshape(c, -1).T)
                gg = dt.T.reshape(c, gh, gw)
            elif len(item) == 3:
                gg, grads[item[2]] = b(gg)
            else:
                gg = b(gg)
        return gg.reshape(c, -1).T, grads

    return q, backward


def build_queries(cfg: ProjectorConfig, features: VisionFeatures, params: ProjectorParams | None = None):
    cfg.validate()
    features.check(cfg)
    params = params if params is not None else init_params(cfg)
    return _build_queries_vjp(cfg, params, features)[0]


def kv_pathway(cfg: ProjectorConfig, family: DeltaFamily, summary: np.ndarray):
    return _kv_vjp(cfg, family, summary)[:2]


def _kv_vjp(cfg: ProjectorConfig, family: DeltaFamily, summary: np.ndarray):
    if summary.ndim != 2 or summary.shape[0] != cfg.mem_tokens:
        raise DimensionError(f"summary {summary.shape} must have {cfg.mem_tokens} rows")
    k, bk = delta_apply_vjp(family.layer("k"), summary, "proj.k", cfg.use_deltaproj)
    v, bv = delta_apply_vjp(family.layer("v"), summary, "proj.v", cfg.use_deltaproj)
    return k, v, bk, bv


def _zeros_like_block(block):
    return {k: np.zeros_like(a) for k, a in flatten(block).items()}


def _active_layers(cfg: ProjectorConfig, params: ProjectorParams) -> tuple[NtbLayer, ...]:
    layers = []
    for layer in params.ntb:
        if not cfg.use_tb:
            layers.append(NtbLayer(None, None, None))
        elif not cfg.use_emhsa:
            layers.append(NtbLayer(None, layer.mhca, layer.ffn))
        else:
            layers.append(layer)
    return tuple(layers)


def _project_vjp(cfg: ProjectorConfig, params: ProjectorParams, features: VisionFeatures):
    cfg.validate()
    features.check(cfg)
    gh, gw = cfg.grid_h, cfg.grid_w

    q_hat, b_q = _build_queries_vjp(cfg, params, features)
    with annotate_stage("proj.q"):
        q0, b_dq = delta_apply_vjp(params.family.layer("q"), q_hat, "proj.q", cfg.use_deltaproj)
    _finite(q0, "proj.q")
    layers = _active_layers(cfg, params)
    q, b_ntb = ntb_vjp(layers, q0, gh, gw)
    _finite(q, "ntb")
    with annotate_stage("kv_pathway"):
        mem_k, mem_v, b_k, b_v = _kv_vjp(cfg, params.family, features.summary)
    _finite(mem_k, "proj.k")
    _finite(mem_v, "proj.v")
    with annotate_stage("cross_attn"):
        parts, mode = partition_memory(
            cfg.mem_tokens, gh, gw, cfg.window, features.memory_pos, cfg.scale
        )
        y, b_x = windowed_cross_attention_vjp(params.cross, q, mem_k, mem_v, gh, gw, parts, "cross_attn")
    _finite(y, "cross_attn")
    with annotate_stage("ffn"):
        out, b_f = ffn_vjp(params.ffn, y, "ffn")
    _finite(out, "ffn")

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != out.shape:
            raise DimensionError(f"upstream gradient {g.shape} must match tokens {out.shape}")
        gy, g_ffn = b_f(g)
        gq, gk, gv = b_x(gy)
        ds_k, g_pk = b_k(gk)
        ds_v, g_pv = b_v(gv)
        gq0, g_ntb_layers = b_ntb(gq)
        gqh, g_pq = b_dq(gq0)
        gz, g_refine = b_q(gqh)

        fam = params.family
        g_base = g_pq["base"] + g_pk["base"] + g_pv["base"]
        deltas = {"q": (g_pq["u"], g_pq["v"]), "k": (g_pk["u"], g_pk["v"]), "v": (g_pv["u"], g_pv["v"])}
        for key in fam.deltas:
            deltas.setdefault(key, tuple(np.zeros_like(a) for a in fam.deltas[key]))
        ntb_grads = []
        for layer, got in zip(params.ntb, g_ntb_layers):
            ntb_grads.append({
                nm: got.get(nm, _zeros_like_block(getattr(layer, nm)))
                for nm in ("emhsa", "mhca", "ffn")
            })
        param_grads = {
            "refine_emhsa": g_refine.get("refine_emhsa", _zeros_like_block(params.refine_emhsa)),
            "refine_mhca": g_refine.get("refine_mhca", _zeros_like_block(params.refine_mhca)),
            "family": {"base": g_base, "deltas": deltas},
            "ntb": ntb_grads,
            "ffn": g_ffn,
        }
        return {"params": param_grads, "patch_grid": gz, "summary": ds_k + ds_v}

    return out, parts, mode, backward


class Projector:
    """Config plus weights.  ``project`` may be called concurrently on distinct
    features when ``keep_activations`` is off; ``backward`` pairs with the most
    recent ``project(..., keep_activations=True)`` on this handle.
    """

    def __init__(self, cfg: ProjectorConfig, params: ProjectorParams | None = None):
        self.cfg = cfg.validate()
        self.params = params if params is not None else init_params(cfg)
        self._pending = None

    def project(self, features: VisionFeatures, keep_activations: bool = False, trace: bool = True) -> VisualTokens:
        counter = MacCounter()
        t0 = time.perf_counter()
        with counting(counter) if trace else nullcontext():
            out, parts, mode, backward = _project_vjp(self.cfg, self.params, features)
        elapsed = (time.perf_counter() - t0) * 1e3
        if keep_activations:
            self._pending = backward
        v = token_count(self.cfg)
        if out.shape[0] != v:
            raise DimensionError(f"pipeline produced {out.shape[0]} tokens, expected {v}")
        return VisualTokens(
            tokens=out,
            token_count=v,
            config_hash=self.cfg.config_hash,
            ablation_flags=self.cfg.ablation_flags,
            stage_trace=[s.as_dict() for s in counter.stages] if trace else [],
            window=self.cfg.window,
            partition_mode=mode,
            wall_ms={"total": round(elapsed, 3)},
        )

    def backward(self, upstream_grad: np.ndarray) -> dict:
        if self._pending is None:
            raise StateError("backward called before a forward pass with keep_activations=True")
        backward, self._pending = self._pending, None
        return backward(upstream_grad)


def project(cfg: ProjectorConfig, features: VisionFeatures, params: ProjectorParams | None = None) -> VisualTokens:
    return Projector(cfg, params).project(features)


def projector_backward(projector: Projector, upstream_grad: np.ndarray) -> dict:
    return projector.backward(upstream_grad)


def trace_macs(tokens: VisualTokens) -> int:
    return sum(s["macs"] for s in tokens.stage_trace)
