"""Analytic FLOPs and throughput model for vision encoder, projector and LLM.

Conventions:

* one multiply-accumulate (MAC) is two FLOPs;
* headline numbers count matrix products only; ``strict=True`` adds the
  softmax and normalisation arithmetic (five FLOPs per attention score, five
  per normalised element) for the LLM terms, and for the projector switches
  from the per-token headline formula to the exact counted MACs;
* the MLP expansion ratio is called ``mlp_ratio`` here.  It is unrelated to
  the DeltaProjection rank ``ProjectorConfig.rank``.

LLM per-layer MACs for a context of ``S`` tokens at width ``d``::

    attention  4*S*d**2 + 2*S**2*d        (Q, K, V, O projections; QK^T and PV)
    mlp        n * mlp_ratio * S * d**2   (n = mlp_flop_matrices)

Decode token ``g`` (0-based) attends over ``S0 + g`` cached positions and
costs ``4*d**2 + n*mlp_ratio*d**2 + 2*(S0+g)*d`` MACs per layer.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .blocks import partition_memory
from .config import ProjectorConfig, parse_bool, parse_kv, preset_text
from .errors import ConfigError

TERA = 1e12
SOFTMAX_FLOPS = 5
NORM_FLOPS = 5

# Published (V, value) anchors used for calibration.
PREFILL_ANCHORS = ((576, 6.72), (144, 2.16), (16, 0.85), (1, 0.70))
TPS_ANCHORS = ((576, 23.96), (1, 37.08))


@dataclass(frozen=True)
class LlmConfig:
    name: str
    d_model: int
    n_layers: int
    mlp_ratio: float
    heads: int
    mlp_flop_matrices: int = 2
    include_lm_head: bool = False
    vocab: int = 32000
    param_count: float = 0.0
    bytes_per_param: int = 2
    prompt_tokens: float = 0.0
    peak_tflops: float = 0.0
    bandwidth_gbs: float = 0.0
    residuals: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        bad = [k for k in ("d_model", "n_layers", "mlp_ratio", "heads", "mlp_flop_matrices", "vocab")
               if getattr(self, k) <= 0]
        if bad:
            raise ConfigError(f"LLM config {self.name}: fields must be positive: {bad}")

    @property
    def weight_bytes(self) -> float:
        return self.param_count * self.bytes_per_param

    def kv_bytes(self, context: float) -> float:
        """Bytes of K and V cache read for one decode step over ``context`` positions."""
        return 2.0 * self.n_layers * self.d_model * self.bytes_per_param * context

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "LlmConfig":
        kv = parse_kv(text, source)
        residuals = {k.split(".", 1)[1]: float(kv.pop(k)) for k in list(kv) if k.startswith("residual.")}
        known = {f.name: f for f in dataclasses.fields(cls) if f.name != "residuals"}
        unknown = sorted(set(kv) - set(known))
        if unknown:
            raise ConfigError(f"{source}: unknown LLM keys {unknown}")
        values = {}
        for key, raw in kv.items():
            ftype = known[key].type
            try:
                if ftype == "bool":
                    values[key] = parse_bool(raw, key)
                elif ftype == "int":
                    values[key] = int(raw)
                elif ftype == "float":
                    values[key] = float(raw)
                else:
                    values[key] = raw
            except ValueError:
                raise ConfigError(f"{source}: bad value for {key}: {raw!r}") from None
        return cls(residuals=residuals, **values)

    @classmethod
    def preset(cls, name: str) -> "LlmConfig":
        return cls.from_text(preset_text(name), f"preset:{name}")


@dataclass(frozen=True)
class Workload:
    text_tokens: float
    visual_tokens: int
    generated: int = 30
    img_h: int = 336
    img_w: int = 336
    patch: int = 14

    @property
    def context(self) -> float:
        return self.text_tokens + self.visual_tokens


@dataclass(frozen=True)
class CostReport:
    visual_tokens: int
    f_vision: float
    f_proj: float
    f_prefill: float
    f_decode: float
    f_total: float
    tps_est: float | None = None

    def row(self) -> dict:
        return {
            "V": self.visual_tokens,
            "f_vision": self.f_vision,
            "f_proj": self.f_proj,
            "f_prefill": self.f_prefill,
            "f_decode": self.f_decode,
            "f_total": self.f_total,
            "tps_est": self.tps_est,
        }


# ---------------------------------------------------------------------------
# Projector
# ---------------------------------------------------------------------------

def _emhsa_macs(n: int, dim: int, reduce: int) -> tuple[int, int]:
    """(projection MACs, attention MACs) for one EMHSA pass over ``n`` tokens."""
    m = n // (reduce * reduce)
    return 4 * n * dim * dim, 2 * n * m * dim


def projector_stage_macs(cfg: ProjectorConfig, strict: bool = True) -> dict[str, int]:
    """MACs per traced stage, in pipeline order.

    ``strict=True`` reproduces the instrumented trace exactly (round-robin
    memory partition).  ``strict=False`` keeps only the per-visual-token
    terms: projections, MHCA, FFNs and windowed attention bounded by every
    query seeing all ``mem_tokens`` keys.  The KV pathway and the quadratic
    self-attention products are dropped, so the headline count is exactly
    linear in ``V``.
    """
    cfg.validate()
    n = cfg.num_queries
    c, d, r, h = cfg.feat_dim, cfg.embed_dim, cfg.rank, cfg.ffn_hidden
    lm = cfg.mem_tokens
    out: dict[str, int] = {"interp": 0}

    def emhsa(dim):
        proj, attn = _emhsa_macs(n, dim, cfg.attn_reduce)
        return proj + (attn if strict else 0)

    for st in cfg.refine:
        if st == "emhsa":
            out["refine.emhsa"] = emhsa(c) if cfg.use_emhsa else 0
        else:
            out["refine.mhca"] = 9 * n * c + n * c * c
    out["proj.q.base"] = n * c * d
    out["proj.q.delta"] = n * r * (c + d) if cfg.use_deltaproj else 0
    for i in range(cfg.ntb_depth):
        on = cfg.use_tb
        out[f"ntb.{i}.emhsa"] = emhsa(d) if on and cfg.use_emhsa else 0
        out[f"ntb.{i}.mhca"] = 9 * n * d + n * d * d if on else 0
        out[f"ntb.{i}.ffn"] = 2 * n * d * h if on else 0
    if strict:
        for p in ("k", "v"):
            out[f"proj.{p}.base"] = lm * c * d
            out[f"proj.{p}.delta"] = lm * r * (c + d) if cfg.use_deltaproj else 0
        parts, _ = partition_memory(lm, cfg.grid_h, cfg.grid_w, cfg.window)
        w2 = cfg.window * cfg.window
        out["cross_attn"] = sum(2 * w2 * len(p) * d for p in parts)
    else:
        out["cross_attn"] = 2 * n * lm * d
    out["ffn"] = 2 * n * d * h
    return out


def flops_projector(cfg: ProjectorConfig, strict: bool = False) -> float:
    return 2.0 * sum(projector_stage_macs(cfg, strict).values())


def delta_apply_macs(n: int, d_in: int, d_out: int, rank: int) -> int:
    return n * d_in * d_out + n * rank * (d_in + d_out)


def materialized_apply_macs(n: int, d_in: int, d_out: int, rank: int) -> int:
    """Dense-update path: ``u v^T`` is formed once (not counted, it is per weight,
    not per token) and applied as its own product beside the base.

    The factored path is cheaper exactly when ``rank*(d_in+d_out) < d_in*d_out``.
    """
    return 2 * n * d_in * d_out


# ---------------------------------------------------------------------------
# LLM
# ---------------------------------------------------------------------------

def _layer_prefill_macs(llm: LlmConfig, s: float) -> float:
    d = llm.d_model
    return 4 * s * d * d + 2 * s * s * d + llm.mlp_flop_matrices * llm.mlp_ratio * s * d * d


def flops_prefill(llm: LlmConfig, w: Workload, strict: bool = False) -> float:
    s = w.context
    total = 2.0 * llm.n_layers * _layer_prefill_macs(llm, s)
    if llm.include_lm_head:
        total += 2.0 * llm.d_model * llm.vocab
    if strict:
        total += llm.n_layers * (SOFTMAX_FLOPS * llm.heads * s * s + 2 * NORM_FLOPS * s * llm.d_model)
    return total


def decode_step_flops(llm: LlmConfig, w: Workload, strict: bool = False) -> np.ndarray:
    """FLOPs of each of the ``G`` decode steps."""
    d = llm.d_model
    ctx = w.context + np.arange(w.generated, dtype=np.float64)
    dense = 4 * d * d + llm.mlp_flop_matrices * llm.mlp_ratio * d * d
    steps = 2.0 * llm.n_layers * (dense + 2 * ctx * d)
    if llm.include_lm_head:
        steps = steps + 2.0 * d * llm.vocab
    if strict:
        steps = steps + llm.n_layers * (SOFTMAX_FLOPS * llm.heads * ctx + 2 * NORM_FLOPS * d)
    return steps


def flops_decode(llm: LlmConfig, w: Workload, strict: bool = False) -> float:
    if w.generated == 0:
        return 0.0
    return float(decode_step_flops(llm, w, strict).sum())


# ViT-L/14 geometry; the class token is included.
VIT_LAYERS = 24
VIT_WIDTH = 1024
VIT_MLP = 4096
VIT_CHANNELS = 3


def flops_vision(w: Workload, strict: bool = False) -> float:
    if w.img_h % w.patch or w.img_w % w.patch:
        raise ConfigError(f"patch {w.patch} must divide image {w.img_h}x{w.img_w}")
    patches = (w.img_h // w.patch) * (w.img_w // w.patch)
    n = patches + 1
    d = VIT_WIDTH
    embed = patches * (w.patch * w.patch * VIT_CHANNELS) * d
    layer = 4 * n * d * d + 2 * n * n * d + 2 * n * d * VIT_MLP
    total = 2.0 * (embed + VIT_LAYERS * layer)
    if strict:
        total += VIT_LAYERS * (SOFTMAX_FLOPS * 16 * n * n + 2 * NORM_FLOPS * n * d)
    return total


# ---------------------------------------------------------------------------
# Throughput
# ---------------------------------------------------------------------------

def _latency_terms(llm: LlmConfig, w: Workload, f_front: float, strict: bool = False):
    """(compute FLOPs before decode, per-step decode FLOPs, per-step bytes)."""
    f_pre = f_front + flops_prefill(llm, w, strict)
    steps = decode_step_flops(llm, w, strict)
    ctx = w.context + np.arange(w.generated, dtype=np.float64)
    step_bytes = llm.weight_bytes + llm.kv_bytes(ctx)
    return f_pre, steps, step_bytes


def estimate_tps(llm: LlmConfig, w: Workload, f_front: float, strict: bool = False) -> float:
    """Generated tokens per second.

    Prefill (plus vision and projector) runs at peak compute; every decode
    step takes the larger of its compute time and the time to stream the
    weights and the current KV cache.
    """
    if llm.peak_tflops <= 0 or llm.bandwidth_gbs <= 0:
        raise ConfigError(f"LLM preset {llm.name} has no throughput constants")
    peak = llm.peak_tflops * TERA
    bw = llm.bandwidth_gbs * 1e9
    f_pre, steps, step_bytes = _latency_terms(llm, w, f_front, strict)
    latency = f_pre / peak + float(np.maximum(steps / peak, step_bytes / bw).sum())
    return w.generated / latency


def fit_tps_constants(llm: LlmConfig, front_flops, anchors=TPS_ANCHORS, generated: int = 30):
    """Solve for (peak TFLOP/s, bandwidth GB/s) from two (V, tokens/sec) anchors.

    Assumes the bandwidth-bound decode regime, which makes latency linear in
    ``1/peak`` and ``1/bandwidth``, then checks the assumption holds at both
    anchors.  ``front_flops(V)`` gives vision plus projector FLOPs.
    """
    rows, rhs = [], []
    for v, tps in anchors:
        w = Workload(llm.prompt_tokens, v, generated)
        f_pre, _, step_bytes = _latency_terms(llm, w, front_flops(v))
        rows.append([f_pre, float(step_bytes.sum())])
        rhs.append(generated / tps)
    inv_peak, inv_bw = np.linalg.solve(np.array(rows), np.array(rhs))
    if inv_peak <= 0 or inv_bw <= 0:
        raise ConfigError("TPS anchors imply a non-positive compute or bandwidth constant")
    peak, bw = 1.0 / inv_peak, 1.0 / inv_bw
    for v, _ in anchors:
        w = Workload(llm.prompt_tokens, v, generated)
        _, steps, step_bytes = _latency_terms(llm, w, front_flops(v))
        if np.any(steps / peak > step_bytes / bw):
            raise ConfigError(f"fitted constants leave decode compute-bound at V={v}")
    return peak / TERA, bw / 1e9


def calibrate_prompt_tokens(llm: LlmConfig, anchors=PREFILL_ANCHORS) -> tuple[float, dict[int, float]]:
    """Least-squares prompt length ``T`` over (V, TFLOPs) prefill anchors.

    Returns ``T`` and the residuals (model minus anchor, TFLOPs) per anchor.
    """
    def loss(t):
        return sum((flops_prefill(llm, Workload(t, v, 0)) / TERA - f) ** 2 for v, f in anchors)

    res = minimize_scalar(loss, bounds=(0.0, 4096.0), method="bounded", options={"xatol": 1e-9})
    t = float(res.x)
    resid = {v: flops_prefill(llm, Workload(t, v, 0)) / TERA - f for v, f in anchors}
    return t, resid


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def cost_report(
    llm: LlmConfig,
    projcfg: ProjectorConfig,
    w: Workload | None = None,
    strict: bool = False,
    with_tps: bool = True,
) -> CostReport:
    v = projcfg.validate().num_queries
    if w is None:
        w = Workload(llm.prompt_tokens, v, img_h=projcfg.img_h, img_w=projcfg.img_w, patch=projcfg.patch)
    elif w.visual_tokens != v:
        raise ConfigError(f"workload has V={w.visual_tokens} but projector config gives V={v}")
    f_vis = flops_vision(w, strict)
    f_proj = flops_projector(projcfg, strict)
    f_pre = flops_prefill(llm, w, strict)
    f_dec = flops_decode(llm, w, strict)
    parts = [f_vis / TERA, f_proj / TERA, f_pre / TERA, f_dec / TERA]
    total = parts[0] + parts[1] + parts[2] + parts[3]
    tps = None
    if with_tps and llm.peak_tflops > 0 and llm.bandwidth_gbs > 0:
        tps = estimate_tps(llm, w, f_vis + f_proj, strict)
    return CostReport(v, *parts, total, tps)
