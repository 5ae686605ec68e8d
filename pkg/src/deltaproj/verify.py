"""Invariant suites behind ``deltaproj verify``.

Each check returns ``(measured, tolerance, passed)``.  Runtimes are kept in a
separate field so the text report stays byte-identical across runs.
"""
from __future__ import annotations

import contextlib
import json
import time
import tracemalloc
import zlib
from dataclasses import dataclass

import numpy as np

from . import blocks, reference
from .blocks import (
    WindowedCrossAttn,
    emhsa_forward,
    emhsa_init,
    ffn_init,
    ffn_refine,
    partition_memory,
    windowed_cross_attention,
)
from .config import ProjectorConfig, config_for_budget, token_count
from .cost import (
    LlmConfig,
    Workload,
    cost_report,
    delta_apply_macs,
    flops_decode,
    flops_prefill,
    flops_projector,
    flops_vision,
    materialized_apply_macs,
    projector_stage_macs,
)
from .delta import DeltaLinear, delta_apply, delta_init, delta_materialize, update_rank
from .errors import ConfigError
from .gradcheck import BLOCK_CASES, GRAD_TOL, check_vjp, end_to_end_errors, tiny_config
from .numerics import (
    MacCounter,
    bilinear_resize,
    bilinear_resize_vjp,
    counting,
    depthwise_conv3x3,
    depthwise_conv3x3_vjp,
    finite_diff_grad,
    gelu_vjp,
    layer_norm,
    layer_norm_vjp,
    matmul,
    matmul_vjp,
    relative_error,
    sinusoidal_pos2d,
    softmax_lastdim,
    softmax_vjp,
)
from .pipeline import Projector, init_params, kv_pathway, synth_features

SUITES = ("numerics", "delta", "attention", "pipeline", "cost")
SWEEP_BUDGETS = (576, 144, 64, 36, 16, 4, 1)


def derived_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per (seed, check name)."""
    return np.random.Generator(np.random.PCG64([seed, zlib.crc32(name.encode())]))


@dataclass(frozen=True)
class CheckResult:
    check_id: str
    passed: bool
    measured: float
    tolerance: float
    wall_ms: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.check_id} measured={self.measured:.6e} tolerance={self.tolerance:.3e}"


@dataclass(frozen=True)
class VerifyReport:
    suite: str
    seed: int
    results: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def text(self) -> str:
        lines = [f"verify suite={self.suite} seed={self.seed}"]
        lines += [r.line() for r in self.results]
        n_fail = sum(not r.passed for r in self.results)
        lines.append(f"{len(self.results) - n_fail}/{len(self.results)} checks passed")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        body = {
            "suite": self.suite,
            "seed": self.seed,
            "passed": self.passed,
            "checks": [
                {"id": r.check_id, "passed": r.passed, "measured": r.measured, "tolerance": r.tolerance}
                for r in self.results
            ],
            "wall_ms": {r.check_id: r.wall_ms for r in self.results},
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"


_REGISTRY: dict[str, list] = {s: [] for s in SUITES}


def check(suite: str, name: str):
    def deco(fn):
        _REGISTRY[suite].append((f"{suite}.{name}", fn))
        return fn

    return deco


def _max_le(values, tol):
    m = float(max(values)) if len(values) else 0.0
    return m, tol, m <= tol


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------

@check("numerics", "matmul_oracle")
def _matmul_oracle(rng, trials=10):
    diffs = []
    for _ in range(trials):
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        diffs.append(np.abs(matmul(a, b) - reference.naive_matmul(a, b)).max())
    return _max_le(diffs, 1e-12)


@check("numerics", "matmul_associativity")
def _matmul_assoc(rng, trials=20):
    diffs = []
    for _ in range(trials):
        m, k, n, p = rng.integers(1, 17, 4)
        a, b, c = (rng.uniform(-1, 1, s) for s in ((m, k), (k, n), (n, p)))
        diffs.append(np.abs(matmul(matmul(a, b), c) - matmul(a, matmul(b, c))).max())
    return _max_le(diffs, 1e-9)


@check("numerics", "softmax_rows_and_shift")
def _softmax(rng, trials=20):
    diffs = []
    for _ in range(trials):
        x = rng.standard_normal((4, int(rng.integers(1, 12)))) * 10
        y = softmax_lastdim(x)
        diffs.append(np.abs(y.sum(-1) - 1).max())
        diffs.append(np.abs(softmax_lastdim(x + rng.normal() * 50) - y).max())
    return _max_le(diffs, 1e-12)


@check("numerics", "layer_norm_stats")
def _ln(rng, trials=20):
    diffs = []
    for _ in range(trials):
        c = int(rng.integers(2, 32))
        y = layer_norm(rng.standard_normal((3, c)) * 4 + 2, np.ones(c), np.zeros(c), 0.0)
        diffs += [np.abs(y.mean(-1)).max(), np.abs(y.var(-1) - 1).max()]
    return _max_le(diffs, 1e-10)


@check("numerics", "conv_oracle")
def _conv(rng, trials=5):
    diffs = []
    for _ in range(trials):
        x = rng.standard_normal((4, 5, 6))
        k = rng.standard_normal((4, 3, 3))
        diffs.append(np.abs(depthwise_conv3x3(x, k, 2) - reference.naive_conv3x3(x, k)).max())
    return _max_le(diffs, 1e-12)


@check("numerics", "resize_constant_roundtrip")
def _resize(rng, trials=10):
    diffs = []
    for _ in range(trials):
        h, w = rng.integers(1, 25, 2)
        oh, ow = rng.integers(1, 25, 2)
        x = np.full((2, h, w), rng.normal())
        back = bilinear_resize(bilinear_resize(x, oh, ow), h, w)
        diffs.append(np.abs(back - x).max())
    return _max_le(diffs, 0.0)


@check("numerics", "pos2d_distinct_bounded")
def _pos2d(rng):
    t = sinusoidal_pos2d(12, 12, 64)
    distinct = len(np.unique(t, axis=0)) == t.shape[0]
    bound = float(np.abs(t).max())
    return bound, 1.0, distinct and bound <= 1.0


def _ln_input_vjp(gamma, beta):
    def fn(t):
        y, back = layer_norm_vjp(t, gamma, beta)
        return y, lambda g: back(g)[0]

    return fn


def _first_grad(vjp, *rest):
    def fn(t):
        y, back = vjp(t, *rest)
        return y, lambda g: back(g)[0]

    return fn


def _elementwise_grad_errors(rng, seeds):
    errs = []
    for _ in range(seeds):
        x = rng.standard_normal((3, 5))
        other = rng.standard_normal((5, 4))
        grid = rng.standard_normal((2, 5, 4))
        cases = [
            (softmax_vjp, x),
            (gelu_vjp, x),
            (_ln_input_vjp(rng.standard_normal(5), rng.standard_normal(5)), x),
            (_first_grad(matmul_vjp, other), x),
            (_first_grad(depthwise_conv3x3_vjp, rng.standard_normal((2, 3, 3))), grid),
            (lambda t: bilinear_resize_vjp(t, 3, 7), grid),
        ]
        for fn, inp in cases:
            y, back = fn(inp)
            w = rng.standard_normal(y.shape)
            num = finite_diff_grad(lambda t: float(np.sum(fn(t)[0] * w)), inp)
            errs.append(relative_error(back(w), num))
    return errs


@check("numerics", "primitive_gradients")
def _prim_grads(rng, seeds=20):
    return _max_le(_elementwise_grad_errors(rng, seeds), GRAD_TOL)


@check("numerics", "finite_diff_quadratic")
def _fd_quad(rng):
    g = finite_diff_grad(lambda t: float(np.sum(t * t)), np.array([1.0, 2.0]))
    return _max_le(np.abs(g - [2.0, 4.0]), 1e-6)


# ---------------------------------------------------------------------------
# delta
# ---------------------------------------------------------------------------

def _random_delta(rng):
    d_out, d_in = (int(v) for v in rng.integers(3, 12, 2))
    r = int(rng.integers(1, min(d_out, d_in)))
    return DeltaLinear(rng.standard_normal((d_out, d_in)), rng.standard_normal((d_out, r)),
                       rng.standard_normal((d_in, r)))


@check("delta", "factored_vs_materialized")
def _delta_equiv(rng, trials=100):
    diffs = []
    for _ in range(trials):
        layer = _random_delta(rng)
        x = rng.standard_normal((4, layer.d_in))
        diffs.append(np.abs(delta_apply(layer, x) - x @ delta_materialize(layer).T).max())
    return _max_le(diffs, 1e-10)


@check("delta", "update_rank_bound")
def _delta_rank(rng, trials=100):
    slack = [update_rank(layer) - layer.rank for layer in (_random_delta(rng) for _ in range(trials))]
    return _max_le(slack, 0)


@check("delta", "zero_delta_init_exact")
def _delta_zero(rng, trials=10):
    diffs = []
    for _ in range(trials):
        layer = delta_init(8, 6, 3, rng)
        x = rng.standard_normal((5, 6))
        diffs.append(np.abs(delta_apply(layer, x) - x @ layer.base.T).max())
    return _max_le(diffs, 0.0)


@check("delta", "linearity")
def _delta_lin(rng, trials=20):
    diffs = []
    for _ in range(trials):
        layer = _random_delta(rng)
        x, y = rng.standard_normal((2, 3, layer.d_in))
        a, b = rng.normal(size=2)
        diffs.append(np.abs(delta_apply(layer, a * x + b * y)
                            - a * delta_apply(layer, x) - b * delta_apply(layer, y)).max())
    return _max_le(diffs, 1e-10)


@check("delta", "factored_macs_below_materialized")
def _delta_macs(rng):
    bad = 0
    for d_out in range(2, 20):
        for d_in in range(2, 20):
            for r in range(1, min(d_out, d_in)):
                if r < d_out * d_in / (d_out + d_in):
                    counter = MacCounter()
                    layer = DeltaLinear(np.zeros((d_out, d_in)), np.zeros((d_out, r)), np.zeros((d_in, r)))
                    with counting(counter):
                        delta_apply(layer, np.zeros((1, d_in)))
                    bad += counter.total != delta_apply_macs(1, d_in, d_out, r)
                    bad += not counter.total < materialized_apply_macs(1, d_in, d_out, r)
    return float(bad), 0.0, bad == 0


@check("delta", "gradients")
def _delta_grads(rng, seeds=10):
    errs = []
    for _ in range(seeds):
        fn, arrays = BLOCK_CASES["delta_apply"](rng)
        errs += list(check_vjp(fn, arrays, rng).values())
    return _max_le(errs, GRAD_TOL)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

@check("attention", "emhsa_vs_full_mhsa")
def _emhsa_oracle(rng, trials=50):
    diffs = []
    for _ in range(trials):
        gh, gw = (int(v) for v in rng.integers(1, 9, 2))
        heads = int(rng.choice([1, 2, 4]))
        c = heads * int(rng.integers(1, 5))
        blk = emhsa_init(c, heads, rng)
        x = rng.standard_normal((gh * gw, c))
        ref = reference.full_mhsa(x, blk.wq, blk.wk, blk.wv, blk.wo, blk.ln_gamma, blk.ln_beta, heads, blk.eps)
        diffs.append(np.abs(emhsa_forward(blk, x, gh, gw) - ref).max())
    return _max_le(diffs, 1e-12)


@check("attention", "single_window_vs_global")
def _window_oracle(rng, trials=50):
    diffs = []
    for _ in range(trials):
        g = int(rng.integers(1, 9))
        heads = int(rng.choice([1, 2]))
        d = heads * int(rng.integers(1, 5))
        m = int(rng.integers(1, 10))
        q, k, v = rng.standard_normal((g * g, d)), rng.standard_normal((m, d)), rng.standard_normal((m, d))
        parts, _ = partition_memory(m, g, g, g)
        out = windowed_cross_attention(WindowedCrossAttn(g, heads), q, k, v, g, g, parts)
        diffs.append(np.abs(out - reference.global_cross_attention(q, k, v, heads)).max())
    return _max_le(diffs, 1e-12)


@check("attention", "attention_row_stochastic")
def _row_stochastic(rng, trials=20):
    diffs = []
    for _ in range(trials):
        g = 2 * int(rng.integers(1, 5))
        blk = emhsa_init(8, 2, rng, reduce=2)
        _, attn = emhsa_forward(blk, rng.standard_normal((g * g, 8)), g, g, return_attn=True)
        diffs.append(np.abs(attn.sum(-1) - 1).max())
    return _max_le(diffs, 1e-12)


@check("attention", "emhsa_reduction_mac_law")
def _emhsa_macs(rng):
    bad = 0
    c, g = 8, 12
    x = rng.standard_normal((g * g, c))
    counts = {}
    for s in (1, 2, 3, 4, 6):
        counter = MacCounter()
        with counting(counter):
            emhsa_forward(emhsa_init(c, 2, rng, reduce=s), x, g, g)
        counts[s] = counter.total
    n = g * g
    for s, macs in counts.items():
        bad += (counts[1] - macs) != 2 * c * (n * n - n * (n // (s * s)))
    return float(bad), 0.0, bad == 0


@check("attention", "ffn_permutation_equivariance")
def _ffn_perm(rng, trials=10):
    diffs = []
    for _ in range(trials):
        blk = ffn_init(6, rng, 12)
        t = rng.standard_normal((7, 6))
        p = rng.permutation(7)
        diffs.append(np.abs(ffn_refine(blk, t[p]) - ffn_refine(blk, t)[p]).max())
    return _max_le(diffs, 0.0)


@check("attention", "block_gradients")
def _block_grads(rng, seeds=10):
    errs = []
    for name in ("emhsa", "emhsa_reduced", "mhca", "ffn", "cross_attn"):
        for _ in range(seeds):
            fn, arrays = BLOCK_CASES[name](rng)
            errs += list(check_vjp(fn, arrays, rng).values())
    return _max_le(errs, GRAD_TOL)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@check("pipeline", "token_count_sweep")
def _token_sweep(rng):
    base = ProjectorConfig()
    got = [token_count(base.replace(scale=s, window=1)) for s in (1, 2, 3, 4, 6, 12, 24)]
    bad = sum(a != b for a, b in zip(got, SWEEP_BUDGETS))
    return float(bad), 0.0, bad == 0


def _small_desk(**kw) -> ProjectorConfig:
    dims = dict(feat_dim=16, embed_dim=16, heads=2, rank=4, mem_tokens=8, ffn_hidden=64)
    return ProjectorConfig(**{**dims, **kw})


@check("pipeline", "sweep_shapes_finite")
def _sweep_shapes(rng):
    bad = 0
    for v in SWEEP_BUDGETS:
        cfg = config_for_budget(_small_desk(), v)
        feats, _ = synth_features(cfg, rng)
        out = Projector(cfg).project(feats, trace=False)
        bad += out.tokens.shape != (v, cfg.embed_dim) or not np.all(np.isfinite(out.tokens))
    return float(bad), 0.0, bad == 0


@check("pipeline", "bitwise_determinism")
def _determinism(rng):
    cfg = _small_desk(seed=int(rng.integers(2**31)))
    feats, _ = synth_features(cfg, rng)
    a = Projector(cfg).project(feats).tokens
    b = Projector(cfg).project(feats).tokens
    return float(np.abs(a - b).max()), 0.0, a.tobytes() == b.tobytes()


ABLATION_KINDS = {"use_emhsa": ("emhsa",), "use_deltaproj": ("deltaproj",), "use_tb": ("ntb.",)}


@check("pipeline", "ablation_trace_zero")
def _ablation(rng):
    cfg0 = _small_desk()
    feats, _ = synth_features(cfg0, rng)
    bad = 0
    for flag in ABLATION_KINDS:
        cfg = cfg0.replace(**{flag: False})
        trace = Projector(cfg).project(feats).stage_trace
        if flag == "use_tb":
            hit = [s for s in trace if s["stage"].startswith("ntb.")]
        else:
            hit = [s for s in trace if s["kind"] == ABLATION_KINDS[flag][0]]
        bad += not hit or any(s["macs"] for s in hit)
    return float(bad), 0.0, bad == 0


@check("pipeline", "end_to_end_gradient")
def _e2e(rng, seeds=10):
    errs = []
    for i in range(seeds):
        cfg = tiny_config(seed=int(rng.integers(2**31)), ntb_depth=1 + i % 2)
        errs += list(end_to_end_errors(cfg, rng, max_coords=3).values())
    return _max_le(errs, GRAD_TOL)


@check("pipeline", "trace_matches_formula")
def _trace_formula(rng):
    cfg = ProjectorConfig.preset("desk")
    feats, _ = synth_features(cfg, rng)
    out = Projector(cfg).project(feats)
    traced = {s["stage"]: s["macs"] for s in out.stage_trace}
    exact = traced == projector_stage_macs(cfg, strict=True)
    gap = abs(2 * sum(traced.values()) / flops_projector(cfg) - 1)
    return gap, 0.05, exact and gap <= 0.05


@check("pipeline", "kv_memory_linear")
def _kv_memory(rng):
    worst = 0.0
    for mem in (4, 16, 64):
        cfg = _small_desk(mem_tokens=mem).replace(embed_dim=32)
        fam = init_params(cfg).family
        summary = rng.standard_normal((mem, cfg.feat_dim))
        tracemalloc.start()
        try:
            kv_pathway(cfg, fam, summary)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        worst = max(worst, (peak - 4096) / (mem * cfg.embed_dim * 8))
    return worst, 8.0, worst <= 8.0


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------

def _sweep_reports(strict=False):
    llm = LlmConfig.preset("llm-7b")
    base = ProjectorConfig.preset("full")
    return llm, [cost_report(llm, config_for_budget(base, v), strict=strict) for v in SWEEP_BUDGETS]


@check("cost", "projector_linear_in_V")
def _proj_linear(rng):
    base = ProjectorConfig.preset("full")
    worst = 0.0
    for lo, hi in ((144, 576), (36, 144), (16, 64), (4, 16), (1, 4)):
        f_lo = flops_projector(config_for_budget(base, lo))
        f_hi = flops_projector(config_for_budget(base, hi))
        worst = max(worst, abs(f_hi - 4 * f_lo))
    return worst, 0.0, worst == 0.0


@check("cost", "prefill_convex_increasing")
def _prefill_convex(rng):
    llm = LlmConfig.preset("llm-7b")
    vs = np.arange(0, 600)
    f = np.array([flops_prefill(llm, Workload(llm.prompt_tokens, int(v), 0)) for v in vs])
    d1 = np.diff(f)
    d2 = np.diff(d1)
    ok = np.all(d1 > 0) and np.all(d2 > -1e-6 * np.abs(f[2:]).max())
    return float(d1.min()), 0.0, bool(ok)


@check("cost", "report_additive")
def _additive(rng):
    _, reps = _sweep_reports()
    bad = sum(r.f_total != r.f_vision + r.f_proj + r.f_prefill + r.f_decode for r in reps)
    return float(bad), 0.0, bad == 0


@check("cost", "decode_near_constant")
def _decode(rng):
    _, reps = _sweep_reports()
    dec = [r.f_decode for r in reps]
    spread = (max(dec) - min(dec)) / min(dec)
    return spread, 0.15, spread < 0.15


@check("cost", "vision_independent_of_scale")
def _vision(rng):
    base = ProjectorConfig.preset("full")
    vals = {flops_vision(Workload(0, config_for_budget(base, v).num_queries)) for v in SWEEP_BUDGETS}
    return float(len(vals) - 1), 0.0, len(vals) == 1


@check("cost", "tps_monotone")
def _tps(rng):
    _, reps = _sweep_reports()
    tps = [r.tps_est for r in reps]
    steps = np.diff(tps)
    return float(steps.min()), 0.0, bool(np.all(steps >= 0))


@check("cost", "decode_zero_steps")
def _decode_zero(rng):
    llm = LlmConfig.preset("llm-7b")
    f = flops_decode(llm, Workload(llm.prompt_tokens, 144, generated=0))
    return f, 0.0, f == 0.0


# ---------------------------------------------------------------------------

def list_checks(suite: str) -> list[str]:
    return [cid for cid, _ in _checks_for(suite)]


def _checks_for(suite: str):
    if suite == "all":
        return [item for s in SUITES for item in _REGISTRY[s]]
    if suite not in _REGISTRY:
        raise ConfigError(f"unknown suite {suite!r}; choose from {', '.join(SUITES + ('all',))}")
    return list(_REGISTRY[suite])


def run_check(check_id: str, seed: int) -> CheckResult:
    fn = dict(item for s in SUITES for item in _REGISTRY[s])[check_id]
    return _run(check_id, fn, seed)


def _run(cid, fn, seed) -> CheckResult:
    t0 = time.perf_counter()
    try:
        measured, tol, ok = fn(derived_rng(seed, cid))
    except Exception as exc:  # a crashing check is a failing check
        measured, tol, ok = float("nan"), float("nan"), False
        cid = f"{cid} ({type(exc).__name__}: {exc})"
    ms = (time.perf_counter() - t0) * 1e3
    return CheckResult(cid, bool(ok), float(measured), float(tol), round(ms, 3))


def run_suite(suite: str, seed: int) -> VerifyReport:
    results = tuple(_run(cid, fn, seed) for cid, fn in _checks_for(suite))
    return VerifyReport(suite, seed, results)


@contextlib.contextmanager
def with_attention_hook(hook):
    """Install ``blocks.debug_attention_hook`` for the duration (mutation testing)."""
    prev = blocks.debug_attention_hook
    blocks.debug_attention_hook = hook
    try:
        yield
    finally:
        blocks.debug_attention_hook = prev
