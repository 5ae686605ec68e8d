import dataclasses
import tracemalloc

import numpy as np
import pytest

from deltaproj.config import ProjectorConfig, config_for_budget, token_count
from deltaproj.cost import projector_stage_macs
from deltaproj.delta import delta_materialize
from deltaproj.errors import ConfigError, DimensionError, FormatError, NumericError, StateError
from deltaproj.numerics import bilinear_resize, sinusoidal_pos2d
from deltaproj.pipeline import (
    Projector,
    VisionFeatures,
    build_queries,
    init_params,
    kv_pathway,
    randomize_deltas,
    synth_features,
    trace_macs,
)

SWEEP = (576, 144, 64, 36, 16, 4, 1)


class TestTokenCount:
    @pytest.mark.parametrize("scale,expected", [(1, 576), (2, 144), (3, 64), (4, 36), (6, 16), (12, 4), (24, 1)])
    def test_sweep(self, desk_cfg, scale, expected):
        cfg = desk_cfg.replace(scale=scale, window=1)
        assert token_count(cfg) == expected

    def test_rectangular(self):
        cfg = ProjectorConfig(img_h=336, img_w=168, scale=2, window=3)
        assert token_count(cfg) == 72

    @pytest.mark.parametrize("changes,fragment", [
        ({"img_h": 330}, "patch"),
        ({"scale": 5}, "scale 5"),
        ({"scale": 2, "window": 5}, "window 5"),
        ({"scale": 0}, "scale >= 1"),
    ])
    def test_rejects(self, desk_cfg, changes, fragment):
        with pytest.raises(ConfigError, match=fragment):
            token_count(desk_cfg.replace(**changes))

    def test_budget_unreachable(self, desk_cfg):
        with pytest.raises(ConfigError, match="100"):
            config_for_budget(desk_cfg, 100)

    @pytest.mark.parametrize("budget", SWEEP)
    def test_budget_roundtrip(self, desk_cfg, budget):
        assert token_count(config_for_budget(desk_cfg, budget)) == budget


class TestQueries:
    def test_identity_path(self, small_cfg, rng):
        cfg = small_cfg.replace(scale=1, window=4, refine=(), add_pos2d=False)
        feats, _ = synth_features(cfg, rng)
        assert np.array_equal(build_queries(cfg, feats), feats.patch_grid)

    def test_interpolation_only(self, small_cfg, rng):
        cfg = small_cfg.replace(refine=(), add_pos2d=False)
        feats, _ = synth_features(cfg, rng)
        grid = feats.patch_grid.T.reshape(cfg.feat_dim, 24, 24)
        ref = bilinear_resize(grid, 12, 12).reshape(cfg.feat_dim, -1).T
        assert np.abs(build_queries(cfg, feats) - ref).max() < 1e-12

    def test_constant_field_with_positions(self, small_cfg):
        cfg = small_cfg.replace(refine=())
        z = np.full((576, cfg.feat_dim), 0.25)
        feats = VisionFeatures(z, 24, 24, np.zeros((cfg.mem_tokens, cfg.feat_dim)))
        q = build_queries(cfg, feats)
        assert np.abs(q - 0.25 - sinusoidal_pos2d(12, 12, cfg.feat_dim)).max() < 1e-14


class TestProject:
    @pytest.fixture
    def run(self, small_cfg, rng):
        def _run(cfg=small_cfg, params=None):
            feats, _ = synth_features(cfg, np.random.default_rng(3))
            return Projector(cfg, params).project(feats)
        return _run

    def test_default_budget(self, run, small_cfg):
        out = run()
        assert out.tokens.shape == (144, small_cfg.embed_dim) and out.token_count == 144
        assert np.all(np.isfinite(out.tokens))

    def test_single_token(self, run, small_cfg):
        out = run(config_for_budget(small_cfg, 1))
        assert out.tokens.shape == (1, small_cfg.embed_dim) and out.window == 1

    def test_bitwise_deterministic(self, run):
        a, b = run(), run()
        assert a.tokens.tobytes() == b.tokens.tobytes()
        assert a.stage_trace == b.stage_trace

    def test_seed_changes_output(self, run, small_cfg):
        assert not np.array_equal(run().tokens, run(small_cfg.replace(seed=1)).tokens)

    def test_trace_names(self, run):
        names = [s["stage"] for s in run().stage_trace]
        assert names == [
            "interp", "refine.emhsa", "refine.mhca", "proj.q.base", "proj.q.delta",
            "ntb.0.emhsa", "ntb.0.mhca", "ntb.0.ffn", "ntb.1.emhsa", "ntb.1.mhca", "ntb.1.ffn",
            "proj.k.base", "proj.k.delta", "proj.v.base", "proj.v.delta", "cross_attn", "ffn",
        ]

    def test_trace_equals_stage_formula(self, run, small_cfg):
        out = run()
        counted = {s["stage"]: s["macs"] for s in out.stage_trace}
        assert counted == projector_stage_macs(small_cfg, strict=True)
        assert trace_macs(out) == sum(counted.values())

    @pytest.mark.parametrize("flag,zeroed", [
        ("use_emhsa", ["refine.emhsa", "ntb.0.emhsa", "ntb.1.emhsa"]),
        ("use_deltaproj", ["proj.q.delta", "proj.k.delta", "proj.v.delta"]),
        ("use_tb", [f"ntb.{i}.{s}" for i in range(2) for s in ("emhsa", "mhca", "ffn")]),
    ])
    def test_ablation_zeroes_stage(self, run, small_cfg, flag, zeroed):
        cfg = small_cfg.replace(**{flag: False})
        params = randomize_deltas(init_params(small_cfg), np.random.default_rng(0))
        trace = {s["stage"]: s["macs"] for s in run(cfg, params).stage_trace}
        full = {s["stage"]: s["macs"] for s in run(small_cfg, params).stage_trace}
        assert set(trace) == set(full)
        for name in zeroed:
            assert trace[name] == 0 < full[name]
        assert all(trace[n] == full[n] for n in full if n not in zeroed)

    def test_ablation_changes_tokens(self, run, small_cfg):
        # two keys per window, so the query path reaches the output
        cfg = small_cfg.replace(mem_tokens=32)
        params = randomize_deltas(init_params(cfg), np.random.default_rng(0))
        full = run(cfg, params).tokens
        for flag in ("use_emhsa", "use_deltaproj", "use_tb"):
            assert not np.allclose(run(cfg.replace(**{flag: False}), params).tokens, full)

    def test_one_key_per_window_ignores_queries(self, run, small_cfg):
        # 16 windows and 16 memory tokens: the softmax over a single key is 1
        cfg = small_cfg.replace(mem_tokens=16)
        a = run(cfg).tokens
        b = run(cfg.replace(use_tb=False)).tokens
        assert np.array_equal(a, b)

    def test_zero_delta_ablation_is_noop(self, run, small_cfg):
        # v factors start at zero, so dropping the update must not move the output
        a = run(small_cfg).tokens
        b = run(small_cfg.replace(use_deltaproj=False)).tokens
        assert np.abs(a - b).max() < 1e-12

    def test_shape_mismatch(self, small_cfg, rng):
        feats, _ = synth_features(small_cfg, rng)
        with pytest.raises(DimensionError, match="24x24"):
            Projector(small_cfg.replace(img_h=168, img_w=168)).project(feats)

    def test_non_finite_names_stage(self, small_cfg, rng):
        feats, _ = synth_features(small_cfg, rng)
        params = init_params(small_cfg)
        z = feats.patch_grid.copy()
        z[5, 3] = np.nan
        with pytest.raises(NumericError, match="interp|refine"):
            Projector(small_cfg).project(dataclasses.replace(feats, patch_grid=z))

    def test_sidecar_fields(self, run):
        meta = run().sidecar()
        assert {"version", "config_hash", "V", "d_v", "ablation_flags", "window",
                "memory_partition", "stage_trace", "wall_ms"} <= set(meta)
        assert meta["memory_partition"] == "round_robin"

    def test_positions_partition(self, small_cfg, rng):
        # one memory token centred in each of the 16 windows (3x3 queries = 6x6 patches)
        centres = np.array([[6 * i + 3, 6 * j + 3] for i in range(4) for j in range(4)], dtype=float)
        cfg = small_cfg.replace(mem_tokens=16)
        feats16, _ = synth_features(cfg, rng)
        out = Projector(cfg).project(dataclasses.replace(feats16, memory_pos=centres))
        assert out.partition_mode == "positions"


class TestKvPathway:
    def test_matches_materialized(self, small_cfg, rng):
        params = randomize_deltas(init_params(small_cfg), rng)
        s = rng.standard_normal((small_cfg.mem_tokens, small_cfg.feat_dim))
        k, v = kv_pathway(small_cfg, params.family, s)
        assert np.abs(k - s @ delta_materialize(params.family.layer("k")).T).max() < 1e-10
        assert np.abs(v - s @ delta_materialize(params.family.layer("v")).T).max() < 1e-10

    def test_equal_factors_give_equal_kv(self, small_cfg, rng):
        fam = init_params(small_cfg).family
        fam = dataclasses.replace(fam, deltas={**fam.deltas, "v": fam.deltas["k"]})
        k, v = kv_pathway(small_cfg, fam, rng.standard_normal((small_cfg.mem_tokens, small_cfg.feat_dim)))
        assert np.array_equal(k, v)

    def test_single_memory_token(self, small_cfg, rng):
        cfg = small_cfg.replace(mem_tokens=1)
        feats, _ = synth_features(cfg, rng)
        out = Projector(cfg).project(feats)
        assert out.tokens.shape == (144, cfg.embed_dim)

    def test_row_count_check(self, small_cfg, rng):
        with pytest.raises(DimensionError):
            kv_pathway(small_cfg, init_params(small_cfg).family, np.zeros((3, small_cfg.feat_dim)))

    def test_memory_linear_in_summary_length(self, small_cfg, rng):
        peaks = []
        for mem in (64, 256):
            cfg = small_cfg.replace(mem_tokens=mem)
            fam = init_params(cfg).family
            s = rng.standard_normal((mem, cfg.feat_dim))
            tracemalloc.start()
            try:
                kv_pathway(cfg, fam, s)
                peaks.append(tracemalloc.get_traced_memory()[1])
            finally:
                tracemalloc.stop()
        assert peaks[1] < 4 * peaks[0] * 1.25


class TestBackward:
    def test_requires_forward(self, small_cfg):
        with pytest.raises(StateError):
            Projector(small_cfg).backward(np.zeros((144, 16)))

    def test_consumed_once(self, tiny_cfg, rng):
        proj = Projector(tiny_cfg)
        feats, _ = synth_features(tiny_cfg, rng)
        proj.project(feats, keep_activations=True)
        proj.backward(np.ones((36, 16)))
        with pytest.raises(StateError):
            proj.backward(np.ones((36, 16)))

    def test_zero_upstream(self, tiny_cfg, rng):
        proj = Projector(tiny_cfg)
        feats, _ = synth_features(tiny_cfg, rng)
        proj.project(feats, keep_activations=True)
        g = proj.backward(np.zeros((36, 16)))
        assert not np.any(g["patch_grid"]) and not np.any(g["summary"])

    def test_linear_in_upstream(self, tiny_cfg, rng):
        proj = Projector(tiny_cfg)
        feats, _ = synth_features(tiny_cfg, rng)
        up = rng.standard_normal((36, 16))
        proj.project(feats, keep_activations=True)
        g1 = proj.backward(up)["patch_grid"]
        proj.project(feats, keep_activations=True)
        g3 = proj.backward(3 * up)["patch_grid"]
        assert np.allclose(g3, 3 * g1, rtol=1e-12, atol=1e-15)

    def test_shape_check(self, tiny_cfg, rng):
        proj = Projector(tiny_cfg)
        proj.project(synth_features(tiny_cfg, rng)[0], keep_activations=True)
        with pytest.raises(DimensionError):
            proj.backward(np.zeros((35, 16)))

    def test_ablated_blocks_get_zero_grads(self, tiny_cfg, rng):
        cfg = tiny_cfg.replace(use_tb=False)
        proj = Projector(cfg)
        proj.project(synth_features(cfg, rng)[0], keep_activations=True)
        g = proj.backward(rng.standard_normal((36, 16)))
        for layer in g["params"]["ntb"]:
            assert all(not np.any(a) for blk in layer.values() for a in blk.values())


class TestFixtures:
    def test_summary_is_group_mean(self, small_cfg, rng):
        feats, groups = synth_features(small_cfg, rng)
        for g in range(small_cfg.mem_tokens):
            assert np.allclose(feats.summary[g], feats.patch_grid[groups == g].mean(0), atol=0)
        assert np.bincount(groups).min() >= 1

    def test_too_many_groups(self, rng):
        cfg = ProjectorConfig(img_h=28, img_w=28, scale=1, window=1, mem_tokens=5,
                              feat_dim=8, embed_dim=8, heads=2, rank=2)
        with pytest.raises(ConfigError):
            synth_features(cfg, rng)

    def test_save_load_roundtrip(self, small_cfg, rng, tmp_path):
        feats, _ = synth_features(small_cfg, rng)
        feats.save(tmp_path / "fx")
        back = VisionFeatures.load(tmp_path / "fx")
        assert np.array_equal(back.patch_grid, feats.patch_grid) and (back.grid_h, back.grid_w) == (24, 24)
        assert np.array_equal(back.summary, feats.summary)

    def test_load_missing(self, tmp_path):
        with pytest.raises(FormatError):
            VisionFeatures.load(tmp_path / "nope")
