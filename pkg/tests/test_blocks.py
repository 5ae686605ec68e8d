import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltaproj import blocks
from deltaproj.blocks import (
    EmhsaBlock,
    FfnBlock,
    MhcaBlock,
    NtbLayer,
    WindowedCrossAttn,
    emhsa_forward,
    emhsa_init,
    ffn_init,
    ffn_refine,
    mhca_forward,
    mhca_init,
    ntb_forward,
    ntb_init,
    ntb_vjp,
    partition_memory,
    window_rows,
    windowed_cross_attention,
)
from deltaproj.errors import ConfigError, DimensionError
from deltaproj.numerics import bilinear_resize, counting, gelu, make_rng
from deltaproj.reference import mhca_formula

from oracles import mhsa, six_loop_conv, softmax


class TestMhca:
    def test_zero_params_is_residual(self, rng):
        c = 4
        blk = MhcaBlock(np.zeros((c, 3, 3)), np.zeros((c, c)), np.ones(c), np.zeros(c), heads=2)
        x = rng.standard_normal((c, 5, 5))
        assert np.array_equal(mhca_forward(blk, x), x)

    def test_grouping_is_bookkeeping(self, rng):
        b1 = mhca_init(4, 1, rng)
        b4 = MhcaBlock(b1.kernels, b1.merge, b1.ln_gamma, b1.ln_beta, heads=4)
        x = rng.standard_normal((4, 3, 3))
        assert np.array_equal(mhca_forward(b1, x), mhca_forward(b4, x))

    def test_composition_oracle(self, rng):
        blk = mhca_init(8, 2, rng)
        blk = MhcaBlock(blk.kernels, blk.merge, rng.standard_normal(8), rng.standard_normal(8), 2)
        x = rng.standard_normal((8, 6, 6))
        conv = six_loop_conv(x, blk.kernels).reshape(8, 36).T
        mu = conv.mean(1, keepdims=True)
        ln = (conv - mu) / np.sqrt(conv.var(1, keepdims=True) + 1e-5) * blk.ln_gamma + blk.ln_beta
        ref = x + (np.maximum(ln, 0) @ blk.merge.T).T.reshape(8, 6, 6)
        assert np.abs(mhca_forward(blk, x) - ref).max() < 1e-10
        assert np.abs(mhca_forward(blk, x) - mhca_formula(x, blk.kernels, blk.merge, blk.ln_gamma,
                                                          blk.ln_beta, 1e-5)).max() < 1e-10

    def test_indivisible_heads(self, rng):
        with pytest.raises(ConfigError):
            mhca_init(6, 4, rng)

    def test_cost_linear_in_area(self, rng):
        blk = mhca_init(4, 2, rng)
        macs = []
        for side in (4, 8):
            with counting() as c:
                mhca_forward(blk, rng.standard_normal((4, side, side)))
            macs.append(c.total)
        assert macs[1] == 4 * macs[0]


class TestEmhsa:
    def test_single_token(self, rng):
        blk = emhsa_init(4, 2, rng)
        x = rng.standard_normal((1, 4))
        y, attn = emhsa_forward(blk, x, 1, 1, return_attn=True)
        assert np.array_equal(attn, np.ones((2, 1, 1)))
        mu = x.mean()
        xn = (x - mu) / np.sqrt(x.var() + 1e-5)
        assert np.allclose(y, x + xn @ blk.wv.T @ blk.wo.T, atol=1e-14)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_full_mhsa(self, seed):
        r = np.random.default_rng(seed)
        gh, gw = r.integers(1, 9, 2)
        heads = int(r.choice([1, 2, 4]))
        c = heads * int(r.integers(1, 5))
        blk = emhsa_init(c, heads, r)
        blk = EmhsaBlock(blk.wq, blk.wk, blk.wv, blk.wo, r.standard_normal(c), r.standard_normal(c), heads)
        x = r.standard_normal((gh * gw, c))
        ref = mhsa(x, blk.wq, blk.wk, blk.wv, blk.wo, blk.ln_gamma, blk.ln_beta, heads)
        assert np.abs(emhsa_forward(blk, x, gh, gw) - ref).max() < 1e-12

    def test_reduced_shapes(self, rng):
        blk = emhsa_init(8, 2, rng, reduce=2)
        _, attn = emhsa_forward(blk, rng.standard_normal((144, 8)), 12, 12, return_attn=True)
        assert attn.shape == (2, 144, 36)

    def test_reduced_matches_downsampled_oracle(self, rng):
        blk = emhsa_init(8, 2, rng, reduce=2)
        x = rng.standard_normal((36, 8))

        def down(t):
            return bilinear_resize(t.T.reshape(8, 6, 6), 3, 3).reshape(8, 9).T

        ref = mhsa(x, blk.wq, blk.wk, blk.wv, blk.wo, blk.ln_gamma, blk.ln_beta, 2, kv_tokens=down)
        assert np.abs(emhsa_forward(blk, x, 6, 6) - ref).max() < 1e-12

    def test_non_divisible_grid(self, rng):
        blk = emhsa_init(4, 1, rng, reduce=2)
        with pytest.raises(ConfigError, match="5x4"):
            emhsa_forward(blk, rng.standard_normal((20, 4)), 5, 4)

    def test_token_grid_mismatch(self, rng):
        with pytest.raises(DimensionError):
            emhsa_forward(emhsa_init(4, 1, rng), rng.standard_normal((5, 4)), 2, 2)

    @pytest.mark.parametrize("s", [2, 3, 4, 6])
    def test_reduction_flop_law(self, rng, s):
        c, g = 8, 12
        n = g * g
        x = rng.standard_normal((n, c))
        counts = []
        for red in (1, s):
            with counting() as cnt:
                emhsa_forward(emhsa_init(c, 2, make_rng(0), red), x, g, g)
            counts.append(cnt.total)
        # the QK^T and attn.V products shrink from n*n to n*(n/s^2); nothing else changes
        assert counts[0] - counts[1] == 2 * c * (n * n - n * (n // s**2))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3]))
    def test_rows_stochastic(self, seed, red):
        r = np.random.default_rng(seed)
        blk = emhsa_init(6, 3, r, red)
        _, attn = emhsa_forward(blk, r.standard_normal((36, 6)) * 3, 6, 6, return_attn=True)
        assert np.abs(attn.sum(-1) - 1).max() < 1e-12


def global_oracle(q, k, v, heads):
    hd = q.shape[1] // heads
    out = np.zeros_like(q)
    for h in range(heads):
        s = slice(h * hd, (h + 1) * hd)
        out[:, s] = softmax(q[:, s] @ k[:, s].T / np.sqrt(hd)) @ v[:, s]
    return out


class TestWindowedCrossAttention:
    @pytest.mark.parametrize("seed", range(50))
    def test_single_window_is_global(self, seed):
        r = np.random.default_rng(seed)
        g = int(r.integers(1, 9))
        heads = int(r.choice([1, 2]))
        d = heads * int(r.integers(1, 5))
        m = int(r.integers(1, 10))
        q, k, v = r.standard_normal((g * g, d)), r.standard_normal((m, d)), r.standard_normal((m, d))
        parts, _ = partition_memory(m, g, g, g)
        out = windowed_cross_attention(WindowedCrossAttn(g, heads), q, k, v, g, g, parts)
        assert np.abs(out - global_oracle(q, k, v, heads)).max() < 1e-12

    def test_single_key_broadcasts_value(self, rng):
        q = rng.standard_normal((16, 4))
        k, v = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        parts = [np.array([i]) for i in range(4)]
        out = windowed_cross_attention(WindowedCrossAttn(2), q, k, v, 4, 4, parts)
        for rows, p in zip(window_rows(4, 4, 2), parts):
            assert np.allclose(out[rows], v[p[0]], atol=1e-15)

    def test_permuting_memory_within_window(self, rng):
        q, k, v = rng.standard_normal((16, 4)), rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
        parts = [np.array([0, 1]), np.array([2, 3]), np.array([4, 5, 6]), np.array([7])]
        base = windowed_cross_attention(WindowedCrossAttn(2), q, k, v, 4, 4, parts)
        swapped = list(parts)
        swapped[2] = np.array([6, 4, 5])
        out = windowed_cross_attention(WindowedCrossAttn(2), q, k, v, 4, 4, swapped)
        assert np.allclose(out, base, atol=1e-15)

    def test_reassembly_is_order_preserving(self):
        rows = window_rows(4, 4, 2)
        assert [list(r) for r in rows[:2]] == [[0, 1, 4, 5], [2, 3, 6, 7]]
        assert sorted(np.concatenate(rows)) == list(range(16))

    def test_non_tiling_window(self):
        with pytest.raises(ConfigError):
            window_rows(6, 6, 4)

    def test_partition_count_mismatch(self, rng):
        with pytest.raises(DimensionError):
            windowed_cross_attention(WindowedCrossAttn(2), rng.standard_normal((16, 4)), np.ones((2, 4)),
                                     np.ones((2, 4)), 4, 4, [np.array([0])])

    def test_debug_hook_is_applied(self, rng, monkeypatch):
        q, k, v = rng.standard_normal((4, 2)), rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        parts, _ = partition_memory(3, 2, 2, 2)
        clean = windowed_cross_attention(WindowedCrossAttn(2), q, k, v, 2, 2, parts)
        monkeypatch.setattr(blocks, "debug_attention_hook", lambda p: p * 1.01)
        assert not np.allclose(windowed_cross_attention(WindowedCrossAttn(2), q, k, v, 2, 2, parts), clean)


class TestPartition:
    def test_round_robin_covers_every_window(self):
        parts, mode = partition_memory(5, 6, 6, 2)
        assert mode == "round_robin" and len(parts) == 9 and all(p.size for p in parts)

    def test_round_robin_rule(self):
        parts, _ = partition_memory(8, 4, 4, 2)
        assert [list(p) for p in parts] == [[0, 4], [1, 5], [2, 6], [3, 7]]

    def test_positions_map_through_scale(self):
        pos = np.array([[0, 0], [0, 9], [9, 0], [11, 11]], dtype=float)
        parts, mode = partition_memory(4, 6, 6, 3, positions=pos, scale=2)
        assert mode == "positions" and [list(p) for p in parts] == [[0], [1], [2], [3]]

    def test_positions_empty_window(self):
        with pytest.raises(DimensionError, match="without keys"):
            partition_memory(2, 4, 4, 2, positions=np.zeros((2, 2)))


class TestFfn:
    def test_zero_w2_identity(self, rng):
        blk = ffn_init(6, rng, 10)
        blk = FfnBlock(blk.w1, np.zeros_like(blk.w2), blk.ln_gamma, blk.ln_beta)
        t = rng.standard_normal((4, 6))
        assert np.array_equal(ffn_refine(blk, t), t)

    def test_permutation_equivariance(self, rng):
        blk = ffn_init(6, rng, 10)
        t = rng.standard_normal((9, 6))
        p = rng.permutation(9)
        assert np.array_equal(ffn_refine(blk, t[p]), ffn_refine(blk, t)[p])

    def test_formula(self, rng):
        blk = ffn_init(5, rng, 7)
        t = rng.standard_normal((3, 5))
        mu = t.mean(1, keepdims=True)
        ln = (t - mu) / np.sqrt(t.var(1, keepdims=True) + 1e-5)
        assert np.abs(ffn_refine(blk, t) - (t + gelu(ln @ blk.w1.T) @ blk.w2.T)).max() < 1e-10

    def test_default_hidden(self, rng):
        assert ffn_init(4, rng).hidden == 4096

    def test_dim_mismatch(self, rng):
        with pytest.raises(DimensionError):
            ffn_refine(ffn_init(4, rng, 8), np.zeros((2, 5)))


class TestNtb:
    def test_depth_zero(self, rng):
        q = rng.standard_normal((9, 4))
        assert np.array_equal(ntb_forward([], q, 3, 3), q)

    def test_identity_stages(self, rng):
        c = 4
        emhsa = EmhsaBlock(*(np.zeros((c, c)) for _ in range(4)), np.ones(c), np.zeros(c), 2)
        mhca = MhcaBlock(np.zeros((c, 3, 3)), np.zeros((c, c)), np.ones(c), np.zeros(c), 2)
        ffn = FfnBlock(np.zeros((6, c)), np.zeros((c, 6)), np.ones(c), np.zeros(c))
        q = rng.standard_normal((9, c))
        assert np.array_equal(ntb_forward([NtbLayer(emhsa, mhca, ffn)], q, 3, 3), q)

    def test_unrolled_composition(self, rng):
        layers = ntb_init(2, 4, 2, 8, rng)
        q = rng.standard_normal((12, 4))
        t = q
        for layer in layers:
            t = emhsa_forward(layer.emhsa, t, 3, 4)
            t = mhca_forward(layer.mhca, t.T.reshape(4, 3, 4)).reshape(4, 12).T
            t = ffn_refine(layer.ffn, t)
        assert np.array_equal(ntb_forward(layers, q, 3, 4), t)

    @pytest.mark.parametrize("depth", [0, 1, 2, 3])
    def test_shape_preserved(self, rng, depth):
        q = rng.standard_normal((16, 4))
        assert ntb_forward(ntb_init(depth, 4, 2, 8, rng), q, 4, 4).shape == q.shape

    def test_error_carries_stage_index(self, rng):
        layers = ntb_init(2, 4, 2, 8, rng)
        bad = NtbLayer(EmhsaBlock(*(np.zeros((4, 4)) for _ in range(4)), np.ones(4), np.zeros(4), 1, 2),
                       None, None)
        with pytest.raises(ConfigError, match=r"\[ntb\.1\.emhsa\]") as ei:
            ntb_forward([layers[0], bad], rng.standard_normal((9, 4)), 3, 3)
        assert ei.value.stage == "ntb.1.emhsa"

    def test_stage_names_traced(self, rng):
        layers = ntb_init(1, 4, 2, 8, rng)
        with counting() as c:
            ntb_vjp(layers, rng.standard_normal((9, 4)), 3, 3)
        assert [s.name for s in c.stages] == ["ntb.0.emhsa", "ntb.0.mhca", "ntb.0.ffn"]
