import numpy as np
import pytest

from repshift import AttentionWeights, Tensor, fused_attention, naive_attention
from repshift.errors import DimensionError
from repshift.tensor import track_allocations


def make_weights(rng, c, heads, with_bias=False, scale=0.3):
    kwargs = {}
    if with_bias:
        kwargs["qkv_bias"] = Tensor((scale * rng.standard_normal(3 * c)).astype(np.float32))
        kwargs["out_bias"] = Tensor((scale * rng.standard_normal(c)).astype(np.float32))
    return AttentionWeights(
        qkv_proj=Tensor((scale * rng.standard_normal((c, 3 * c))).astype(np.float32)),
        out_proj=Tensor((scale * rng.standard_normal((c, c))).astype(np.float32)),
        num_heads=heads,
        **kwargs,
    )


def reference_attention(x: np.ndarray, w: AttentionWeights) -> np.ndarray:
    """Brute-force float64 oracle: explicit loops over heads and queries."""
    n, c = x.shape
    h, d = w.num_heads, w.head_dim
    qkv = x.astype(np.float64) @ w.qkv_proj.to_numpy().astype(np.float64)
    if w.qkv_bias is not None:
        qkv = qkv + w.qkv_bias.to_numpy().astype(np.float64)
    merged = np.zeros((n, c))
    for head in range(h):
        q = qkv[:, head * d:(head + 1) * d]
        k = qkv[:, c + head * d:c + (head + 1) * d]
        v = qkv[:, 2 * c + head * d:2 * c + (head + 1) * d]
        for i in range(n):
            scores = np.array([q[i] @ k[j] / np.sqrt(d) for j in range(n)])
            scores -= scores.max()
            weights = np.exp(scores) / np.exp(scores).sum()
            merged[i, head * d:(head + 1) * d] = sum(
                weights[j] * v[j] for j in range(n)
            )
    out = merged @ w.out_proj.to_numpy().astype(np.float64)
    if w.out_bias is not None:
        out = out + w.out_bias.to_numpy().astype(np.float64)
    return out


class TestNaive:
    def test_single_token_map(self):
        rng = np.random.default_rng(0)
        w = make_weights(rng, 8, 2)
        x = Tensor(rng.standard_normal((1, 8)).astype(np.float32))
        art = naive_attention(x, w, keep_map=True)
        assert art.attn_map.shape == (2, 1, 1)
        assert np.allclose(art.attn_map.to_numpy(), 1.0)

    def test_zero_input_uniform_rows(self):
        rng = np.random.default_rng(1)
        w = make_weights(rng, 8, 2)
        x = Tensor(np.zeros((5, 8), dtype=np.float32))
        art = naive_attention(x, w, keep_map=True)
        assert np.allclose(art.attn_map.to_numpy(), 1 / 5, atol=1e-6)

    def test_matches_three_loop_reference(self):
        rng = np.random.default_rng(2)
        w = make_weights(rng, 8, 2)
        x = rng.standard_normal((4, 8)).astype(np.float32)
        got = naive_attention(Tensor(x), w).output.to_numpy()
        want = reference_attention(x, w)
        assert np.abs(got - want).max() < 1e-5

    def test_reference_with_biases(self):
        rng = np.random.default_rng(3)
        w = make_weights(rng, 12, 3, with_bias=True)
        x = rng.standard_normal((6, 12)).astype(np.float32)
        got = naive_attention(Tensor(x), w).output.to_numpy()
        want = reference_attention(x, w)
        assert np.abs(got - want).max() < 1e-5

    def test_map_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        w = make_weights(rng, 16, 4)
        x = Tensor((3 * rng.standard_normal((9, 16))).astype(np.float32))
        art = naive_attention(Tensor(x.to_numpy()), w, keep_map=True)
        sums = art.attn_map.to_numpy().sum(axis=-1)
        assert np.abs(sums - 1.0).max() < 1e-5

    def test_map_absent_unless_requested(self):
        rng = np.random.default_rng(5)
        w = make_weights(rng, 8, 2)
        x = Tensor(rng.standard_normal((3, 8)).astype(np.float32))
        assert naive_attention(x, w).attn_map is None

    def test_head_divisibility(self):
        rng = np.random.default_rng(6)
        with pytest.raises(DimensionError):
            make_weights(rng, 9, 2)


class TestFused:
    def test_degenerate_single_tile(self):
        rng = np.random.default_rng(7)
        w = make_weights(rng, 8, 2)
        x = Tensor(rng.standard_normal((6, 8)).astype(np.float32))
        naive = naive_attention(x, w).output.to_numpy()
        fused = fused_attention(x, w, tile_size=100).output.to_numpy()
        assert np.abs(fused - naive).max() < 1e-6

    def test_non_dividing_tile(self):
        rng = np.random.default_rng(8)
        w = make_weights(rng, 8, 2)
        x = Tensor(rng.standard_normal((7, 8)).astype(np.float32))
        naive = naive_attention(x, w).output.to_numpy()
        fused = fused_attention(x, w, tile_size=3).output.to_numpy()
        assert np.abs(fused - naive).max() < 1e-5

    def test_large_sequence(self):
        rng = np.random.default_rng(9)
        w = make_weights(rng, 64, 4)
        x = Tensor(rng.standard_normal((256, 64)).astype(np.float32))
        naive = naive_attention(x, w).output.to_numpy()
        fused = fused_attention(x, w, tile_size=32).output.to_numpy()
        assert np.abs(fused - naive).max() < 1e-5

    def test_map_always_absent(self):
        rng = np.random.default_rng(10)
        w = make_weights(rng, 8, 2)
        x = Tensor(rng.standard_normal((5, 8)).astype(np.float32))
        assert fused_attention(x, w, tile_size=2).attn_map is None

    def test_random_configs_match_naive(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            heads = int(rng.choice([1, 2, 4]))
            d = int(rng.integers(2, 17))
            c = heads * d
            n = int(rng.integers(1, 65))
            tile = int(rng.choice([1, 3, 16, 64, n + 1]))
            w = make_weights(rng, c, heads, with_bias=bool(rng.integers(2)))
            x = Tensor(rng.standard_normal((n, c)).astype(np.float32))
            naive = naive_attention(x, w).output.to_numpy()
            fused = fused_attention(x, w, tile_size=tile).output.to_numpy()
            assert np.abs(fused - naive).max() < 1e-5, (n, c, heads, tile)

    def test_bad_tile_size(self):
        rng = np.random.default_rng(12)
        w = make_weights(rng, 8, 2)
        x = Tensor(np.zeros((3, 8), dtype=np.float32))
        with pytest.raises(DimensionError):
            fused_attention(x, w, tile_size=0)


class TestMemoryContract:
    def test_fused_never_builds_square_map(self):
        rng = np.random.default_rng(13)
        w = make_weights(rng, 16, 2)
        x = Tensor(rng.standard_normal((33, 16)).astype(np.float32))
        with track_allocations() as log:
            fused_attention(x, w, tile_size=8)
        assert not log.has_square_of(33)

    def test_fused_avoids_square_even_with_huge_tile(self):
        rng = np.random.default_rng(14)
        w = make_weights(rng, 16, 2)
        x = Tensor(rng.standard_normal((33, 16)).astype(np.float32))
        with track_allocations() as log:
            fused_attention(x, w, tile_size=10_000)
        assert not log.has_square_of(33)

    def test_naive_does_build_square_map(self):
        # positive control for the instrumentation
        rng = np.random.default_rng(15)
        w = make_weights(rng, 16, 2)
        x = Tensor(rng.standard_normal((33, 16)).astype(np.float32))
        with track_allocations() as log:
            naive_attention(x, w)
        assert log.has_square_of(33)

    def test_fused_auxiliary_memory_scales_linearly(self):
        rng = np.random.default_rng(16)
        w = make_weights(rng, 16, 2)
        peaks = {}
        for n in (64, 256):
            x = Tensor(rng.standard_normal((n, 16)).astype(np.float32))
            with track_allocations() as log:
                fused_attention(x, w, tile_size=8)
            peaks[n] = log.max_buffer_elems()
        # O(N) growth: 4x tokens must not exceed ~4x the peak buffer
        # (an N^2 map would grow 16x).
        assert peaks[256] <= 5 * peaks[64]
