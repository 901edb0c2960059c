import numpy as np
import pytest

from repshift import (
    AttentionArtifacts,
    Tensor,
    cls_attention_score,
    mean_attention_score,
    representation_shift,
)
from repshift.errors import DimensionError, FusedIncompatible


def t(data):
    return Tensor(np.asarray(data, dtype=np.float32))


def map_artifacts(attn: np.ndarray) -> AttentionArtifacts:
    n = attn.shape[-1]
    return AttentionArtifacts(output=t(np.zeros((n, 4))), attn_map=t(attn))


FUSED_ARTIFACTS = AttentionArtifacts(output=Tensor(np.zeros((3, 4), dtype=np.float32)),
                                     attn_map=None)


class TestRepresentationShift:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(0)
        x = t(rng.standard_normal((5, 6)))
        for metric in ("l1", "l2", "cosine"):
            scores = representation_shift(x, x, metric).scores
            assert np.allclose(scores, 0.0, atol=1e-6), metric

    def test_hand_cases(self):
        before = t([[1.0, 0.0]])
        after = t([[0.0, 1.0]])
        assert representation_shift(before, after, "l2").scores[0] == \
            pytest.approx(np.sqrt(2), abs=1e-6)
        assert representation_shift(before, after, "l1").scores[0] == \
            pytest.approx(2.0, abs=1e-6)
        assert representation_shift(before, after, "cosine").scores[0] == \
            pytest.approx(1.0, abs=1e-6)

    def test_cosine_opposite_is_two(self):
        s = representation_shift(t([[1.0, 0.0]]), t([[-1.0, 0.0]]), "cosine")
        assert s.scores[0] == pytest.approx(2.0, abs=1e-6)

    def test_cosine_zero_norm_convention(self):
        s = representation_shift(t([[0.0, 0.0]]), t([[1.0, 1.0]]), "cosine")
        assert s.scores[0] == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            representation_shift(t(np.zeros((2, 3))), t(np.zeros((3, 3))))

    def test_unknown_metric(self):
        with pytest.raises(DimensionError):
            representation_shift(t(np.zeros((1, 2))), t(np.zeros((1, 2))), "l7")

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        before = rng.standard_normal((12, 8)).astype(np.float32)
        after = rng.standard_normal((12, 8)).astype(np.float32)
        base = representation_shift(t(before), t(after), "l2").scores
        for _ in range(10):
            perm = rng.permutation(12)
            permuted = representation_shift(t(before[perm]), t(after[perm]),
                                            "l2").scores
            assert np.array_equal(permuted, base[perm])

    @pytest.mark.parametrize("metric", ["l1", "l2"])
    def test_scaling_linearity(self, metric):
        rng = np.random.default_rng(2)
        b = rng.standard_normal((6, 5)).astype(np.float32)
        delta = rng.standard_normal((6, 5)).astype(np.float32)
        for lam in (-2.5, 0.5, 3.0):
            scaled = representation_shift(t(b), t(b + lam * delta), metric).scores
            unit = representation_shift(t(b), t(b + delta), metric).scores
            assert np.allclose(scaled, abs(lam) * unit, rtol=1e-4, atol=1e-5)

    def test_cosine_scale_invariance(self):
        rng = np.random.default_rng(3)
        b = rng.standard_normal((6, 5)).astype(np.float32)
        a = rng.standard_normal((6, 5)).astype(np.float32)
        base = representation_shift(t(b), t(a), "cosine").scores
        scales = rng.uniform(0.1, 7.0, size=(6, 1)).astype(np.float32)
        scaled = representation_shift(t(b * scales), t(a), "cosine").scores
        assert np.allclose(scaled, base, atol=1e-5)


class TestClsAttention:
    def test_uniform_map(self):
        attn = np.full((2, 4, 4), 0.25, dtype=np.float32)
        scores = cls_attention_score(map_artifacts(attn)).scores
        assert np.isposinf(scores[0])
        assert np.allclose(scores[1:], 0.25)

    def test_single_token(self):
        attn = np.ones((3, 1, 1), dtype=np.float32)
        scores = cls_attention_score(map_artifacts(attn)).scores
        assert scores.shape == (1,) and np.isposinf(scores[0])

    def test_head_average(self):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((2, 3, 3))
        attn = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        scores = cls_attention_score(map_artifacts(attn.astype(np.float32))).scores
        want = attn[:, 0, :].mean(axis=0)
        assert np.allclose(scores[1:], want[1:], atol=1e-6)

    def test_fused_incompatible(self):
        with pytest.raises(FusedIncompatible):
            cls_attention_score(FUSED_ARTIFACTS)


class TestMeanAttention:
    def test_uniform_map(self):
        attn = np.full((2, 5, 5), 0.2, dtype=np.float32)
        scores = mean_attention_score(map_artifacts(attn)).scores
        assert np.allclose(scores, 0.2)

    def test_single_token(self):
        attn = np.ones((2, 1, 1), dtype=np.float32)
        scores = mean_attention_score(map_artifacts(attn)).scores
        assert scores[0] == pytest.approx(1.0)

    def test_column_means(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((2, 3, 3))
        attn = (np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)).astype(
            np.float32
        )
        scores = mean_attention_score(map_artifacts(attn)).scores
        want = attn.mean(axis=1).mean(axis=0)
        assert np.allclose(scores, want, atol=1e-6)

    def test_fused_incompatible(self):
        with pytest.raises(FusedIncompatible):
            mean_attention_score(FUSED_ARTIFACTS)
