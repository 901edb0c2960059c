import numpy as np
import pytest

from repshift import (
    PruneSchedule,
    ScheduleEntry,
    Tensor,
    VitConfig,
    estimate_cnn_flops,
    estimate_flops,
    evaluate,
    flops_breakdown,
    make_bundle,
    make_planted_fixture,
    make_synthetic_bundle,
    run_ablation,
    run_ablation_grid,
    run_benchmark,
    run_reliability,
    with_speedup,
)
from repshift.errors import ConfigError, FusedIncompatible
from repshift.harness import REFERENCE_RESULTS
from repshift.tensor import count_flops
from repshift.vit import forward
from repshift.vit import manifest as vit_manifest

from conftest import STD_CNN_CONFIG, STD_VIT_CONFIG, random_vit_bundle


class TestFlopsEstimator:
    def test_zero_token_layers_leave_only_embed_and_head(self):
        cfg = VitConfig(image_size=(16, 16), patch_size=4, depth=2, width=8,
                        heads=2, num_classes=3)
        terms = flops_breakdown(cfg, [0, 0])
        block_terms = {k: v for k, v in terms.items()
                       if k not in ("patch_embed", "head")}
        assert all(v == 0 for v in block_terms.values())
        assert terms["patch_embed"] == 16 * 48 * 8
        assert terms["head"] == 8 * 3

    def test_halving_tokens_quarters_the_score_term(self):
        cfg = VitConfig(image_size=(64, 64), patch_size=8, depth=1, width=32,
                        heads=4, num_classes=2)
        full = flops_breakdown(cfg, [64])
        half = flops_breakdown(cfg, [32])
        assert full["attn_scores"] == 4 * half["attn_scores"]
        assert full["attn_context"] == 4 * half["attn_context"]
        assert full["mlp_in"] == 2 * half["mlp_in"]

    def test_matches_instrumented_counter_exactly(self):
        cfg = VitConfig(image_size=(112, 112), patch_size=8, depth=1,
                        width=384, heads=6, num_classes=10,
                        use_class_token=True)
        bundle = random_vit_bundle(0, cfg, scale=0.05)
        image = np.random.default_rng(1).standard_normal((112, 112, 3)) * 0.1
        with count_flops() as counter:
            _, traces = forward(Tensor(image.astype(np.float32)), bundle)
        counts = [t.n_tokens_in for t in traces]
        assert counts == [197]
        estimated_macs = sum(flops_breakdown(cfg, counts).values())
        assert counter.macs == estimated_macs

    def test_instrumented_counter_matches_under_pruning(self):
        bundle = make_synthetic_bundle(1, STD_VIT_CONFIG)
        fix = make_planted_fixture(seed=2, n_items=2, grid=(8, 8),
                                   patch_size=8)
        sched = PruneSchedule(entries=(ScheduleEntry(layer=1, ratio=0.25),))
        with count_flops() as counter:
            _, traces = forward(Tensor(fix.images[0]), bundle, schedule=sched,
                                mode="rep_shift")
        counts = [t.n_tokens_in for t in traces]
        assert counter.macs == sum(flops_breakdown(STD_VIT_CONFIG, counts).values())

    def test_wrong_count_length_rejected(self):
        with pytest.raises(Exception):
            estimate_flops(STD_VIT_CONFIG, [64])

    def test_cnn_estimator_matches_counter(self, cnn_bundle, cnn_fixture):
        from repshift.cnn import cnn_forward
        with count_flops() as counter:
            cnn_forward(Tensor(cnn_fixture.images[0]), cnn_bundle)
        assert counter.macs == int(estimate_cnn_flops(STD_CNN_CONFIG) * 1e9)

    def test_cnn_estimator_with_plan(self, cnn_bundle, cnn_fixture):
        from repshift.cnn import cnn_forward
        from repshift import PrunePlanEntry
        plan = (PrunePlanEntry(stage=0, drop_rows=2, drop_cols=2),)
        with count_flops() as counter:
            cnn_forward(Tensor(cnn_fixture.images[0]), cnn_bundle, plan=plan)
        assert counter.macs == int(estimate_cnn_flops(STD_CNN_CONFIG, plan) * 1e9)


class TestBenchmark:
    def test_report_fields_and_determinism(self, vit_bundle, vit_fixture):
        kwargs = dict(batch=2, repeats=2, warmup=0)
        sched = PruneSchedule(entries=(ScheduleEntry(layer=1, ratio=0.2),))
        r1 = run_benchmark(vit_bundle, vit_fixture, schedule=sched,
                           mode="rep_shift", **kwargs)
        r2 = run_benchmark(vit_bundle, vit_fixture, schedule=sched,
                           mode="rep_shift", **kwargs)
        assert r1.throughput_items_per_s > 0
        assert r1.accuracy == r2.accuracy
        assert r1.config_digest == r2.config_digest
        assert r1.per_layer_token_counts == r2.per_layer_token_counts
        d1, d2 = r1.to_dict(), r2.to_dict()
        d1.pop("timing"), d2.pop("timing")
        assert d1 == d2

    def test_measured_flops_within_tolerance_of_estimate(self, vit_bundle,
                                                         vit_fixture):
        report = run_benchmark(vit_bundle, vit_fixture, batch=1, repeats=1,
                               warmup=0)
        assert report.gflops_measured == pytest.approx(
            report.gflops_estimate, rel=0.10
        )

    def test_attn_score_fused_raises(self, vit_bundle, vit_fixture):
        sched = PruneSchedule(entries=(ScheduleEntry(layer=0, count=4),),
                              scorer="mean_attention")
        with pytest.raises(FusedIncompatible):
            run_benchmark(vit_bundle, vit_fixture, schedule=sched,
                          mode="attn_score", attn_impl="fused", repeats=1)

    def test_speedup_attachment(self, vit_bundle, vit_fixture):
        base = run_benchmark(vit_bundle, vit_fixture, batch=1, repeats=1,
                             warmup=0)
        report = with_speedup(base, base, label="self")
        assert report.speedup == pytest.approx(1.0)
        assert report.baseline_label == "self"

    def test_accuracy_identical_across_worker_counts(self, vit_bundle,
                                                     vit_fixture):
        a1, p1 = evaluate(vit_bundle, vit_fixture, workers=1)
        a2, p2 = evaluate(vit_bundle, vit_fixture, workers=2)
        assert a1 == a2
        assert np.array_equal(p1, p2)

    def test_reference_context_embedded(self, vit_bundle, vit_fixture):
        report = run_benchmark(vit_bundle, vit_fixture, batch=1, repeats=1,
                               warmup=0)
        d = report.to_dict()
        assert d["reference_results"] is REFERENCE_RESULTS
        assert "not reproduced" in d["reference_results"]["note"]


class TestAblation:
    def test_axis_cardinalities(self, vit_bundle, vit_fixture):
        ops = run_ablation(vit_bundle, vit_fixture, axis="op_choice")
        metrics = run_ablation(vit_bundle, vit_fixture, axis="metric")
        layers = run_ablation(vit_bundle, vit_fixture, axis="prune_layer")
        assert [r["op_choice"] for r in ops] == ["attn", "mlp", "block"]
        assert [r["metric"] for r in metrics] == ["l1", "l2", "cosine"]
        assert [r["layer"] for r in layers] == [0, 2, 4]  # depth 6 default
        for row in ops + metrics + layers:
            assert 0.0 <= row["accuracy"] <= 1.0
            assert row["gflops_estimate"] > 0

    def test_unknown_axis(self, vit_bundle, vit_fixture):
        with pytest.raises(ConfigError):
            run_ablation(vit_bundle, vit_fixture, axis="banana")

    def test_grid_completeness(self, vit_bundle, vit_fixture):
        rows = run_ablation_grid(vit_bundle, vit_fixture, layers=[0, 2],
                                 count=4)
        assert len(rows) == 3 * 3 * 2
        combos = {(r["op_choice"], r["metric"], r["layer"]) for r in rows}
        assert len(combos) == 18

    def test_degenerate_model_ties_all_metrics(self, vit_fixture):
        # all-zero weights: every token is zero everywhere, shifts are
        # constant per metric, tie-break is by index, so all rows agree
        required, _ = vit_manifest(STD_VIT_CONFIG)
        tensors = {name: Tensor(np.zeros(shape, dtype=np.float32))
                   for name, shape in required.items()}
        bundle = make_bundle(tensors, STD_VIT_CONFIG)
        rows = run_ablation(bundle, vit_fixture, axis="metric")
        assert len({r["accuracy"] for r in rows}) == 1


class TestReliability:
    def test_planted_gap(self, vit_bundle, vit_fixture):
        result = run_reliability(vit_bundle, vit_fixture, layer=2,
                                 fraction=0.5)
        assert result["top_acc"] > result["bottom_acc"]

    def test_fraction_near_one_collapses_to_baseline(self, vit_bundle,
                                                     vit_fixture):
        base, _ = evaluate(vit_bundle, vit_fixture)
        result = run_reliability(vit_bundle, vit_fixture, layer=1,
                                 fraction=0.999)
        assert result["top_acc"] == base
        assert result["bottom_acc"] == base

    def test_all_signal_fixture_collapses_gap(self, vit_bundle):
        fix = make_planted_fixture(seed=9, n_items=30, grid=(8, 8),
                                   patch_size=8, signal_patches=64)
        result = run_reliability(vit_bundle, fix, layer=1, fraction=0.5)
        assert abs(result["top_acc"] - result["bottom_acc"]) <= 0.15

    def test_invalid_fraction(self, vit_bundle, vit_fixture):
        for fraction in (0.0, 1.0, -0.2, 1.7):
            with pytest.raises(ConfigError):
                run_reliability(vit_bundle, vit_fixture, layer=0,
                                fraction=fraction)

    def test_invalid_layer(self, vit_bundle, vit_fixture):
        with pytest.raises(ConfigError):
            run_reliability(vit_bundle, vit_fixture, layer=99)


class TestFixtures:
    def test_fixture_deterministic(self):
        a = make_planted_fixture(seed=4, n_items=6, grid=(4, 4), patch_size=4)
        b = make_planted_fixture(seed=4, n_items=6, grid=(4, 4), patch_size=4)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.signal_mask, b.signal_mask)

    def test_fixture_seed_changes_content(self):
        a = make_planted_fixture(seed=4, n_items=6, grid=(4, 4), patch_size=4)
        b = make_planted_fixture(seed=5, n_items=6, grid=(4, 4), patch_size=4)
        assert not np.array_equal(a.images, b.images)

    def test_bundle_deterministic(self):
        a = make_synthetic_bundle(3, STD_VIT_CONFIG)
        b = make_synthetic_bundle(3, STD_VIT_CONFIG)
        assert a.digest == b.digest

    def test_background_has_no_class_correlation(self):
        fix = make_planted_fixture(seed=6, n_items=200, grid=(4, 4),
                                   patch_size=4, signal_patches=4)
        bg_patches = ~fix.signal_mask
        # mean background pixel value split by label: statistically identical
        means = []
        for label in (0, 1):
            items = fix.images[fix.labels == label]
            grid = items.reshape(len(items), 4, 4, 4, 4, 3).transpose(
                0, 1, 3, 2, 4, 5
            ).reshape(len(items), 16, -1)
            means.append(grid[:, bg_patches].mean())
        assert abs(means[0] - means[1]) < 0.01

    def test_baseline_accuracy_exceeds_90(self, vit_bundle, vit_fixture):
        acc, _ = evaluate(vit_bundle, vit_fixture)
        assert acc > 0.9

    def test_save_load_round_trip(self, vit_fixture, tmp_path):
        from repshift import load_fixture, save_fixture
        path = tmp_path / "fix.npz"
        save_fixture(vit_fixture, path)
        loaded = load_fixture(path)
        assert np.array_equal(loaded.images, vit_fixture.images)
        assert np.array_equal(loaded.labels, vit_fixture.labels)
        assert loaded.meta == vit_fixture.meta
        assert loaded.kind == "vit"
