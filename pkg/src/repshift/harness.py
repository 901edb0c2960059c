"""Benchmarking, ablations, and the reliability experiment.

Cost accounting counts matmul multiply-accumulates only (the convention
behind the usual "GFLOPs" columns for transformers): per layer with n live
tokens and width C, attention costs 4nC^2 (qkv + output projections) plus
2n^2C (scores + context), and the 4x-expansion MLP costs 8nC^2. The
analytic estimator adds the patch-embedding and head projections so it
matches an instrumented walk of the real op graph exactly; benchmark runs
cross-check the two.

Throughput is the median items/s over a configurable number of timed
repeats after warm-up rounds, with weight loading excluded. Accuracy
fields are deterministic for a given seed and identical across worker
counts; only wall-clock fields vary run to run.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from statistics import median
from typing import Any, Sequence

import numpy as np

from .cnn import CnnConfig, PrunePlanEntry, cnn_forward, conv_out_size
from .compression import PruneSchedule, ScheduleEntry, SELECT_BOTTOM, SELECT_TOP
from .errors import ConfigError, DimensionError
from .fixtures import PlantedFixture
from .importance import METRICS, OP_CHOICES, SCORER_REP_SHIFT
from .model_io import ModelBundle
from .tensor import Tensor, count_flops
from .vit import (
    IMPL_FUSED,
    MODE_BASELINE,
    MODE_REP_SHIFT,
    VitConfig,
    check_run_setup,
    forward,
)

DEFAULT_SWEEP_LAYERS = (0, 2, 4, 6, 8)

AXIS_OP_CHOICE = "op_choice"
AXIS_METRIC = "metric"
AXIS_PRUNE_LAYER = "prune_layer"
ABLATION_AXES = (AXIS_OP_CHOICE, AXIS_METRIC, AXIS_PRUNE_LAYER)

# Headline numbers reported by the method's original full-scale evaluation
# (pretrained video/image transformers on public benchmarks). They are
# context for reading desk-scale reports, NOT reproduced by this harness.
REFERENCE_RESULTS = {
    "note": (
        "reported by the original full-scale evaluation on pretrained "
        "models and public benchmarks; not reproduced at this scale"
    ),
    "video_retrieval_umt_b": {"baseline_throughput": 32, "pruned_throughput": 175,
                              "speedup": 5.47, "gflops": [303.3, 156.4]},
    "video_retrieval_umt_l": {"baseline_throughput": 12, "pruned_throughput": 66,
                              "speedup": 5.50, "gflops": [984.6, 478.5]},
    "imagenet_deit_s": {"baseline_acc": 79.8, "pruned_acc": 77.8,
                        "throughput": [3002, 5948], "gflops": [4.6, 3.0]},
    "imagenet_resnet_50_linewise": {"baseline_acc": 76.1, "pruned_acc": 76.4,
                                    "throughput": [2927, 3553]},
    "retention_top_vs_bottom_50pct": {"top_acc": 78.0, "bottom_acc": 51.7},
}


# ---------------------------------------------------------------------------
# FLOPs estimation.
# ---------------------------------------------------------------------------


def flops_breakdown(
    config: VitConfig, per_layer_token_counts: Sequence[int]
) -> dict[str, int]:
    """Matmul MACs term by term, for the given per-layer live token counts."""
    counts = [int(n) for n in per_layer_token_counts]
    if len(counts) != config.depth:
        raise DimensionError(
            f"expected {config.depth} per-layer token counts, got {len(counts)}"
        )
    c, hid, k = config.width, config.hidden_width, config.num_classes
    terms = {
        "patch_embed": config.num_patches * config.patch_dim * c,
        "attn_qkv": 0,
        "attn_scores": 0,
        "attn_context": 0,
        "attn_out": 0,
        "mlp_in": 0,
        "mlp_out": 0,
        "head": c * k,
    }
    for n in counts:
        terms["attn_qkv"] += n * c * 3 * c
        terms["attn_scores"] += n * n * c
        terms["attn_context"] += n * n * c
        terms["attn_out"] += n * c * c
        terms["mlp_in"] += n * c * hid
        terms["mlp_out"] += n * hid * c
    return terms


def estimate_flops(
    config: VitConfig, per_layer_token_counts: Sequence[int]
) -> float:
    """Analytic GFLOPs (giga-MACs) of one forward pass."""
    return sum(flops_breakdown(config, per_layer_token_counts).values()) / 1e9


def estimate_cnn_flops(
    config: CnnConfig, plan: Sequence[PrunePlanEntry] = ()
) -> float:
    """Analytic GFLOPs of one CNN forward under the given prune plan."""
    by_stage = {e.stage: e for e in plan}
    h, w = config.image_size
    macs = h * w * 9 * 3 * config.stem_channels  # stem, stride 1
    cin = config.stem_channels
    for s, spec in enumerate(config.stages):
        for b in range(spec.blocks):
            bin_ = cin if b == 0 else spec.channels
            stride = spec.stride if b == 0 else 1
            ho, wo = conv_out_size(h, stride), conv_out_size(w, stride)
            macs += ho * wo * 9 * bin_ * spec.channels       # conv1
            macs += ho * wo * 9 * spec.channels ** 2         # conv2
            if stride != 1 or bin_ != spec.channels:
                macs += ho * wo * bin_ * spec.channels       # 1x1 shortcut
            h, w = ho, wo
        e = by_stage.get(s)
        if e is not None:
            h, w = h - e.drop_rows, w - e.drop_cols
        cin = spec.channels
    macs += cin * config.num_classes
    return macs / 1e9


# ---------------------------------------------------------------------------
# Forward dispatch and evaluation.
# ---------------------------------------------------------------------------


def _forward_item(bundle: ModelBundle, image: np.ndarray,
                  schedule: PruneSchedule, mode: str, attn_impl: str,
                  tile_size: int, plan: Sequence[PrunePlanEntry]):
    if bundle.kind == "vit":
        return forward(Tensor(image), bundle, schedule=schedule, mode=mode,
                       attn_impl=attn_impl, tile_size=tile_size)
    return cnn_forward(Tensor(image), bundle, plan=tuple(plan))


def _check_fixture(bundle: ModelBundle, fixture: PlantedFixture) -> None:
    expect = tuple(bundle.config.image_size) + (3,)
    if fixture.images.shape[1:] != expect:
        raise ConfigError(
            f"fixture images {fixture.images.shape[1:]} do not match model "
            f"input {expect}"
        )


def evaluate(
    bundle: ModelBundle,
    fixture: PlantedFixture,
    schedule: PruneSchedule | None = None,
    mode: str = MODE_BASELINE,
    attn_impl: str = IMPL_FUSED,
    tile_size: int = 64,
    plan: Sequence[PrunePlanEntry] = (),
    workers: int = 1,
) -> tuple[float, np.ndarray]:
    """Accuracy over the fixture set; returns (accuracy, predictions)."""
    _check_fixture(bundle, fixture)
    schedule = schedule if schedule is not None else PruneSchedule()

    def run(image: np.ndarray) -> int:
        logits, _ = _forward_item(bundle, image, schedule, mode, attn_impl,
                                  tile_size, plan)
        return int(np.argmax(logits.to_numpy()))

    images = list(fixture.images)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = np.array(list(pool.map(run, images)), dtype=np.int64)
    else:
        preds = np.array([run(im) for im in images], dtype=np.int64)
    accuracy = float((preds == fixture.labels).mean())
    return accuracy, preds


# ---------------------------------------------------------------------------
# Benchmarking.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchReport:
    """One benchmark run. Everything except ``timing`` is deterministic."""

    schema_version: int
    kind: str
    config_digest: str
    mode: str
    attn_impl: str
    tile_size: int
    batch: int
    repeats: int
    warmup: int
    workers: int
    n_items: int
    accuracy: float
    gflops_estimate: float
    gflops_measured: float
    per_layer_token_counts: tuple[int, ...]
    throughput_items_per_s: float
    run_seconds: tuple[float, ...]
    baseline_label: str | None = None
    speedup: float | None = None
    reference_results: dict = field(default_factory=lambda: REFERENCE_RESULTS)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "schema_version": self.schema_version,
            "kind": self.kind,
            "config_digest": self.config_digest,
            "mode": self.mode,
            "attn_impl": self.attn_impl,
            "tile_size": self.tile_size,
            "batch": self.batch,
            "repeats": self.repeats,
            "warmup": self.warmup,
            "workers": self.workers,
            "n_items": self.n_items,
            "accuracy": self.accuracy,
            "gflops_estimate": self.gflops_estimate,
            "gflops_measured": self.gflops_measured,
            "per_layer_token_counts": list(self.per_layer_token_counts),
            "baseline_label": self.baseline_label,
            "reference_results": self.reference_results,
            "timing": {
                "throughput_items_per_s": self.throughput_items_per_s,
                "run_seconds": list(self.run_seconds),
                "speedup": self.speedup,
            },
        }
        return d


def _run_digest(bundle: ModelBundle, **params: Any) -> str:
    blob = json.dumps({"bundle": bundle.digest, **params}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_benchmark(
    bundle: ModelBundle,
    fixture: PlantedFixture,
    schedule: PruneSchedule | None = None,
    mode: str = MODE_BASELINE,
    attn_impl: str = IMPL_FUSED,
    tile_size: int = 64,
    plan: Sequence[PrunePlanEntry] = (),
    batch: int = 4,
    repeats: int = 5,
    warmup: int = 2,
    workers: int = 1,
) -> BenchReport:
    """Median-throughput benchmark plus deterministic accuracy and FLOPs.

    One instrumented single-item pass measures real matmul MACs; timed
    repeats then process ``batch`` items each (cycling the fixture) without
    instrumentation. Invalid mode/impl combinations (attention-score
    pruning on the fused path) raise before any work happens.
    """
    _check_fixture(bundle, fixture)
    schedule = schedule if schedule is not None else PruneSchedule()
    if bundle.kind == "vit":
        check_run_setup(bundle.config, schedule, mode, attn_impl)
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")

    with count_flops() as counter:
        _, traces = _forward_item(bundle, fixture.images[0], schedule, mode,
                                  attn_impl, tile_size, plan)
    gflops_measured = counter.gflops
    if bundle.kind == "vit":
        token_counts = tuple(t.n_tokens_in for t in traces)
        gflops_estimate = estimate_flops(bundle.config, token_counts)
    else:
        token_counts = tuple(h * w for h, w in
                             (t.spatial_out for t in traces))
        gflops_estimate = estimate_cnn_flops(bundle.config, plan)

    accuracy, _ = evaluate(bundle, fixture, schedule, mode, attn_impl,
                           tile_size, plan, workers=workers)

    images = fixture.images
    batch_images = [images[i % len(images)] for i in range(batch)]

    def run_batch() -> None:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(
                    lambda im: _forward_item(bundle, im, schedule, mode,
                                             attn_impl, tile_size, plan),
                    batch_images,
                ))
        else:
            for im in batch_images:
                _forward_item(bundle, im, schedule, mode, attn_impl,
                              tile_size, plan)

    for _ in range(warmup):
        run_batch()
    run_seconds: list[float] = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run_batch()
        run_seconds.append(time.perf_counter() - t0)
    throughput = batch / median(run_seconds)

    return BenchReport(
        schema_version=1,
        kind=bundle.kind,
        config_digest=_run_digest(
            bundle, mode=mode, attn_impl=attn_impl, tile_size=tile_size,
            batch=batch, repeats=repeats, warmup=warmup, workers=workers,
            schedule=[(e.layer, e.count, e.ratio) for e in schedule.entries],
            scorer=schedule.scorer, metric=schedule.metric,
            op=schedule.op_choice, basis=schedule.ratio_basis,
            plan=[(e.stage, e.drop_rows, e.drop_cols, e.mode) for e in plan],
            fixture_seed=fixture.seed,
        ),
        mode=mode,
        attn_impl=attn_impl,
        tile_size=tile_size,
        batch=batch,
        repeats=repeats,
        warmup=warmup,
        workers=workers,
        n_items=fixture.n_items,
        accuracy=accuracy,
        gflops_estimate=gflops_estimate,
        gflops_measured=gflops_measured,
        per_layer_token_counts=token_counts,
        throughput_items_per_s=throughput,
        run_seconds=tuple(run_seconds),
    )


def with_speedup(report: BenchReport, baseline: BenchReport,
                 label: str = "baseline") -> BenchReport:
    return replace(
        report,
        baseline_label=label,
        speedup=report.throughput_items_per_s / baseline.throughput_items_per_s,
    )


# ---------------------------------------------------------------------------
# Ablations.
# ---------------------------------------------------------------------------


def _sweep_layers(config: VitConfig, layers: Sequence[int] | None) -> list[int]:
    if layers is None:
        layers = [l for l in DEFAULT_SWEEP_LAYERS if l < config.depth]
    return list(layers)


def _default_prune_count(config: VitConfig) -> int:
    return max(1, round(0.2 * config.num_patches))


def _ablation_cell(bundle: ModelBundle, fixture: PlantedFixture,
                   schedule: PruneSchedule, tile_size: int) -> dict[str, Any]:
    t0 = time.perf_counter()
    accuracy, _ = evaluate(bundle, fixture, schedule, MODE_REP_SHIFT,
                           IMPL_FUSED, tile_size)
    dt = time.perf_counter() - t0
    _, traces = _forward_item(bundle, fixture.images[0], schedule,
                              MODE_REP_SHIFT, IMPL_FUSED, tile_size, ())
    counts = tuple(t.n_tokens_in for t in traces)
    return {
        "accuracy": accuracy,
        "gflops_estimate": estimate_flops(bundle.config, counts),
        "throughput_items_per_s": fixture.n_items / dt,
    }


def run_ablation(
    bundle: ModelBundle,
    fixture: PlantedFixture,
    axis: str,
    layers: Sequence[int] | None = None,
    count: int | None = None,
    tile_size: int = 64,
) -> list[dict[str, Any]]:
    """Sweep one axis of the representation-shift setup, others at defaults.

    Defaults: MLP-branch shift, L2 metric, pruning a fixed token count at
    the protocol layers. The prune_layer axis prunes at a single layer per
    row; the other axes prune at all protocol layers per row.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; "
                          f"expected one of {ABLATION_AXES}")
    if bundle.kind != "vit":
        raise ConfigError("ablations run on vit bundles")
    config: VitConfig = bundle.config
    sweep_layers = _sweep_layers(config, layers)
    k = count if count is not None else _default_prune_count(config)
    rows: list[dict[str, Any]] = []
    if axis == AXIS_OP_CHOICE:
        for op in OP_CHOICES:
            schedule = PruneSchedule(
                entries=tuple(ScheduleEntry(layer=l, count=k)
                              for l in sweep_layers),
                scorer=SCORER_REP_SHIFT, metric="l2", op_choice=op,
            )
            rows.append({"op_choice": op, "metric": "l2",
                         "layers": list(sweep_layers),
                         **_ablation_cell(bundle, fixture, schedule, tile_size)})
    elif axis == AXIS_METRIC:
        for metric in METRICS:
            schedule = PruneSchedule(
                entries=tuple(ScheduleEntry(layer=l, count=k)
                              for l in sweep_layers),
                scorer=SCORER_REP_SHIFT, metric=metric, op_choice="mlp",
            )
            rows.append({"op_choice": "mlp", "metric": metric,
                         "layers": list(sweep_layers),
                         **_ablation_cell(bundle, fixture, schedule, tile_size)})
    else:
        for layer in sweep_layers:
            schedule = PruneSchedule(
                entries=(ScheduleEntry(layer=layer, count=k),),
                scorer=SCORER_REP_SHIFT, metric="l2", op_choice="mlp",
            )
            rows.append({"op_choice": "mlp", "metric": "l2", "layer": layer,
                         **_ablation_cell(bundle, fixture, schedule, tile_size)})
    return rows


def run_ablation_grid(
    bundle: ModelBundle,
    fixture: PlantedFixture,
    layers: Sequence[int] | None = None,
    count: int | None = None,
    tile_size: int = 64,
) -> list[dict[str, Any]]:
    """Full op-choice x metric x prune-layer grid, one row per cell."""
    if bundle.kind != "vit":
        raise ConfigError("ablations run on vit bundles")
    config: VitConfig = bundle.config
    sweep_layers = _sweep_layers(config, layers)
    k = count if count is not None else _default_prune_count(config)
    rows: list[dict[str, Any]] = []
    for op in OP_CHOICES:
        for metric in METRICS:
            for layer in sweep_layers:
                schedule = PruneSchedule(
                    entries=(ScheduleEntry(layer=layer, count=k),),
                    scorer=SCORER_REP_SHIFT, metric=metric, op_choice=op,
                )
                rows.append({
                    "op_choice": op, "metric": metric, "layer": layer,
                    **_ablation_cell(bundle, fixture, schedule, tile_size),
                })
    return rows


# ---------------------------------------------------------------------------
# Reliability probe.
# ---------------------------------------------------------------------------


def run_reliability(
    bundle: ModelBundle,
    fixture: PlantedFixture,
    layer: int,
    fraction: float = 0.5,
    tile_size: int = 64,
) -> dict[str, float]:
    """Accuracy when retaining the top vs bottom ``fraction`` of tokens.

    Tokens are ranked by the default representation shift (MLP branch, L2)
    at ``layer``; the class token, when present, is always retained.
    """
    if bundle.kind != "vit":
        raise ConfigError("the reliability probe runs on vit bundles")
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
    config: VitConfig = bundle.config
    if not (0 <= layer < config.depth):
        raise ConfigError(f"layer {layer} outside depth {config.depth}")
    n_prunable = config.num_patches
    keep = max(1, int(round(fraction * n_prunable)))
    drop = n_prunable - keep

    accs: dict[str, float] = {}
    for label, select in (("top_acc", SELECT_TOP), ("bottom_acc", SELECT_BOTTOM)):
        if drop == 0:
            schedule = PruneSchedule()
            mode = MODE_BASELINE
        else:
            schedule = PruneSchedule(
                entries=(ScheduleEntry(layer=layer, count=drop),),
                scorer=SCORER_REP_SHIFT, metric="l2", op_choice="mlp",
                select=select,
            )
            mode = MODE_REP_SHIFT
        accs[label], _ = evaluate(bundle, fixture, schedule, mode, IMPL_FUSED,
                                  tile_size)
    return accs
