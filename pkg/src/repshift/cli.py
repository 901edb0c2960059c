"""Command-line entry point.

Subcommands: run (evaluate a config and emit per-item logits), bench,
ablate, reliability, gen-fixture, inspect. Every experiment parameter
lives in the YAML config; flags only select files, seeds, workers, and
output format, so a config plus a seed fully reproduces a report
(timing fields aside).

Exit codes: 0 success, 1 runtime failure (machine-readable category on
stderr as JSON), 2 usage errors. Set REPSHIFT_LOG to control log level.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from .cnn import CnnConfig, StageSpec
from .errors import ConfigError, EngineError
from .fixtures import (
    PlantedFixture,
    load_fixture,
    make_cnn_planted_fixture,
    make_planted_fixture,
    make_synthetic_bundle,
    make_synthetic_cnn_bundle,
    save_fixture,
)
from .harness import (
    run_ablation,
    run_ablation_grid,
    run_benchmark,
    run_reliability,
    with_speedup,
)
from .model_io import (
    ModelBundle,
    RunSpec,
    load_bundle,
    parse_run_config,
    save_bundle,
)
from .tensor import Tensor
from .vit import MODE_BASELINE, VitConfig, forward

logger = logging.getLogger("repshift")


def _setup_logging() -> None:
    level = os.environ.get("REPSHIFT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _build_config(synth: dict[str, Any]):
    if synth["kind"] == "vit":
        return VitConfig(
            image_size=tuple(synth.get("image_size", (64, 64))),
            patch_size=synth.get("patch_size", 8),
            depth=synth.get("depth", 6),
            width=synth.get("width", 64),
            heads=synth.get("heads", 4),
            num_classes=synth.get("num_classes", 2),
            use_class_token=synth.get("use_class_token", False),
            ln_eps=synth.get("ln_eps", 1e-6),
        )
    stages = tuple(StageSpec(**s) for s in synth.get(
        "stages", [{"channels": 8, "blocks": 1, "stride": 1},
                   {"channels": 16, "blocks": 1, "stride": 2}]
    ))
    return CnnConfig(
        image_size=tuple(synth.get("image_size", (16, 16))),
        stages=stages,
        num_classes=synth.get("num_classes", 2),
    )


def _resolve_fixture(spec: RunSpec, bundle: ModelBundle,
                     seed: int | None) -> PlantedFixture:
    fx = dict(spec.fixture or {})
    if "path" in fx:
        return load_fixture(fx["path"])
    fx_seed = seed if seed is not None else fx.get("seed", 0)
    n_items = fx.get("n_items", 40)
    if bundle.kind == "vit":
        config: VitConfig = bundle.config
        return make_planted_fixture(
            seed=fx_seed,
            n_items=n_items,
            grid=config.grid_shape,
            patch_size=config.patch_size,
            signal_patches=fx.get("signal_patches",
                                  max(1, config.num_patches // 8)),
            noise=fx.get("noise", 0.15),
            amplitude=fx.get("amplitude", 1.0),
            n_classes=config.num_classes,
        )
    kwargs: dict[str, Any] = {
        "seed": fx_seed, "n_items": n_items,
        "image_size": tuple(bundle.config.image_size),
        "noise": fx.get("noise", 0.05),
        "amplitude": fx.get("amplitude", 2.0),
        "n_classes": bundle.config.num_classes,
    }
    if "signal_rows" in fx:
        kwargs["signal_rows"] = tuple(fx["signal_rows"])
    if "signal_cols" in fx:
        kwargs["signal_cols"] = tuple(fx["signal_cols"])
    return make_cnn_planted_fixture(**kwargs)


def _resolve_bundle(spec: RunSpec, seed: int | None,
                    fixture: PlantedFixture | None = None) -> ModelBundle:
    if spec.bundle_path:
        return load_bundle(spec.bundle_path)
    if spec.synthetic is None:
        raise ConfigError("config names neither model.bundle nor model.synthetic")
    synth = spec.synthetic
    config = _build_config(synth)
    b_seed = seed if seed is not None else synth.get("seed", 0)
    if synth["kind"] == "vit":
        return make_synthetic_bundle(b_seed, config)
    return make_synthetic_cnn_bundle(b_seed, config, fixture=fixture)


def _load_all(args) -> tuple[RunSpec, ModelBundle, PlantedFixture]:
    spec = parse_run_config(args.config)
    if args.workers is not None:
        spec = replace(spec, workers=args.workers)
    # The CNN head calibration wants the fixture's signal geometry, so
    # resolve the fixture first against the configured architecture.
    if spec.bundle_path:
        bundle = load_bundle(spec.bundle_path)
        fixture = _resolve_fixture(spec, bundle, args.seed)
    else:
        if spec.synthetic is None:
            raise ConfigError(
                "config names neither model.bundle nor model.synthetic"
            )
        probe = _build_config(spec.synthetic)
        kind = spec.synthetic["kind"]
        pseudo = ModelBundle(tensors={}, config=probe, version=1, digest="")
        fixture = _resolve_fixture(spec, pseudo, args.seed)
        bundle = _resolve_bundle(spec, args.seed,
                                 fixture if kind == "cnn" else None)
    return spec, bundle, fixture


def _emit(payload: Any, args, rows: list[dict] | None = None) -> None:
    """Write the report; print a one-line summary to stdout."""
    if args.format == "csv":
        text = _to_csv(rows if rows is not None else [payload])
    else:
        text = json.dumps(payload, sort_keys=True, indent=2, default=_json_default)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _to_csv(rows: list[dict]) -> str:
    flat_rows = []
    for row in rows:
        flat = {}
        for key, value in row.items():
            if isinstance(value, (dict, list, tuple)):
                flat[key] = json.dumps(value, sort_keys=True,
                                       default=_json_default)
            else:
                flat[key] = value
        flat_rows.append(flat)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(flat_rows[0].keys()))
    writer.writeheader()
    writer.writerows(flat_rows)
    return buf.getvalue()


def _cmd_run(args) -> int:
    spec, bundle, fixture = _load_all(args)
    logits = []
    for image in fixture.images:
        if bundle.kind == "vit":
            out, _ = forward(Tensor(image), bundle, schedule=spec.schedule,
                             mode=spec.mode, attn_impl=spec.attn_impl,
                             tile_size=spec.tile_size)
        else:
            from .cnn import cnn_forward
            out, _ = cnn_forward(Tensor(image), bundle, plan=spec.cnn_plan)
        logits.append(out.to_numpy().tolist())
    preds = [int(np.argmax(l)) for l in logits]
    accuracy = float(np.mean([p == y for p, y in zip(preds, fixture.labels)]))
    report = {
        "schema_version": 1,
        "kind": bundle.kind,
        "mode": spec.mode,
        "attn_impl": spec.attn_impl,
        "n_items": fixture.n_items,
        "accuracy": accuracy,
        "predictions": preds,
        "labels": fixture.labels.tolist(),
        "logits": logits,
        "bundle_digest": bundle.digest,
    }
    rows = [{"item": i, "label": int(fixture.labels[i]), "prediction": preds[i],
             "logits": logits[i]} for i in range(fixture.n_items)]
    _emit(report, args, rows=rows)
    print(f"run: {fixture.n_items} items, accuracy {accuracy:.3f}")
    return 0


def _cmd_bench(args) -> int:
    spec, bundle, fixture = _load_all(args)
    bench = spec.bench
    report = run_benchmark(
        bundle, fixture, schedule=spec.schedule, mode=spec.mode,
        attn_impl=spec.attn_impl, tile_size=spec.tile_size,
        plan=spec.cnn_plan, batch=bench["batch"], repeats=bench["repeats"],
        warmup=bench["warmup"], workers=spec.workers,
    )
    if spec.mode != MODE_BASELINE or spec.cnn_plan:
        baseline = run_benchmark(
            bundle, fixture, mode=MODE_BASELINE, attn_impl=spec.attn_impl,
            tile_size=spec.tile_size, batch=bench["batch"],
            repeats=bench["repeats"], warmup=bench["warmup"],
            workers=spec.workers,
        )
        report = with_speedup(report, baseline,
                              label=f"baseline-{spec.attn_impl}")
    d = report.to_dict()
    _emit(d, args)
    speedup = f", speedup {report.speedup:.2f}x" if report.speedup else ""
    print(f"bench: {report.throughput_items_per_s:.2f} items/s, "
          f"{report.gflops_estimate:.2f} GFLOPs{speedup}")
    return 0


def _cmd_ablate(args) -> int:
    spec, bundle, fixture = _load_all(args)
    if args.axis == "grid":
        rows = run_ablation_grid(bundle, fixture, tile_size=spec.tile_size)
    else:
        rows = run_ablation(bundle, fixture, axis=args.axis,
                            tile_size=spec.tile_size)
    _emit(rows, args, rows=rows)
    print(f"ablate[{args.axis}]: {len(rows)} rows")
    return 0


def _cmd_reliability(args) -> int:
    spec, bundle, fixture = _load_all(args)
    result = run_reliability(bundle, fixture, layer=args.layer,
                             fraction=args.fraction, tile_size=spec.tile_size)
    payload = {"schema_version": 1, "layer": args.layer,
               "fraction": args.fraction, **result}
    _emit(payload, args)
    print(f"reliability layer {args.layer}: top {result['top_acc']:.3f} "
          f"vs bottom {result['bottom_acc']:.3f}")
    return 0


def _cmd_gen_fixture(args) -> int:
    spec, bundle, fixture = _load_all(args)
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    fixture_path = out_dir / "fixture.npz"
    save_fixture(fixture, fixture_path)
    bundle_path = out_dir / "model.rswc"
    save_bundle(bundle, bundle_path)
    print(f"gen-fixture: wrote {fixture_path} and {bundle_path}")
    return 0


def _cmd_inspect(args) -> int:
    bundle = load_bundle(args.bundle)
    from .model_io import config_to_dict
    payload = {
        "kind": bundle.kind,
        "version": bundle.version,
        "digest": bundle.digest,
        "config": config_to_dict(bundle.config),
        "tensors": {name: list(t.shape) for name, t in
                    sorted(bundle.tensors.items())},
    }
    _emit(payload, args)
    print(f"inspect: {args.bundle} ok, {len(bundle.tensors)} tensors, "
          f"digest {bundle.digest[:12]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repshift",
        description="inference engine with representation-shift token pruning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True):
        p.add_argument("--config", required=config_required,
                       help="YAML run config")
        p.add_argument("--out", help="report output path")
        p.add_argument("--seed", type=int, help="override fixture/model seed")
        p.add_argument("--workers", type=int, help="worker thread count")
        p.add_argument("--format", choices=("json", "csv"), default="json")

    common(sub.add_parser("run", help="evaluate a config over its fixture"))
    common(sub.add_parser("bench", help="throughput/FLOPs benchmark"))
    p = sub.add_parser("ablate", help="sweep scorer knobs")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=("op_choice", "metric", "prune_layer", "grid"))
    p = sub.add_parser("reliability", help="top/bottom retention probe")
    common(p)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--fraction", type=float, default=0.5)
    common(sub.add_parser("gen-fixture",
                          help="write fixture + synthetic bundle to --out"))
    p = sub.add_parser("inspect", help="print a weight container's manifest")
    p.add_argument("bundle", help="container path")
    p.add_argument("--out", help="report output path")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    return parser


_COMMANDS = {
    "run": _cmd_run,
    "bench": _cmd_bench,
    "ablate": _cmd_ablate,
    "reliability": _cmd_reliability,
    "gen-fixture": _cmd_gen_fixture,
    "inspect": _cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except EngineError as exc:
        print(json.dumps({"error": {"category": exc.category,
                                    "message": str(exc)}}),
              file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": {"category": "FileNotFound",
                                    "message": str(exc)}}),
              file=sys.stderr)
        return 1


def console_entry() -> None:
    sys.exit(main())
