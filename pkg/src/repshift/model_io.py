"""Weight container format, run-config format, and their loaders.

Container layout (version 1), little-endian throughout:

    bytes 0..4    magic ``RSWC``
    bytes 4..8    format version, uint32
    bytes 8..16   header length in bytes, uint64
    bytes 16..    UTF-8 JSON header (see below)
    ...           zero padding so the payload starts 64-byte aligned
    payload       raw float32 tensor data, each tensor 64-byte aligned

Header JSON keys: ``config`` (architecture, with a ``kind`` of ``vit`` or
``cnn``), ``tensors`` (name -> {dtype, shape, offset}, offsets relative to
the payload start), ``payload_size``, and ``digest`` (hex SHA-256 of the
payload region). Tensors are laid out in sorted-name order, which makes a
save -> load -> save round trip byte-identical.

Error categories on load: BadMagic, VersionUnsupported, ShapeMismatch
(missing/unexpected tensors or wrong shapes, naming the tensor), and
DigestMismatch (truncation or payload corruption).

Run configs are YAML files; every knob of the engine is named explicitly
and unknown keys are rejected rather than silently ignored.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping

import numpy as np
import yaml

from . import cnn as cnn_mod
from . import vit as vit_mod
from .cnn import CnnConfig, PrunePlanEntry, StageSpec
from .compression import PruneSchedule, ScheduleEntry
from .errors import (
    BadMagic,
    ConfigError,
    ContainerError,
    DigestMismatch,
    EngineError,
    ShapeMismatch,
    VersionUnsupported,
)
from .tensor import Tensor
from .vit import VitConfig

MAGIC = b"RSWC"
FORMAT_VERSION = 1
ALIGNMENT = 64
_PREFIX = struct.Struct("<4sIQ")  # magic, version, header length


@dataclass(frozen=True)
class ModelBundle:
    """Immutable weights plus architecture config."""

    tensors: Mapping[str, Tensor]
    config: VitConfig | CnnConfig
    version: int
    digest: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "tensors", MappingProxyType(dict(self.tensors)))

    def __deepcopy__(self, memo) -> "ModelBundle":
        # Immutable; sharing is safe (and keeps sklearn.clone cheap).
        return self

    def __copy__(self) -> "ModelBundle":
        return self

    @property
    def kind(self) -> str:
        return "vit" if isinstance(self.config, VitConfig) else "cnn"


def config_to_dict(config: VitConfig | CnnConfig) -> dict[str, Any]:
    if isinstance(config, VitConfig):
        return {
            "kind": "vit",
            "image_size": list(config.image_size),
            "patch_size": config.patch_size,
            "depth": config.depth,
            "width": config.width,
            "heads": config.heads,
            "num_classes": config.num_classes,
            "use_class_token": config.use_class_token,
            "ln_eps": config.ln_eps,
        }
    return {
        "kind": "cnn",
        "image_size": list(config.image_size),
        "stages": [
            {"channels": s.channels, "blocks": s.blocks, "stride": s.stride}
            for s in config.stages
        ],
        "num_classes": config.num_classes,
        "prune_plan": [
            {"stage": e.stage, "drop_rows": e.drop_rows,
             "drop_cols": e.drop_cols, "mode": e.mode}
            for e in config.prune_plan
        ],
    }


def config_from_dict(d: Mapping[str, Any]) -> VitConfig | CnnConfig:
    kind = d.get("kind")
    if kind == "vit":
        return VitConfig(
            image_size=tuple(d["image_size"]),
            patch_size=d["patch_size"],
            depth=d["depth"],
            width=d["width"],
            heads=d["heads"],
            num_classes=d["num_classes"],
            use_class_token=d.get("use_class_token", True),
            ln_eps=d.get("ln_eps", 1e-6),
        )
    if kind == "cnn":
        return CnnConfig(
            image_size=tuple(d["image_size"]),
            stages=tuple(StageSpec(**s) for s in d["stages"]),
            num_classes=d["num_classes"],
            prune_plan=tuple(PrunePlanEntry(**e)
                             for e in d.get("prune_plan", [])),
        )
    raise ContainerError(f"unknown architecture kind {kind!r}")


def _manifest(config: VitConfig | CnnConfig):
    if isinstance(config, VitConfig):
        return vit_mod.manifest(config)
    return cnn_mod.manifest(config)


def check_manifest(tensors: Mapping[str, Tensor],
                   config: VitConfig | CnnConfig) -> None:
    """Verify the tensor map against the architecture's manifest."""
    required, optional = _manifest(config)
    for name, shape in required.items():
        if name not in tensors:
            raise ShapeMismatch(f"missing tensor {name!r} (expected {shape})")
        got = tensors[name].shape
        if got != shape:
            raise ShapeMismatch(
                f"tensor {name!r} has shape {got}, expected {shape}"
            )
    for name, shape in optional.items():
        if name in tensors and tensors[name].shape != shape:
            raise ShapeMismatch(
                f"tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {shape}"
            )
    known = set(required) | set(optional)
    for name in tensors:
        if name not in known:
            raise ShapeMismatch(f"unexpected tensor {name!r}")


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def _build_payload(tensors: Mapping[str, Tensor]) -> tuple[bytes, dict[str, int]]:
    payload = bytearray()
    offsets: dict[str, int] = {}
    for name in sorted(tensors):
        off = _align(len(payload))
        payload.extend(b"\x00" * (off - len(payload)))
        offsets[name] = off
        payload.extend(
            np.ascontiguousarray(tensors[name].to_numpy(), dtype="<f4").tobytes()
        )
    return bytes(payload), offsets


def payload_digest(tensors: Mapping[str, Tensor]) -> str:
    payload, _ = _build_payload(tensors)
    return hashlib.sha256(payload).hexdigest()


def make_bundle(tensors: Mapping[str, Tensor],
                config: VitConfig | CnnConfig) -> ModelBundle:
    """Assemble and validate an in-memory bundle."""
    check_manifest(tensors, config)
    return ModelBundle(
        tensors=tensors,
        config=config,
        version=FORMAT_VERSION,
        digest=payload_digest(tensors),
    )


def save_bundle(bundle: ModelBundle, path: str | Path) -> None:
    check_manifest(bundle.tensors, bundle.config)
    payload, offsets = _build_payload(bundle.tensors)
    header = {
        "config": config_to_dict(bundle.config),
        "digest": hashlib.sha256(payload).hexdigest(),
        "payload_size": len(payload),
        "tensors": {
            name: {
                "dtype": "f32",
                "shape": list(bundle.tensors[name].shape),
                "offset": offsets[name],
            }
            for name in sorted(bundle.tensors)
        },
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    prefix = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes))
    pad = b"\x00" * (_align(len(prefix) + len(header_bytes))
                     - len(prefix) - len(header_bytes))
    Path(path).write_bytes(prefix + header_bytes + pad + payload)


def load_bundle(path: str | Path) -> ModelBundle:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(
            f"{path}: not a weight container (magic {data[:4]!r})"
        )
    if len(data) < _PREFIX.size:
        raise DigestMismatch(f"{path}: truncated before header")
    _, version, header_len = _PREFIX.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(
            f"{path}: container version {version}, supported: {FORMAT_VERSION}"
        )
    header_end = _PREFIX.size + header_len
    if len(data) < header_end:
        raise DigestMismatch(f"{path}: truncated inside header")
    try:
        header = json.loads(data[_PREFIX.size:header_end].decode("utf-8"))
        config_dict = header["config"]
        tensor_dir = header["tensors"]
        payload_size = header["payload_size"]
        digest = header["digest"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ContainerError(f"{path}: malformed header: {exc}") from exc

    base = _align(header_end)
    if len(data) < base + payload_size:
        raise DigestMismatch(
            f"{path}: truncated payload ({len(data) - base} of "
            f"{payload_size} bytes)"
        )
    payload = data[base:base + payload_size]
    actual = hashlib.sha256(payload).hexdigest()
    if actual != digest:
        raise DigestMismatch(
            f"{path}: payload digest {actual[:12]}… does not match header "
            f"{str(digest)[:12]}…"
        )

    config = config_from_dict(config_dict)
    tensors: dict[str, Tensor] = {}
    for name, info in tensor_dir.items():
        if info.get("dtype") != "f32":
            raise ContainerError(
                f"{path}: tensor {name!r} has unsupported dtype "
                f"{info.get('dtype')!r}"
            )
        shape = tuple(int(d) for d in info["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = int(info["offset"])
        if off < 0 or off + 4 * count > payload_size:
            raise ContainerError(
                f"{path}: tensor {name!r} extends past payload end"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=count,
                            offset=off).reshape(shape)
        tensors[name] = Tensor(arr)
    check_manifest(tensors, config)
    return ModelBundle(tensors=tensors, config=config, version=version,
                       digest=digest)


# ---------------------------------------------------------------------------
# Run configuration.
# ---------------------------------------------------------------------------

_RUN_KEYS = {"mode", "attn_impl", "tile_size", "workers"}
_MODEL_KEYS = {"bundle", "synthetic"}
_SYNTH_VIT_KEYS = {"kind", "seed", "image_size", "patch_size", "depth",
                   "width", "heads", "num_classes", "use_class_token",
                   "ln_eps"}
_SYNTH_CNN_KEYS = {"kind", "seed", "image_size", "stages", "num_classes"}
_SCHEDULE_KEYS = {"layers", "ratio", "count", "entries", "scorer", "metric",
                  "op", "ratio_basis"}
_ENTRY_KEYS = {"layer", "ratio", "count"}
_FIXTURE_KEYS = {"path", "seed", "n_items", "signal_patches", "noise",
                 "amplitude", "signal_rows", "signal_cols"}
_BENCH_KEYS = {"batch", "repeats", "warmup"}
_PLAN_KEYS = {"stage", "drop_rows", "drop_cols", "mode"}
_TOP_KEYS = {"run", "model", "schedule", "fixture", "bench", "cnn_plan"}


@dataclass(frozen=True)
class RunSpec:
    """Everything a CLI invocation needs, parsed from one config file."""

    mode: str = "baseline"
    attn_impl: str = "fused"
    tile_size: int = 64
    workers: int = 1
    bundle_path: str | None = None
    synthetic: dict[str, Any] | None = None
    schedule: PruneSchedule = field(default_factory=PruneSchedule)
    cnn_plan: tuple[PrunePlanEntry, ...] = ()
    fixture: dict[str, Any] | None = None
    bench: dict[str, Any] = field(
        default_factory=lambda: {"batch": 4, "repeats": 5, "warmup": 2}
    )


def _reject_unknown(section: Mapping[str, Any], allowed: set[str],
                    where: str) -> None:
    if not isinstance(section, Mapping):
        raise ConfigError(f"section {where!r} must be a mapping")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {where}: {sorted(unknown)}; "
            f"allowed: {sorted(allowed)}"
        )


def _build_schedule(section: Mapping[str, Any]) -> PruneSchedule:
    _reject_unknown(section, _SCHEDULE_KEYS, "schedule")
    entries: list[ScheduleEntry] = []
    if "entries" in section:
        if "layers" in section or "ratio" in section or "count" in section:
            raise ConfigError(
                "schedule: give either entries or layers+ratio/count, not both"
            )
        for item in section["entries"]:
            _reject_unknown(item, _ENTRY_KEYS, "schedule.entries[*]")
            entries.append(ScheduleEntry(layer=item["layer"],
                                         count=item.get("count"),
                                         ratio=item.get("ratio")))
    elif "layers" in section:
        ratio, count = section.get("ratio"), section.get("count")
        for layer in section["layers"]:
            entries.append(ScheduleEntry(layer=layer, count=count, ratio=ratio))
    elif any(k in section for k in ("ratio", "count")):
        raise ConfigError("schedule: ratio/count given without layers")
    kwargs: dict[str, Any] = {}
    for src, dst in (("scorer", "scorer"), ("metric", "metric"),
                     ("op", "op_choice"), ("ratio_basis", "ratio_basis")):
        if src in section:
            kwargs[dst] = section[src]
    return PruneSchedule(entries=tuple(entries), **kwargs)


def parse_run_config(path: str | Path) -> RunSpec:
    """Parse and validate a YAML run config; unknown keys are errors."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}: parse error{where}: {exc}") from exc
    if raw is None:
        raw = {}
    _reject_unknown(raw, _TOP_KEYS, "top level")
    try:
        return _interpret(raw)
    except ConfigError:
        raise
    except EngineError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid config: {exc!r}") from exc


def _interpret(raw: Mapping[str, Any]) -> RunSpec:
    spec_kwargs: dict[str, Any] = {}

    run = raw.get("run", {})
    _reject_unknown(run, _RUN_KEYS, "run")
    for key in ("mode", "attn_impl"):
        if key in run:
            spec_kwargs[key] = str(run[key])
    for key in ("tile_size", "workers"):
        if key in run:
            value = int(run[key])
            if value < 1:
                raise ConfigError(f"run.{key} must be >= 1, got {value}")
            spec_kwargs[key] = value

    model = raw.get("model", {})
    _reject_unknown(model, _MODEL_KEYS, "model")
    if "bundle" in model and "synthetic" in model:
        raise ConfigError("model: give either bundle or synthetic, not both")
    if "bundle" in model:
        spec_kwargs["bundle_path"] = str(model["bundle"])
    if "synthetic" in model:
        synth = dict(model["synthetic"])
        kind = synth.get("kind", "vit")
        allowed = _SYNTH_VIT_KEYS if kind == "vit" else _SYNTH_CNN_KEYS
        if kind not in ("vit", "cnn"):
            raise ConfigError(f"model.synthetic.kind must be vit/cnn, got {kind!r}")
        _reject_unknown(synth, allowed, "model.synthetic")
        for stage in synth.get("stages", []):
            _reject_unknown(stage, {"channels", "blocks", "stride"},
                            "model.synthetic.stages[*]")
        synth["kind"] = kind
        spec_kwargs["synthetic"] = synth

    if "schedule" in raw:
        spec_kwargs["schedule"] = _build_schedule(raw["schedule"] or {})

    if "cnn_plan" in raw:
        plan = []
        for item in raw["cnn_plan"] or []:
            _reject_unknown(item, _PLAN_KEYS, "cnn_plan[*]")
            plan.append(PrunePlanEntry(**item))
        spec_kwargs["cnn_plan"] = tuple(plan)

    if "fixture" in raw:
        fixture = dict(raw["fixture"] or {})
        _reject_unknown(fixture, _FIXTURE_KEYS, "fixture")
        spec_kwargs["fixture"] = fixture

    if "bench" in raw:
        bench = dict(raw["bench"] or {})
        _reject_unknown(bench, _BENCH_KEYS, "bench")
        merged = {"batch": 4, "repeats": 5, "warmup": 2}
        merged.update({k: int(v) for k, v in bench.items()})
        if merged["repeats"] < 1 or merged["batch"] < 1 or merged["warmup"] < 0:
            raise ConfigError(f"bench: invalid values {merged}")
        spec_kwargs["bench"] = merged

    return RunSpec(**spec_kwargs)
