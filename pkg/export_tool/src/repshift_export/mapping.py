"""Declarative tensor-name mapping from source checkpoints to the container.

A mapping table is a YAML file of entries ``{target, source, transform}``;
entries marked ``per_block: true`` carry an ``{i}`` placeholder expanded
over the model depth, and ``optional: true`` entries are skipped when the
source tensor is absent (the engine treats absent optional tensors as
zero). Every required target must be produced from exactly one source.

Transforms:
  copy        use as-is
  transpose   swap the two axes (torch Linear stores (out, in); the
              container stores (in, out))
  conv_patch  (out, 3, P, P) conv kernel -> (P*P*3, out) patch matrix,
              pixel rows flattened (row, col, channel)
  drop_batch  strip a leading broadcast axis of extent 1
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .container_writer import expected_vit_tensors

TRANSFORMS = ("copy", "transpose", "conv_patch", "drop_batch")


class ExportError(ValueError):
    pass


@dataclass(frozen=True)
class MappingEntry:
    target: str
    source: str
    transform: str = "copy"
    per_block: bool = False
    optional: bool = False

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ExportError(
                f"unknown transform {self.transform!r} for {self.target!r}"
            )


@dataclass(frozen=True)
class ExportManifest:
    """What was exported: source id, mapping, target config, result digest."""

    source_id: str
    entries: tuple[MappingEntry, ...]
    target_config: dict[str, Any]
    digest: str | None = None
    probe_max_error: float | None = None


def load_mapping(path: str | Path) -> tuple[MappingEntry, ...]:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    entries = []
    for item in raw["entries"]:
        unknown = set(item) - {"target", "source", "transform", "per_block",
                               "optional"}
        if unknown:
            raise ExportError(f"unknown mapping keys {sorted(unknown)}")
        entries.append(MappingEntry(**item))
    return tuple(entries)


def default_mapping_path() -> Path:
    return Path(__file__).parent / "mappings" / "torch_vit.yaml"


def _apply(transform: str, arr: np.ndarray, target: str) -> np.ndarray:
    if transform == "copy":
        return arr
    if transform == "transpose":
        if arr.ndim != 2:
            raise ExportError(
                f"{target!r}: transpose needs a 2-D source, got {arr.shape}"
            )
        return arr.T
    if transform == "conv_patch":
        if arr.ndim != 4:
            raise ExportError(
                f"{target!r}: conv_patch needs a 4-D kernel, got {arr.shape}"
            )
        out, cin, kh, kw = arr.shape
        return arr.transpose(2, 3, 1, 0).reshape(kh * kw * cin, out)
    if transform == "drop_batch":
        if arr.shape[0] != 1:
            raise ExportError(
                f"{target!r}: drop_batch needs a leading axis of 1, "
                f"got {arr.shape}"
            )
        return arr[0]
    raise ExportError(f"unknown transform {transform!r}")


def expand_entries(entries: tuple[MappingEntry, ...],
                   depth: int) -> list[MappingEntry]:
    expanded: list[MappingEntry] = []
    for entry in entries:
        if entry.per_block:
            for i in range(depth):
                expanded.append(MappingEntry(
                    target=entry.target.format(i=i),
                    source=entry.source.format(i=i),
                    transform=entry.transform,
                    optional=entry.optional,
                ))
        else:
            expanded.append(entry)
    return expanded


def apply_mapping(
    source_tensors: Mapping[str, np.ndarray],
    entries: tuple[MappingEntry, ...],
    config: dict[str, Any],
) -> dict[str, np.ndarray]:
    """Produce the container tensor map, validating against the manifest."""
    required, optional = expected_vit_tensors(config)
    known = dict(required)
    known.update(optional)

    out: dict[str, np.ndarray] = {}
    for entry in expand_entries(entries, config["depth"]):
        if entry.target in out:
            raise ExportError(f"target {entry.target!r} mapped twice")
        if entry.target not in known:
            # e.g. cls_token when the config has no class token
            if entry.optional and entry.source not in source_tensors:
                continue
            raise ExportError(
                f"target {entry.target!r} is not part of the container "
                f"manifest for this config"
            )
        if entry.source not in source_tensors:
            if entry.optional or entry.target in optional:
                continue
            raise ExportError(
                f"source tensor {entry.source!r} (for {entry.target!r}) "
                f"missing from the checkpoint"
            )
        arr = np.asarray(source_tensors[entry.source], dtype=np.float32)
        arr = _apply(entry.transform, arr, entry.target)
        want = known[entry.target]
        if tuple(arr.shape) != want:
            raise ExportError(
                f"target {entry.target!r}: shape {tuple(arr.shape)} after "
                f"{entry.transform!r}, manifest expects {want}"
            )
        out[entry.target] = arr

    missing = [name for name in required if name not in out]
    if missing:
        raise ExportError(f"unmapped required tensor(s): {missing}")
    return out
