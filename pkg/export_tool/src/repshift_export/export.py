"""Checkpoint export with engine cross-validation.

A converted container is only trusted after a probe check: the reference
model and the engine evaluate the same random images and their logits must
agree within 1e-3 max abs error (float32 accumulation-order differences
legitimately exceed kernel-level tolerances at depth, but 1e-3 catches any
layout or transform mistake loudly).
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .container_writer import write_container
from .engine_cli import engine_logits
from .mapping import (
    ExportError,
    ExportManifest,
    MappingEntry,
    apply_mapping,
    default_mapping_path,
    load_mapping,
)
from .reference_model import RefVitConfig, ReferenceVit, load_checkpoint

PROBE_TOLERANCE = 1e-3


def state_dict_to_arrays(state_dict: dict) -> dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy()
            for name, tensor in state_dict.items()}


def make_probe_images(config: RefVitConfig, n: int = 10,
                      seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    h, w = config.image_size
    return rng.standard_normal((n, h, w, 3)).astype(np.float32)


def probe_check(model: ReferenceVit, container: str | Path,
                n_probes: int = 10, seed: int = 0) -> float:
    """Max abs logit disagreement between the reference model and engine."""
    images = make_probe_images(model.cfg, n=n_probes, seed=seed)
    with torch.no_grad():
        want = model(torch.from_numpy(images)).numpy().astype(np.float64)
    got = engine_logits(container, images)
    if got.shape != want.shape:
        raise ExportError(
            f"probe check: engine returned logits of shape {got.shape}, "
            f"reference produced {want.shape}"
        )
    err = float(np.abs(got - want).max())
    if err > PROBE_TOLERANCE:
        raise ExportError(
            f"probe check failed: max |engine - reference| = {err:.3e} "
            f"exceeds {PROBE_TOLERANCE:.0e}; the mapping or container is wrong"
        )
    return err


def export_checkpoint(
    checkpoint_path: str | Path,
    out_path: str | Path,
    mapping_path: str | Path | None = None,
    run_probe_check: bool = True,
    entries: tuple[MappingEntry, ...] | None = None,
) -> ExportManifest:
    """Convert a reference checkpoint into a weight container."""
    cfg, state_dict = load_checkpoint(checkpoint_path)
    if entries is None:
        entries = load_mapping(mapping_path or default_mapping_path())
    engine_config = cfg.engine_config()
    tensors = apply_mapping(state_dict_to_arrays(state_dict), entries,
                            engine_config)
    digest = write_container(tensors, engine_config, out_path)
    manifest = ExportManifest(
        source_id=str(checkpoint_path),
        entries=entries,
        target_config=engine_config,
        digest=digest,
    )
    if run_probe_check:
        model = ReferenceVit(cfg)
        model.load_state_dict(state_dict)
        model.eval()
        err = probe_check(model, out_path)
        manifest = replace(manifest, probe_max_error=err)
    return manifest


def export_model(model: ReferenceVit, out_path: str | Path,
                 run_probe_check: bool = True) -> ExportManifest:
    """Export an in-memory reference model (used by the trainer)."""
    entries = load_mapping(default_mapping_path())
    engine_config = model.cfg.engine_config()
    tensors = apply_mapping(state_dict_to_arrays(model.state_dict()),
                            entries, engine_config)
    digest = write_container(tensors, engine_config, out_path)
    manifest = ExportManifest(
        source_id="<in-memory>",
        entries=entries,
        target_config=engine_config,
        digest=digest,
    )
    if run_probe_check:
        model.eval()
        err = probe_check(model, out_path)
        manifest = replace(manifest, probe_max_error=err)
    return manifest
