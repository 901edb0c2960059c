"""Checkpoint converter and toy-model trainer for the repshift engine.

Couples to the engine only through its external interfaces: the documented
weight-container format (written by an independent writer here) and the
``repshift`` CLI (probe validation, fixture files).
"""

from .container_writer import ContainerWriteError, write_container
from .export import export_checkpoint, export_model, probe_check
from .mapping import (
    ExportError,
    ExportManifest,
    MappingEntry,
    apply_mapping,
    default_mapping_path,
    load_mapping,
)
from .reference_model import RefVitConfig, ReferenceVit, save_checkpoint
from .training import TaskSpec, make_task_data, train_toy_model

__version__ = "0.1.0"
