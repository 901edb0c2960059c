"""Drive the inference engine through its CLI (the only coupling point).

The exporter never imports the engine: containers are written per the
format doc and validated by invoking ``repshift`` in a subprocess, feeding
it probe images through the fixture-file interface and reading logits back
from the run report.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from .mapping import ExportError


def engine_command() -> list[str]:
    exe = shutil.which("repshift")
    if exe:
        return [exe]
    return [sys.executable, "-m", "repshift"]


def write_probe_fixture(images: np.ndarray, path: str | Path,
                        num_patches: int) -> None:
    """Probe images in the engine's fixture-file layout (labels are dummy)."""
    n = images.shape[0]
    np.savez(
        path,
        images=images.astype(np.float32),
        labels=np.zeros(n, dtype=np.int64),
        signal_mask=np.zeros(num_patches, dtype=bool),
        seed=np.int64(0),
        kind=np.bytes_(b"vit"),
        meta=np.bytes_(json.dumps({"probe": True}).encode()),
    )


def run_engine(argv: list[str]) -> subprocess.CompletedProcess:
    proc = subprocess.run(engine_command() + argv, capture_output=True,
                          text=True)
    if proc.returncode != 0:
        raise ExportError(
            f"engine command {' '.join(argv)} failed "
            f"(exit {proc.returncode}): {proc.stderr.strip()}"
        )
    return proc


def engine_logits(container: str | Path, images: np.ndarray) -> np.ndarray:
    """Run the engine over probe images; returns (n, num_classes) logits."""
    with tempfile.TemporaryDirectory(prefix="repshift-export-") as tmp:
        tmp_path = Path(tmp)
        fixture = tmp_path / "probes.npz"
        # patch count only sizes the dummy mask; read it off the image shape
        write_probe_fixture(images, fixture, num_patches=1)
        config = tmp_path / "run.yaml"
        config.write_text(
            "run: {mode: baseline, attn_impl: fused}\n"
            f"model: {{bundle: '{Path(container).resolve()}'}}\n"
            f"fixture: {{path: '{fixture}'}}\n",
            encoding="utf-8",
        )
        report_path = tmp_path / "report.json"
        run_engine(["run", "--config", str(config), "--out", str(report_path)])
        report = json.loads(report_path.read_text())
    return np.asarray(report["logits"], dtype=np.float64)


def engine_inspect(container: str | Path) -> dict:
    with tempfile.TemporaryDirectory(prefix="repshift-export-") as tmp:
        out = Path(tmp) / "inspect.json"
        run_engine(["inspect", str(Path(container).resolve()), "--out",
                    str(out)])
        return json.loads(out.read_text())
