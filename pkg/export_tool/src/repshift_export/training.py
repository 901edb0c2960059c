"""Train a tiny reference ViT on a synthetic separable task and export it.

The task plants a per-class full-image pattern under gaussian noise, so a
small model separates it quickly. Training is deterministic for a fixed
seed (single-threaded CPU, seeded generators): the same invocation exports
byte-identical containers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .engine_cli import write_probe_fixture
from .export import export_model
from .mapping import ExportError, ExportManifest
from .reference_model import RefVitConfig, ReferenceVit


@dataclass(frozen=True)
class TaskSpec:
    n_classes: int = 2
    n_items: int = 128
    image_size: tuple[int, int] = (16, 16)
    patch_size: int = 4
    width: int = 32
    depth: int = 2
    heads: int = 4
    use_class_token: bool = True
    noise: float = 0.3
    signal: float = 1.0
    steps: int = 300
    lr: float = 3e-3
    batch_size: int = 32
    target_accuracy: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if self.n_classes < 1:
            raise ExportError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.n_items < self.n_classes:
            raise ExportError("need at least one item per class")
        if self.steps < 1 or self.batch_size < 1:
            raise ExportError("steps and batch_size must be >= 1")


def make_task_data(seed: int, spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Separable images: class pattern + noise, labels round-robin."""
    rng = np.random.default_rng(seed)
    h, w = spec.image_size
    patterns = rng.standard_normal((spec.n_classes, h, w, 3))
    patterns /= np.sqrt((patterns ** 2).mean(axis=(1, 2, 3), keepdims=True))
    labels = (np.arange(spec.n_items) % spec.n_classes).astype(np.int64)
    images = rng.normal(0.0, spec.noise,
                        (spec.n_items, h, w, 3)).astype(np.float32)
    images += (spec.signal * patterns[labels]).astype(np.float32)
    return images, labels


def train_toy_model(seed: int, spec: TaskSpec,
                    out_dir: str | Path) -> dict:
    """Train to the target accuracy, export container + task data.

    Returns a summary dict with paths, final train accuracy, and the
    export manifest. Raises ExportError on convergence failure.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, labels = make_task_data(seed, spec)

    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)  # keeps CPU training bit-deterministic
    try:
        torch.manual_seed(seed)
        cfg = RefVitConfig(
            image_size=spec.image_size, patch_size=spec.patch_size,
            depth=spec.depth, width=spec.width, heads=spec.heads,
            num_classes=spec.n_classes, use_class_token=spec.use_class_token,
        )
        model = ReferenceVit(cfg)
        optimizer = torch.optim.Adam(model.parameters(), lr=spec.lr)
        x = torch.from_numpy(images)
        y = torch.from_numpy(labels)
        order_gen = torch.Generator().manual_seed(seed + 1)

        model.train()
        for step in range(spec.steps):
            idx = torch.randperm(spec.n_items, generator=order_gen)
            idx = idx[:spec.batch_size]
            logits = model(x[idx])
            loss = F.cross_entropy(logits, y[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        model.eval()
        with torch.no_grad():
            accuracy = float((model(x).argmax(dim=1) == y).float().mean())
    finally:
        torch.set_num_threads(n_threads)

    if accuracy < spec.target_accuracy:
        raise ExportError(
            f"convergence failure: train accuracy {accuracy:.3f} below "
            f"target {spec.target_accuracy:.2f} after {spec.steps} steps"
        )

    container = out / "model.rswc"
    manifest: ExportManifest = export_model(model, container)
    data_path = out / "task.npz"
    _save_task(images, labels, cfg, seed, data_path)
    summary = {
        "container": str(container),
        "task_data": str(data_path),
        "train_accuracy": accuracy,
        "digest": manifest.digest,
        "probe_max_error": manifest.probe_max_error,
        "spec": {**asdict(spec), "image_size": list(spec.image_size)},
        "seed": seed,
    }
    (out / "training.json").write_text(json.dumps(summary, indent=2,
                                                  sort_keys=True))
    return summary


def _save_task(images: np.ndarray, labels: np.ndarray, cfg: RefVitConfig,
               seed: int, path: Path) -> None:
    # engine fixture layout, so `repshift run` can evaluate the task directly
    np.savez(
        path,
        images=images,
        labels=labels,
        signal_mask=np.zeros(cfg.num_patches, dtype=bool),
        seed=np.int64(seed),
        kind=np.bytes_(b"vit"),
        meta=np.bytes_(json.dumps({"task": "toy-train"}).encode()),
    )


def write_probes(images: np.ndarray, path: str | Path) -> None:
    write_probe_fixture(images, path, num_patches=1)
