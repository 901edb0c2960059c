"""scikit-learn style front end for the inference engine.

The engine is inference-only (the pruning criterion is training-free), so
``fit`` just validates parameters and resolves the bundle; it exists so the
classifier composes with sklearn pipelines, ``clone``, and grid search over
pruning knobs (schedule, metric, operation choice, attention path).

Input convention: a batch of images as one float array of shape
(n_samples, H, W, 3) matching the bundle's configured input size.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .cnn import PrunePlanEntry, cnn_forward
from .compression import PruneSchedule
from .errors import DimensionError
from .model_io import ModelBundle, load_bundle
from .tensor import Tensor
from .vit import IMPL_FUSED, MODE_BASELINE, forward


def check_image_batch(X, image_size: tuple[int, int]) -> np.ndarray:
    """Validate and convert a batch of images to float32 (n, H, W, 3)."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    h, w = image_size
    if arr.ndim != 4 or arr.shape[1:] != (h, w, 3):
        raise DimensionError(
            f"expected images of shape (n, {h}, {w}, 3), got {arr.shape}"
        )
    if not np.isfinite(arr).all():
        raise DimensionError("images contain NaN/Inf values")
    return arr


class TokenPruningClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier backed by the pruning inference engine.

    Parameters mirror the engine's run configuration: ``bundle`` is a
    ``ModelBundle`` or a path to a weight container; ``schedule`` prunes
    transformer tokens (ViT bundles); ``prune_plan`` prunes grid lines or
    tokens (CNN bundles). All parameters are plain constructor attributes,
    so ``get_params``/``set_params``/``clone`` behave as sklearn expects.
    """

    def __init__(
        self,
        bundle=None,
        schedule: PruneSchedule | None = None,
        prune_plan: tuple[PrunePlanEntry, ...] = (),
        mode: str = MODE_BASELINE,
        attn_impl: str = IMPL_FUSED,
        tile_size: int = 64,
    ):
        self.bundle = bundle
        self.schedule = schedule
        self.prune_plan = prune_plan
        self.mode = mode
        self.attn_impl = attn_impl
        self.tile_size = tile_size

    def fit(self, X=None, y=None):
        """Resolve and validate parameters; no training happens."""
        if self.bundle is None:
            raise ValueError("bundle is required (ModelBundle or path)")
        if isinstance(self.bundle, ModelBundle):
            self.bundle_ = self.bundle
        else:
            self.bundle_ = load_bundle(self.bundle)
        self.schedule_ = (self.schedule if self.schedule is not None
                          else PruneSchedule())
        self.classes_ = np.arange(self.bundle_.config.num_classes)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "bundle_"):
            raise ValueError("this classifier is not fitted yet; call fit()")

    def decision_function(self, X) -> np.ndarray:
        """Per-class logits, shape (n_samples, num_classes)."""
        self._check_fitted()
        images = check_image_batch(X, self.bundle_.config.image_size)
        out = np.empty((images.shape[0], self.classes_.size), dtype=np.float32)
        for i, image in enumerate(images):
            if self.bundle_.kind == "vit":
                logits, _ = forward(
                    Tensor(image), self.bundle_, schedule=self.schedule_,
                    mode=self.mode, attn_impl=self.attn_impl,
                    tile_size=self.tile_size,
                )
            else:
                logits, _ = cnn_forward(Tensor(image), self.bundle_,
                                        plan=tuple(self.prune_plan))
            out[i] = logits.to_numpy()
        return out

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def score(self, X, y) -> float:
        return float((self.predict(X) == np.asarray(y)).mean())
