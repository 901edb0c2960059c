"""Shared test fixtures: standard planted setups and random bundles."""

from __future__ import annotations

import numpy as np
import pytest

from repshift import (
    CnnConfig,
    StageSpec,
    Tensor,
    VitConfig,
    make_bundle,
    make_cnn_planted_fixture,
    make_planted_fixture,
    make_synthetic_bundle,
    make_synthetic_cnn_bundle,
)
from repshift.vit import manifest as vit_manifest
from repshift.cnn import manifest as cnn_manifest


def random_vit_bundle(seed: int, config: VitConfig, scale: float = 0.2):
    """Fully random gaussian weights honoring the manifest (no structure)."""
    rng = np.random.default_rng(seed)
    required, optional = vit_manifest(config)
    tensors = {}
    for name, shape in required.items():
        arr = (scale * rng.standard_normal(shape)).astype(np.float32)
        if name.endswith((".g", "norm.g")):
            arr = np.ones(shape, dtype=np.float32)
        tensors[name] = Tensor(arr)
    return make_bundle(tensors, config)


def random_cnn_bundle(seed: int, config: CnnConfig, scale: float = 0.3):
    rng = np.random.default_rng(seed)
    required, _ = cnn_manifest(config)
    tensors = {}
    for name, shape in required.items():
        if name.endswith(".g"):
            arr = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
            arr = (scale * rng.standard_normal(shape) / np.sqrt(fan_in)).astype(
                np.float32
            )
        tensors[name] = Tensor(arr)
    return make_bundle(tensors, config)


STD_VIT_CONFIG = VitConfig(
    image_size=(64, 64), patch_size=8, depth=6, width=64, heads=4,
    num_classes=2, use_class_token=False,
)

STD_CNN_CONFIG = CnnConfig(
    image_size=(16, 16),
    stages=(StageSpec(channels=8, blocks=1, stride=1),
            StageSpec(channels=16, blocks=1, stride=2)),
    num_classes=2,
)


@pytest.fixture(scope="session")
def vit_bundle():
    return make_synthetic_bundle(1, STD_VIT_CONFIG)


@pytest.fixture(scope="session")
def vit_fixture():
    return make_planted_fixture(seed=2, n_items=40, grid=(8, 8), patch_size=8,
                                signal_patches=8)


@pytest.fixture(scope="session")
def cnn_fixture():
    return make_cnn_planted_fixture(seed=3, n_items=40)


@pytest.fixture(scope="session")
def cnn_bundle(cnn_fixture):
    return make_synthetic_cnn_bundle(4, STD_CNN_CONFIG, fixture=cnn_fixture)
