"""Planted fixtures and synthetic model bundles.

A planted fixture is an image set where all class evidence sits in a known
patch subset; background patches are pure noise with zero class
correlation. Paired with a synthetic bundle built to amplify the class
directions, it gives ground truth for importance scoring: any sane scorer
must rank signal tokens above background tokens.

Synthetic ViT construction (deterministic per seed):

* Two fixed orthonormal pixel templates (shared with the fixture
  generator) are mapped by the patch embedding onto two orthonormal
  feature-space class directions e_0, e_1.
* Positional embeddings are small noise with the class directions
  projected out, so background tokens stay off those axes.
* Each block's MLP dedicates one hidden unit per class: read direction
  e_c scaled up, write-back direction e_c. After layer norm a signal
  token projects ~sqrt(C) onto its class axis while background tokens
  project ~N(0, 1), so the class detectors fire hard only on signal
  tokens. That makes the MLP-branch representation shift of signal tokens
  a multiple of the background's, at every depth.
* Attention projections are weak orthogonal maps with an identity-like
  value/output path, so tokens mix gently; the head reads the class axes.

The toy CNN keeps it simpler: amplitude separation. Convolutions scale
with input magnitude and the per-channel affine does not renormalize, so
high-amplitude signal regions shift more than background noise. The head
is calibrated from two clean class probes (nearest-centroid readout).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .cnn import CnnConfig, conv2d_raw
from .errors import ConfigError, DimensionError
from .model_io import ModelBundle, make_bundle
from .tensor import Tensor
from .vit import VitConfig
from . import cnn as cnn_mod

# Pixel-template generation is tied to a fixed seed so fixtures and bundles
# agree on the class patterns regardless of their own seeds.
_TEMPLATE_SEED = 7_000_003

# Synthetic ViT gains; values picked empirically so a 2-class planted task
# is cleanly separable and signal tokens dominate the MLP shift. The
# embed gain/noise ratio fixes the post-layer-norm class-axis projection of
# background tokens at ~N(0, 1) versus ~sqrt(C) for signal tokens; the -3
# detector bias then silences background regardless of the fixture's noise
# level (both channels scale with it).
_EMBED_GAIN = 2.0
_EMBED_NOISE = 2.0
_POS_SCALE = 0.05
_ATTN_SCALE = 0.1
_VALUE_GAIN = 0.3
# The shift is ||F(x) - x||, so a background token scores ~||x|| (its MLP
# output is near zero). Signal tokens must overshoot that: the detector
# write gain makes their MLP output several times the token norm.
_MLP_READ_GAIN = 1.0
_MLP_WRITE_GAIN = 3.0
_MLP_BG_SCALE = 0.02
_MLP_DETECTOR_BIAS = -3.0

_CNN_CONV_GAIN = 1.2
_HEAD_GAIN = 1.0


@dataclass(frozen=True)
class PlantedFixture:
    """Images plus labels with class evidence in a known token subset."""

    images: np.ndarray      # (n, H, W, 3) float32
    labels: np.ndarray      # (n,) int64
    signal_mask: np.ndarray  # vit: (num_patches,) bool; cnn: (H, W) bool
    seed: int
    kind: str               # "vit" | "cnn"
    meta: dict[str, Any]

    @property
    def n_items(self) -> int:
        return int(self.images.shape[0])


def class_pixel_templates(patch_size: int, n_classes: int = 2) -> np.ndarray:
    """Fixed orthonormal pixel patterns, one per class: (K, P*P*3)."""
    dim = patch_size * patch_size * 3
    if n_classes > dim:
        raise DimensionError(f"cannot fit {n_classes} templates in dim {dim}")
    rng = np.random.default_rng(_TEMPLATE_SEED)
    raw = rng.standard_normal((dim, n_classes))
    q, _ = np.linalg.qr(raw)
    return np.ascontiguousarray(q.T, dtype=np.float32)


def class_feature_directions(width: int, n_classes: int = 2) -> np.ndarray:
    """Fixed orthonormal feature-space class axes: (K, C)."""
    rng = np.random.default_rng(_TEMPLATE_SEED + 1)
    raw = rng.standard_normal((width, n_classes))
    q, _ = np.linalg.qr(raw)
    return np.ascontiguousarray(q.T, dtype=np.float32)


def make_planted_fixture(
    seed: int,
    n_items: int = 40,
    grid: tuple[int, int] = (8, 8),
    patch_size: int = 8,
    signal_patches: int = 8,
    noise: float = 0.15,
    amplitude: float = 1.0,
    n_classes: int = 2,
) -> PlantedFixture:
    """Patch-grid fixture for the ViT models. Labels alternate classes."""
    gh, gw = grid
    n_patches = gh * gw
    if not (1 <= signal_patches <= n_patches):
        raise ConfigError(
            f"signal_patches must be in [1, {n_patches}], got {signal_patches}"
        )
    rng = np.random.default_rng(seed)
    templates = class_pixel_templates(patch_size, n_classes)
    positions = np.sort(rng.choice(n_patches, size=signal_patches,
                                   replace=False))
    mask = np.zeros(n_patches, dtype=bool)
    mask[positions] = True

    h, w = gh * patch_size, gw * patch_size
    images = rng.normal(0.0, noise, size=(n_items, h, w, 3)).astype(np.float32)
    labels = (np.arange(n_items) % n_classes).astype(np.int64)
    for i in range(n_items):
        pattern = (amplitude * templates[labels[i]]).reshape(
            patch_size, patch_size, 3
        )
        for p in positions:
            r, c = divmod(int(p), gw)
            r0, c0 = r * patch_size, c * patch_size
            images[i, r0:r0 + patch_size, c0:c0 + patch_size] += pattern
    return PlantedFixture(
        images=images, labels=labels, signal_mask=mask, seed=seed, kind="vit",
        meta={"grid": [gh, gw], "patch_size": patch_size,
              "signal_patches": int(signal_patches), "noise": noise,
              "amplitude": amplitude, "n_classes": n_classes},
    )


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """(rows, cols) matrix with orthonormal columns (rows >= cols) or rows."""
    raw = rng.standard_normal((rows, cols))
    if rows >= cols:
        q, _ = np.linalg.qr(raw)
    else:
        q, _ = np.linalg.qr(raw.T)
        q = q.T
    return np.ascontiguousarray(q, dtype=np.float32)


def make_synthetic_bundle(seed: int, config: VitConfig) -> ModelBundle:
    """Deterministic ViT weights that amplify class-direction tokens."""
    rng = np.random.default_rng(seed)
    c, hid = config.width, config.hidden_width
    k = config.num_classes
    dirs = class_feature_directions(c, k)  # (K, C)
    templates = class_pixel_templates(config.patch_size, k)

    tensors: dict[str, np.ndarray] = {}
    # Noise-mapping part of the embedding is kept off the class axes; the
    # only route onto them is genuine template content in the pixels.
    pe = _EMBED_NOISE * _orthogonal(rng, config.patch_dim, c)
    for cls in range(k):
        pe -= np.outer(pe @ dirs[cls], dirs[cls])
    for cls in range(k):
        pe += _EMBED_GAIN * np.outer(templates[cls], dirs[cls])
    tensors["patch_embed.w"] = pe
    tensors["patch_embed.b"] = np.zeros(c, dtype=np.float32)

    pos = _POS_SCALE * rng.standard_normal((config.seq_len, c))
    for cls in range(k):
        pos -= np.outer(pos @ dirs[cls], dirs[cls])  # keep background off axes
    tensors["pos_embed"] = pos
    if config.use_class_token:
        tensors["cls_token"] = _POS_SCALE * rng.standard_normal((1, c))

    ones, zeros = np.ones(c, dtype=np.float32), np.zeros(c, dtype=np.float32)
    # Value path passes only the complement of the class axes: tokens still
    # exchange content, but class evidence cannot leak into background
    # tokens (that would defeat the planted ground truth).
    off_class = np.eye(c, dtype=np.float32)
    for cls in range(k):
        off_class -= np.outer(dirs[cls], dirs[cls])
    for i in range(config.depth):
        p = f"blocks.{i}"
        tensors[f"{p}.ln1.g"] = ones
        tensors[f"{p}.ln1.b"] = zeros
        qkv = np.concatenate([
            _ATTN_SCALE * _orthogonal(rng, c, c),
            _ATTN_SCALE * _orthogonal(rng, c, c),
            _VALUE_GAIN * off_class,
        ], axis=1)
        tensors[f"{p}.attn.qkv_w"] = qkv
        tensors[f"{p}.attn.out_w"] = _VALUE_GAIN * np.eye(c, dtype=np.float32)
        tensors[f"{p}.ln2.g"] = ones
        tensors[f"{p}.ln2.b"] = zeros
        w1 = _MLP_BG_SCALE * rng.standard_normal((c, hid)) / np.sqrt(c)
        w2 = _MLP_BG_SCALE * rng.standard_normal((hid, c)) / np.sqrt(hid)
        b1 = np.zeros(hid, dtype=np.float32)
        for cls in range(k):
            w1[:, cls] = _MLP_READ_GAIN * dirs[cls]
            w2[cls, :] = _MLP_WRITE_GAIN * dirs[cls]
            b1[cls] = _MLP_DETECTOR_BIAS
        tensors[f"{p}.mlp.w1"] = w1
        tensors[f"{p}.mlp.b1"] = b1
        tensors[f"{p}.mlp.w2"] = w2
        tensors[f"{p}.mlp.b2"] = zeros

    tensors["norm.g"] = ones
    tensors["norm.b"] = zeros
    tensors["head.w"] = _HEAD_GAIN * np.ascontiguousarray(dirs.T)
    tensors["head.b"] = np.zeros(k, dtype=np.float32)

    return make_bundle(
        {name: Tensor(arr.astype(np.float32)) for name, arr in tensors.items()},
        config,
    )


def make_cnn_planted_fixture(
    seed: int,
    n_items: int = 40,
    image_size: tuple[int, int] = (16, 16),
    signal_rows: tuple[int, int] = (5, 11),
    signal_cols: tuple[int, int] = (5, 11),
    noise: float = 0.05,
    amplitude: float = 2.0,
    n_classes: int = 2,
) -> PlantedFixture:
    """Grid fixture: a high-amplitude class pattern in a known pixel block."""
    h, w = image_size
    r0, r1 = signal_rows
    c0, c1 = signal_cols
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ConfigError(
            f"signal region rows {signal_rows} cols {signal_cols} outside "
            f"image {image_size}"
        )
    rng = np.random.default_rng(seed)
    tpl_rng = np.random.default_rng(_TEMPLATE_SEED + 2)
    # Class patterns are constant color blocks, sign-opposed in pairs.
    # Constant patterns are invariant to the stride-phase shifts that line
    # pruning introduces (a strided conv resamples the grid after lines are
    # removed; any pixel-level random pattern would decorrelate), and +c/-c
    # drive disjoint ReLU half-spaces so the pooled class features separate.
    colors = tpl_rng.standard_normal(((n_classes + 1) // 2, 3))
    colors /= np.sqrt((colors ** 2).sum(axis=1, keepdims=True))
    patterns = np.empty((n_classes, r1 - r0, c1 - c0, 3))
    for cls in range(n_classes):
        sign = 1.0 if cls % 2 == 0 else -1.0
        patterns[cls] = sign * colors[cls // 2]

    images = rng.normal(0.0, noise, size=(n_items, h, w, 3)).astype(np.float32)
    labels = (np.arange(n_items) % n_classes).astype(np.int64)
    for i in range(n_items):
        images[i, r0:r1, c0:c1] += (amplitude * patterns[labels[i]]).astype(
            np.float32
        )
    mask = np.zeros((h, w), dtype=bool)
    mask[r0:r1, c0:c1] = True
    return PlantedFixture(
        images=images, labels=labels, signal_mask=mask, seed=seed, kind="cnn",
        meta={"image_size": [h, w], "signal_rows": list(signal_rows),
              "signal_cols": list(signal_cols), "noise": noise,
              "amplitude": amplitude, "n_classes": n_classes},
    )


def make_synthetic_cnn_bundle(
    seed: int,
    config: CnnConfig,
    fixture: PlantedFixture | None = None,
) -> ModelBundle:
    """Deterministic toy-CNN weights with a centroid-calibrated head.

    The head is calibrated on noise-free probes of the planted class
    patterns; pass the fixture the model will be evaluated on so the probes
    use its signal region (defaults match ``make_cnn_planted_fixture``).
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}

    def conv_init(kh: int, kw: int, cin: int, cout: int) -> np.ndarray:
        scale = _CNN_CONV_GAIN / np.sqrt(kh * kw * cin)
        return (scale * rng.standard_normal((kh, kw, cin, cout))).astype(
            np.float32
        )

    c0 = config.stem_channels
    tensors["stem.w"] = conv_init(3, 3, 3, c0)
    tensors["stem.g"] = np.ones(c0, dtype=np.float32)
    tensors["stem.b"] = np.zeros(c0, dtype=np.float32)
    cin = c0
    for s, spec in enumerate(config.stages):
        for b in range(spec.blocks):
            p = f"stages.{s}.blocks.{b}"
            bin_ = cin if b == 0 else spec.channels
            stride = spec.stride if b == 0 else 1
            tensors[f"{p}.conv1.w"] = conv_init(3, 3, bin_, spec.channels)
            tensors[f"{p}.n1.g"] = np.ones(spec.channels, dtype=np.float32)
            tensors[f"{p}.n1.b"] = np.zeros(spec.channels, dtype=np.float32)
            tensors[f"{p}.conv2.w"] = conv_init(3, 3, spec.channels,
                                                spec.channels)
            tensors[f"{p}.n2.g"] = np.ones(spec.channels, dtype=np.float32)
            tensors[f"{p}.n2.b"] = np.zeros(spec.channels, dtype=np.float32)
            if stride != 1 or bin_ != spec.channels:
                tensors[f"{p}.short.w"] = conv_init(1, 1, bin_, spec.channels)
        cin = spec.channels

    # Placeholder head so the probe bundle passes the manifest.
    k = config.num_classes
    tensors["head.w"] = np.zeros((cin, k), dtype=np.float32)
    tensors["head.b"] = np.zeros(k, dtype=np.float32)
    probe_bundle = make_bundle(
        {n: Tensor(a) for n, a in tensors.items()}, config
    )

    # Nearest-centroid readout: pooled responses to clean class probes
    # planted in the same signal region the fixture uses.
    probe_kwargs: dict[str, Any] = {"image_size": config.image_size}
    if fixture is not None:
        if fixture.kind != "cnn":
            raise ConfigError("cnn bundle calibration needs a cnn fixture")
        probe_kwargs.update(
            image_size=tuple(fixture.meta["image_size"]),
            signal_rows=tuple(fixture.meta["signal_rows"]),
            signal_cols=tuple(fixture.meta["signal_cols"]),
            amplitude=fixture.meta["amplitude"],
            n_classes=fixture.meta["n_classes"],
        )
    probes = make_cnn_planted_fixture(seed=0, n_items=k, noise=0.0,
                                      **probe_kwargs)
    feats = np.stack([
        _pooled_features(probe_bundle, probes.images[cls]) for cls in range(k)
    ])  # (K, C)
    # Grid pruning changes how much rectified background noise the global
    # pool averages in, which would shift every logit along the background
    # direction. The readout therefore uses class axes that are centered,
    # then projected off the expected background response, and normalized:
    # background dilution and pooling rescale both become invisible.
    noise_kwargs = {k: v for k, v in probe_kwargs.items() if k != "amplitude"}
    noise_probes = make_cnn_planted_fixture(seed=1, n_items=4, amplitude=0.0,
                                            **noise_kwargs)
    bg = np.stack([
        _pooled_features(probe_bundle, noise_probes.images[i])
        for i in range(noise_probes.n_items)
    ]).mean(axis=0)
    bg_norm = float(np.linalg.norm(bg))
    if bg_norm > 0:
        bg = bg / bg_norm
    axes = feats - feats.mean(axis=0, keepdims=True)
    axes -= np.outer(axes @ bg, bg)
    norms = np.sqrt((axes ** 2).sum(axis=1, keepdims=True))
    norms[norms == 0] = 1.0
    tensors["head.w"] = np.ascontiguousarray(
        (_HEAD_GAIN * axes / norms).T.astype(np.float32)
    )
    return make_bundle({n: Tensor(a) for n, a in tensors.items()}, config)


def _pooled_features(bundle: ModelBundle, image: np.ndarray) -> np.ndarray:
    t = bundle.tensors
    x = conv2d_raw(image, t["stem.w"].to_numpy(), stride=1)
    x = np.maximum(x * t["stem.g"].to_numpy() + t["stem.b"].to_numpy(), 0.0)
    grid = Tensor(x)
    for s in range(len(bundle.config.stages)):
        grid = cnn_mod.stage_forward(
            grid, cnn_mod.stage_params(t, bundle.config, s)
        )
    return grid.to_numpy().mean(axis=(0, 1))


def save_fixture(fixture: PlantedFixture, path: str | Path) -> None:
    np.savez(
        path,
        images=fixture.images,
        labels=fixture.labels,
        signal_mask=fixture.signal_mask,
        seed=np.int64(fixture.seed),
        kind=np.bytes_(fixture.kind.encode()),
        meta=np.bytes_(json.dumps(fixture.meta, sort_keys=True).encode()),
    )


def load_fixture(path: str | Path) -> PlantedFixture:
    with np.load(path) as data:
        return PlantedFixture(
            images=data["images"].astype(np.float32),
            labels=data["labels"].astype(np.int64),
            signal_mask=data["signal_mask"],
            seed=int(data["seed"]),
            kind=bytes(data["kind"]).decode(),
            meta=json.loads(bytes(data["meta"]).decode()),
        )
