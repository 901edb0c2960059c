"""Independent writer for the engine's weight container.

Implemented from the format documentation alone (docs/container-format.md
in the engine repo); deliberately shares no code with the engine so it
doubles as a conformance check of that documentation. Version 1: magic
``RSWC``, uint32 version, uint64 header length, UTF-8 JSON header, zero
padding to a 64-byte boundary, then raw little-endian float32 tensors at
64-byte-aligned offsets in sorted-name order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"RSWC"
VERSION = 1
ALIGNMENT = 64


class ContainerWriteError(ValueError):
    pass


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def write_container(tensors: Mapping[str, np.ndarray],
                    config: dict[str, Any], path: str | Path) -> str:
    """Write a v1 container; returns the payload digest (hex SHA-256)."""
    payload = bytearray()
    directory: dict[str, dict[str, Any]] = {}
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if not np.isfinite(arr).all():
            raise ContainerWriteError(f"tensor {name!r} has non-finite values")
        offset = _align(len(payload))
        payload.extend(b"\x00" * (offset - len(payload)))
        payload.extend(arr.tobytes())
        directory[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
        }
    digest = hashlib.sha256(bytes(payload)).hexdigest()
    header = {
        "config": config,
        "digest": digest,
        "payload_size": len(payload),
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    prefix = struct.pack("<4sIQ", MAGIC, VERSION, len(header_bytes))
    pad = b"\x00" * (_align(len(prefix) + len(header_bytes))
                     - len(prefix) - len(header_bytes))
    Path(path).write_bytes(prefix + header_bytes + pad + bytes(payload))
    return digest


def expected_vit_tensors(config: dict[str, Any]) -> tuple[dict[str, tuple[int, ...]],
                                                          dict[str, tuple[int, ...]]]:
    """Required/optional tensor shapes per the documented ViT manifest."""
    h, w = config["image_size"]
    p = config["patch_size"]
    c = config["width"]
    depth = config["depth"]
    k = config["num_classes"]
    hid = 4 * c
    if h % p or w % p:
        raise ContainerWriteError(
            f"image size {(h, w)} not divisible by patch size {p}"
        )
    seq = (h // p) * (w // p) + (1 if config.get("use_class_token", True) else 0)
    required: dict[str, tuple[int, ...]] = {
        "patch_embed.w": (p * p * 3, c),
        "patch_embed.b": (c,),
        "pos_embed": (seq, c),
        "norm.g": (c,), "norm.b": (c,),
        "head.w": (c, k), "head.b": (k,),
    }
    if config.get("use_class_token", True):
        required["cls_token"] = (1, c)
    optional: dict[str, tuple[int, ...]] = {}
    for i in range(depth):
        pre = f"blocks.{i}"
        required.update({
            f"{pre}.ln1.g": (c,), f"{pre}.ln1.b": (c,),
            f"{pre}.attn.qkv_w": (c, 3 * c),
            f"{pre}.attn.out_w": (c, c),
            f"{pre}.ln2.g": (c,), f"{pre}.ln2.b": (c,),
            f"{pre}.mlp.w1": (c, hid), f"{pre}.mlp.b1": (hid,),
            f"{pre}.mlp.w2": (hid, c), f"{pre}.mlp.b2": (c,),
        })
        optional[f"{pre}.attn.qkv_b"] = (3 * c,)
        optional[f"{pre}.attn.out_b"] = (c,)
    return required, optional
