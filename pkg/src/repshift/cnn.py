"""Multi-stage residual CNN with grid pruning at stage boundaries.

Stages stack 3x3-conv basic blocks (conv -> per-channel affine -> ReLU,
twice, plus a shortcut). Representation shift on a grid compares each
spatial position's channel vector before and after a stage; when the stage
strides, the "before" grid is average-pooled to the output resolution, and
when the stage widens, the narrower grid is zero-padded in channels before
taking distances. Pruning then removes whole lines (line-wise) or per-line
entries with compaction (token-wise), keeping the grid dense for the next
stage's convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compression import line_wise_prune, token_wise_prune
from .errors import DimensionError, ScheduleError
from .tensor import Tensor, _record_alloc, tracked_matmul

PRUNE_LINE_WISE = "line_wise"
PRUNE_TOKEN_WISE = "token_wise"
PRUNE_MODES = (PRUNE_LINE_WISE, PRUNE_TOKEN_WISE)


@dataclass(frozen=True)
class StageSpec:
    channels: int
    blocks: int
    stride: int = 1

    def __post_init__(self) -> None:
        if self.channels < 1 or self.blocks < 1 or self.stride < 1:
            raise DimensionError(f"invalid stage spec {self}")


@dataclass(frozen=True)
class PrunePlanEntry:
    """Grid reduction after one stage.

    drop_rows shrinks height, drop_cols shrinks width, for both modes.
    """

    stage: int
    drop_rows: int
    drop_cols: int
    mode: str = PRUNE_LINE_WISE

    def __post_init__(self) -> None:
        if self.mode not in PRUNE_MODES:
            raise ScheduleError(f"unknown grid prune mode {self.mode!r}")
        if self.drop_rows < 0 or self.drop_cols < 0:
            raise ScheduleError("drop counts must be >= 0")


@dataclass(frozen=True)
class CnnConfig:
    """Architecture of the toy CNN: stem conv then residual stages."""

    image_size: tuple[int, int]
    stages: tuple[StageSpec, ...]
    num_classes: int
    prune_plan: tuple[PrunePlanEntry, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "prune_plan", tuple(self.prune_plan))
        if not self.stages:
            raise DimensionError("at least one stage required")
        if self.num_classes < 1:
            raise DimensionError("num_classes must be >= 1")

    @property
    def stem_channels(self) -> int:
        return self.stages[0].channels


def manifest(config: CnnConfig) -> tuple[dict[str, tuple[int, ...]],
                                         dict[str, tuple[int, ...]]]:
    """Required and optional tensor names with expected shapes."""
    c0 = config.stem_channels
    required: dict[str, tuple[int, ...]] = {
        "stem.w": (3, 3, 3, c0),
        "stem.g": (c0,),
        "stem.b": (c0,),
        "head.w": (config.stages[-1].channels, config.num_classes),
        "head.b": (config.num_classes,),
    }
    cin = c0
    for s, spec in enumerate(config.stages):
        for b in range(spec.blocks):
            p = f"stages.{s}.blocks.{b}"
            bin_ = cin if b == 0 else spec.channels
            stride = spec.stride if b == 0 else 1
            required.update({
                f"{p}.conv1.w": (3, 3, bin_, spec.channels),
                f"{p}.n1.g": (spec.channels,), f"{p}.n1.b": (spec.channels,),
                f"{p}.conv2.w": (3, 3, spec.channels, spec.channels),
                f"{p}.n2.g": (spec.channels,), f"{p}.n2.b": (spec.channels,),
            })
            if stride != 1 or bin_ != spec.channels:
                required[f"{p}.short.w"] = (1, 1, bin_, spec.channels)
        cin = spec.channels
    return required, {}


def conv_out_size(size: int, stride: int) -> int:
    # 3x3 kernel, padding 1.
    return (size + 2 - 3) // stride + 1


def plan_spatial_dims(
    config: CnnConfig, plan: tuple[PrunePlanEntry, ...]
) -> list[tuple[int, int]]:
    """Analytic (H, W) after each stage including its prune, stem first."""
    by_stage = {e.stage: e for e in plan}
    h, w = config.image_size
    h, w = conv_out_size(h, 1), conv_out_size(w, 1)  # stem
    dims: list[tuple[int, int]] = []
    for s, spec in enumerate(config.stages):
        h, w = conv_out_size(h, spec.stride), conv_out_size(w, spec.stride)
        e = by_stage.get(s)
        if e is not None:
            if e.drop_rows >= h or e.drop_cols >= w:
                raise ScheduleError(
                    f"stage {s} prune ({e.drop_rows}, {e.drop_cols}) exceeds "
                    f"grid ({h}, {w})"
                )
            h, w = h - e.drop_rows, w - e.drop_cols
        if h < 1 or w < 1:
            raise ScheduleError(f"stage {s} leaves an empty grid")
        dims.append((h, w))
    return dims


def conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """3x3 (or 1x1) convolution with same-style padding, via im2col matmul."""
    kh, kw, cin, cout = w.shape
    pad = kh // 2
    h, wd = x.shape[:2]
    if x.shape[2] != cin:
        raise DimensionError(
            f"conv input channels {x.shape[2]} != kernel {cin}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv output would be empty for input {x.shape}")
    if pad:
        xp = np.zeros((h + 2 * pad, wd + 2 * pad, cin), dtype=np.float32)
        xp[pad:pad + h, pad:pad + wd] = x
    else:
        xp = x
    cols = np.empty((ho, wo, kh * kw * cin), dtype=np.float32)
    _record_alloc(cols.shape)
    idx = 0
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, idx:idx + cin] = xp[di:di + ho * stride:stride,
                                           dj:dj + wo * stride:stride]
            idx += cin
    out = tracked_matmul(cols.reshape(ho * wo, kh * kw * cin),
                         w.reshape(kh * kw * cin, cout))
    return out.reshape(ho, wo, cout)


def _affine(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x * g + b


@dataclass(frozen=True)
class CnnBlockParams:
    conv1_w: Tensor
    n1_g: Tensor
    n1_b: Tensor
    conv2_w: Tensor
    n2_g: Tensor
    n2_b: Tensor
    short_w: Tensor | None
    stride: int

    @classmethod
    def from_tensors(cls, tensors: dict[str, Tensor], stage: int, block: int,
                     stride: int) -> "CnnBlockParams":
        p = f"stages.{stage}.blocks.{block}"
        return cls(
            conv1_w=tensors[f"{p}.conv1.w"],
            n1_g=tensors[f"{p}.n1.g"], n1_b=tensors[f"{p}.n1.b"],
            conv2_w=tensors[f"{p}.conv2.w"],
            n2_g=tensors[f"{p}.n2.g"], n2_b=tensors[f"{p}.n2.b"],
            short_w=tensors.get(f"{p}.short.w"),
            stride=stride,
        )


def stage_params(tensors: dict[str, Tensor], config: CnnConfig,
                 stage: int) -> list[CnnBlockParams]:
    spec = config.stages[stage]
    return [
        CnnBlockParams.from_tensors(
            tensors, stage, b, spec.stride if b == 0 else 1
        )
        for b in range(spec.blocks)
    ]


def _block_forward(x: np.ndarray, p: CnnBlockParams) -> np.ndarray:
    y = conv2d_raw(x, p.conv1_w.to_numpy(), stride=p.stride)
    y = np.maximum(_affine(y, p.n1_g.to_numpy(), p.n1_b.to_numpy()), 0.0)
    y = conv2d_raw(y, p.conv2_w.to_numpy(), stride=1)
    y = _affine(y, p.n2_g.to_numpy(), p.n2_b.to_numpy())
    if p.short_w is not None:
        sc = conv2d_raw(x, p.short_w.to_numpy(), stride=p.stride)
    else:
        sc = x
    return np.maximum(y + sc, 0.0)


def stage_forward(grid: Tensor, blocks: list[CnnBlockParams]) -> Tensor:
    """Run one residual stage over an (H, W, C) grid."""
    x = grid.to_numpy()
    if x.ndim != 3:
        raise DimensionError(f"stage input must be (H, W, C), got {grid.shape}")
    if min(x.shape[:2]) < 1:
        raise DimensionError(f"stage input spatial dims too small: {grid.shape}")
    for p in blocks:
        x = _block_forward(x, p)
    _record_alloc(x.shape)
    return Tensor._wrap(np.ascontiguousarray(x))


def _avg_pool_to(x: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Average-pool (H, W, C) onto a (th, tw) grid of stride-sized windows.

    Window size is ceil(H/th) x ceil(W/tw); edge windows truncate, which
    matches the ragged dims produced by pruning before a strided stage.
    """
    h, w, c = x.shape
    fh, fw = -(-h // th), -(-w // tw)
    if (th - 1) * fh >= h or (tw - 1) * fw >= w:
        raise DimensionError(
            f"cannot align a ({h}, {w}) grid onto ({th}, {tw})"
        )
    out = np.empty((th, tw, c), dtype=np.float32)
    for i in range(th):
        for j in range(tw):
            out[i, j] = x[i * fh:min((i + 1) * fh, h),
                          j * fw:min((j + 1) * fw, w)].mean(axis=(0, 1))
    return out


def stage_shift(before: Tensor, after: Tensor) -> Tensor:
    """Per-position L2 distance across channels between stage input/output.

    The "before" grid is average-pooled when the stage reduced resolution,
    and zero-padded in channels when the stage widened.
    """
    b, a = before.to_numpy(), after.to_numpy()
    if b.ndim != 3 or a.ndim != 3:
        raise DimensionError("stage_shift expects (H, W, C) grids")
    if b.shape[0] != a.shape[0] or b.shape[1] != a.shape[1]:
        if b.shape[0] < a.shape[0] or b.shape[1] < a.shape[1]:
            raise DimensionError(
                f"stage output {a.shape[:2]} larger than input {b.shape[:2]}"
            )
        b = _avg_pool_to(b, a.shape[0], a.shape[1])
    cb, ca = b.shape[2], a.shape[2]
    if cb < ca:
        d = a.copy()
        d[:, :, :cb] -= b
    elif cb > ca:
        d = b.copy()
        d[:, :, :ca] -= a
    else:
        d = a - b
    out = np.sqrt((d * d).sum(axis=2)).astype(np.float32)
    _record_alloc(out.shape)
    return Tensor._wrap(out)


@dataclass(frozen=True)
class StageTrace:
    spatial_in: tuple[int, int]
    spatial_out: tuple[int, int]
    pruned: bool


def cnn_forward(
    image: Tensor,
    bundle,
    plan: tuple[PrunePlanEntry, ...] | None = None,
) -> tuple[Tensor, list[StageTrace]]:
    """Stem, stages interleaved with grid pruning, global pool, head."""
    config: CnnConfig = bundle.config
    h, w = config.image_size
    im = image.to_numpy()
    if im.shape != (h, w, 3):
        raise DimensionError(f"image must be ({h}, {w}, 3), got {tuple(im.shape)}")
    plan = tuple(plan) if plan is not None else config.prune_plan
    plan_spatial_dims(config, plan)  # validates drops against analytic dims
    by_stage = {e.stage: e for e in plan}
    for e in plan:
        if not (0 <= e.stage < len(config.stages)):
            raise ScheduleError(f"plan stage {e.stage} outside model")

    t = bundle.tensors
    x = conv2d_raw(im, t["stem.w"].to_numpy(), stride=1)
    x = np.maximum(_affine(x, t["stem.g"].to_numpy(), t["stem.b"].to_numpy()),
                   0.0)
    grid = Tensor._wrap(np.ascontiguousarray(x))

    traces: list[StageTrace] = []
    for s in range(len(config.stages)):
        before = grid
        spatial_in = grid.shape[:2]
        grid = stage_forward(grid, stage_params(t, config, s))
        e = by_stage.get(s)
        if e is not None and (e.drop_rows or e.drop_cols):
            shift = stage_shift(before, grid)
            if e.mode == PRUNE_LINE_WISE:
                grid = line_wise_prune(grid, shift, e.drop_rows, e.drop_cols)
            else:
                grid = token_wise_prune(grid, shift, drop_per_row=e.drop_cols,
                                        drop_per_col=e.drop_rows)
        traces.append(StageTrace(
            spatial_in=spatial_in, spatial_out=grid.shape[:2],
            pruned=e is not None,
        ))

    pooled = grid.to_numpy().mean(axis=(0, 1), keepdims=False)
    logits = tracked_matmul(pooled.reshape(1, -1), t["head.w"].to_numpy())
    logits = logits + t["head.b"].to_numpy()
    return Tensor._wrap(logits.reshape(-1)), traces
