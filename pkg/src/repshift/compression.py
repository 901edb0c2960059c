"""Turning importance scores into pruning actions.

Sequence pruning keeps the highest-scoring tokens in their original order;
grid pruning removes whole rows/columns (line-wise) or per-line entries
followed by compaction (token-wise), so convolutions stay applicable.

All selections are deterministic: ties break toward the lower original
index, and surviving elements keep their original relative order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ScheduleError
from .importance import (
    METRIC_L2,
    METRICS,
    OP_CHOICES,
    OP_MLP,
    SCORER_REP_SHIFT,
    SCORERS,
    ImportanceScores,
)
from .tensor import Tensor, _record_alloc

RATIO_OF_CURRENT = "current"
RATIO_OF_ORIGINAL = "original"

SELECT_TOP = "top"
SELECT_BOTTOM = "bottom"

CLS_ORIGIN = -1


@dataclass(frozen=True)
class TokenState:
    """Live token matrix plus the map back to original patch positions.

    ``origin_index`` holds one entry per live row: the original patch index,
    with the class token marked as -1. Entries are unique and preserve the
    original ordering.
    """

    tokens: Tensor
    origin_index: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin_index", tuple(int(i) for i in self.origin_index))
        if self.tokens.ndim != 2:
            raise DimensionError(f"tokens must be 2-D, got {self.tokens.shape}")
        if len(self.origin_index) != self.tokens.shape[0]:
            raise DimensionError(
                f"origin_index length {len(self.origin_index)} != "
                f"{self.tokens.shape[0]} live tokens"
            )
        if len(set(self.origin_index)) != len(self.origin_index):
            raise DimensionError("origin_index entries must be unique")

    @property
    def n_live(self) -> int:
        return self.tokens.shape[0]

    @property
    def has_class_token(self) -> bool:
        return CLS_ORIGIN in self.origin_index

    @property
    def class_position(self) -> int | None:
        try:
            return self.origin_index.index(CLS_ORIGIN)
        except ValueError:
            return None


@dataclass(frozen=True)
class ScheduleEntry:
    """Reduction at one layer: either an absolute count or a ratio."""

    layer: int
    count: int | None = None
    ratio: float | None = None

    def __post_init__(self) -> None:
        if (self.count is None) == (self.ratio is None):
            raise ScheduleError(
                f"schedule entry for layer {self.layer} must set exactly one "
                f"of count / ratio"
            )
        if self.count is not None and self.count < 1:
            raise ScheduleError(f"count must be >= 1, got {self.count}")
        if self.ratio is not None and not (0.0 < self.ratio < 1.0):
            raise ScheduleError(f"ratio must be in (0, 1), got {self.ratio}")

    def pruned_count(self, n_prunable_current: int, n_prunable_original: int,
                     basis: str = RATIO_OF_CURRENT) -> int:
        """Number of tokens this entry removes. Ratios floor, never over-prune."""
        if self.count is not None:
            return self.count
        base = n_prunable_current if basis == RATIO_OF_CURRENT else n_prunable_original
        # The 1e-9 absorbs decimal-to-binary rounding (0.3 * 10 must floor to 3).
        return int(math.floor(self.ratio * base + 1e-9))


@dataclass(frozen=True)
class PruneSchedule:
    """Per-layer reduction plan plus the scorer configuration it uses.

    ``select`` is "top" for normal pruning (keep the highest scores); the
    reliability probe flips it to "bottom" to keep the lowest instead.
    """

    entries: tuple[ScheduleEntry, ...] = ()
    scorer: str = SCORER_REP_SHIFT
    metric: str = METRIC_L2
    op_choice: str = OP_MLP
    ratio_basis: str = RATIO_OF_CURRENT
    select: str = SELECT_TOP

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.scorer not in SCORERS:
            raise ScheduleError(f"unknown scorer {self.scorer!r}")
        if self.metric not in METRICS:
            raise ScheduleError(f"unknown metric {self.metric!r}")
        if self.op_choice not in OP_CHOICES:
            raise ScheduleError(f"unknown op_choice {self.op_choice!r}")
        if self.ratio_basis not in (RATIO_OF_CURRENT, RATIO_OF_ORIGINAL):
            raise ScheduleError(f"unknown ratio_basis {self.ratio_basis!r}")
        if self.select not in (SELECT_TOP, SELECT_BOTTOM):
            raise ScheduleError(f"unknown select {self.select!r}")
        layers = [e.layer for e in self.entries]
        if layers != sorted(set(layers)):
            raise ScheduleError(
                f"schedule layers must be strictly increasing, got {layers}"
            )

    @property
    def is_empty(self) -> bool:
        return not self.entries

    def entry_for(self, layer: int) -> ScheduleEntry | None:
        for e in self.entries:
            if e.layer == layer:
                return e
        return None

    def validate(self, depth: int, n_prunable: int) -> None:
        """Check layer bounds and that at least one prunable token survives."""
        live = n_prunable
        for e in self.entries:
            if not (0 <= e.layer < depth):
                raise ScheduleError(
                    f"schedule layer {e.layer} outside model depth {depth}"
                )
            r = e.pruned_count(live, n_prunable, self.ratio_basis)
            if r >= live:
                raise ScheduleError(
                    f"layer {e.layer}: pruning {r} of {live} prunable tokens "
                    f"would leave none"
                )
            live -= r


def select_keep_indices(
    scores: ImportanceScores, keep: int, lowest: bool = False
) -> list[int]:
    """Indices of the ``keep`` highest-scoring tokens, in original order.

    Ties break toward the lower original index. Tokens scored +inf (the
    class-token sentinel) are always kept, including when ``lowest=True``
    (used by the reliability probe to retain the worst-ranked tokens).
    """
    s = scores.scores
    n = s.shape[0]
    if not (1 <= keep <= n):
        raise ScheduleError(f"keep must be in [1, {n}], got {keep}")
    forced = np.flatnonzero(np.isposinf(s))
    if keep < forced.size:
        raise ScheduleError(
            f"keep={keep} smaller than {forced.size} never-prune token(s)"
        )
    rest = np.flatnonzero(~np.isposinf(s))
    key = s[rest] if lowest else -s[rest]
    order = rest[np.argsort(key, kind="stable")]
    chosen = np.concatenate([forced, order[: keep - forced.size]])
    return sorted(int(i) for i in chosen)


def apply_prune(state: TokenState, keep_indices: list[int]) -> TokenState:
    """Gather the kept rows (and their origins), preserving order."""
    n = state.n_live
    if len(keep_indices) == 0:
        raise ScheduleError("cannot prune every token: keep set is empty")
    arr = np.asarray(keep_indices, dtype=np.int64)
    if arr.ndim != 1 or np.unique(arr).shape[0] != arr.shape[0]:
        raise ScheduleError(f"keep indices contain duplicates: {keep_indices}")
    if (arr < 0).any() or (arr >= n).any():
        raise ScheduleError(f"keep indices out of range [0, {n}): {keep_indices}")
    if not np.all(np.diff(arr) > 0):
        raise ScheduleError(f"keep indices must be sorted ascending: {keep_indices}")
    if arr.shape[0] == n:
        return state
    kept = state.tokens.to_numpy()[arr]
    _record_alloc(kept.shape)
    origins = tuple(state.origin_index[int(i)] for i in arr)
    return TokenState(tokens=Tensor._wrap(kept), origin_index=origins)


def _lowest_line_indices(means: np.ndarray, drop: int) -> np.ndarray:
    """Indices of the ``drop`` lowest-mean lines; ties to the lower index."""
    order = np.argsort(means, kind="stable")
    return np.sort(order[:drop])


def line_wise_prune(
    grid: Tensor, shift: Tensor, drop_rows: int, drop_cols: int
) -> Tensor:
    """Remove whole rows/columns with the lowest mean shift.

    The surviving grid keeps its original row/column order and stays dense,
    so convolutions remain applicable.
    """
    g, s = grid.to_numpy(), shift.to_numpy()
    if g.ndim != 3 or s.shape != g.shape[:2]:
        raise DimensionError(
            f"grid must be (H, W, C) with shift (H, W); got {tuple(g.shape)} "
            f"and {tuple(s.shape)}"
        )
    h, w = s.shape
    if drop_rows < 0 or drop_cols < 0 or drop_rows >= h or drop_cols >= w:
        raise DimensionError(
            f"drop counts ({drop_rows}, {drop_cols}) must be >= 0 and below "
            f"grid dims ({h}, {w})"
        )
    if drop_rows == 0 and drop_cols == 0:
        return grid
    drop_r = _lowest_line_indices(s.mean(axis=1), drop_rows)
    drop_c = _lowest_line_indices(s.mean(axis=0), drop_cols)
    keep_r = np.setdiff1d(np.arange(h), drop_r)
    keep_c = np.setdiff1d(np.arange(w), drop_c)
    out = np.ascontiguousarray(g[np.ix_(keep_r, keep_c)])
    _record_alloc(out.shape)
    return Tensor._wrap(out)


def token_wise_prune(
    grid: Tensor, shift: Tensor, drop_per_row: int, drop_per_col: int
) -> Tensor:
    """Remove the lowest-shift entries per row, then per column, compacting.

    Pass 1 drops ``drop_per_row`` entries from each row and compacts left;
    pass 2 drops ``drop_per_col`` entries from each column of the repacked
    grid and compacts up. Output shape is
    (H - drop_per_col, W - drop_per_row, C).
    """
    g, s = grid.to_numpy(), shift.to_numpy()
    if g.ndim != 3 or s.shape != g.shape[:2]:
        raise DimensionError(
            f"grid must be (H, W, C) with shift (H, W); got {tuple(g.shape)} "
            f"and {tuple(s.shape)}"
        )
    h, w, c = g.shape
    if drop_per_row < 0 or drop_per_col < 0 or drop_per_row >= w or drop_per_col >= h:
        raise DimensionError(
            f"per-line drop counts ({drop_per_row}, {drop_per_col}) must be "
            f">= 0 and below grid dims ({w} cols, {h} rows)"
        )
    if drop_per_row == 0 and drop_per_col == 0:
        return grid

    w2 = w - drop_per_row
    packed = np.empty((h, w2, c), dtype=np.float32)
    packed_shift = np.empty((h, w2), dtype=np.float32)
    _record_alloc(packed.shape)
    for i in range(h):
        order = np.argsort(s[i], kind="stable")
        keep = np.sort(order[drop_per_row:])
        packed[i] = g[i, keep]
        packed_shift[i] = s[i, keep]

    h2 = h - drop_per_col
    out = np.empty((h2, w2, c), dtype=np.float32)
    for j in range(w2):
        order = np.argsort(packed_shift[:, j], kind="stable")
        keep = np.sort(order[drop_per_col:])
        out[:, j] = packed[keep, j]
    _record_alloc(out.shape)
    return Tensor._wrap(out)
