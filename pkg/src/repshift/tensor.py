"""Dense float32 tensor type and the numerical kernels the engine builds on.

Everything downstream (attention, token scoring, the models) computes through
this module, which gives us two instrumentation points that the rest of the
engine relies on:

* ``track_allocations()`` observes every buffer the engine materializes:
  each ``Tensor`` constructed, every ``alloc_*`` call inside a kernel, and
  every matmul product (including intermediates that never become public
  tensors, such as attention score blocks). Elementwise temporaries mirror
  the shapes of those tracked buffers, so a recorded log is a faithful
  census of the largest arrays a computation touched. Tests use it to prove
  the fused attention path never builds a token-by-token score matrix.
* ``count_flops()`` accumulates one multiply-accumulate per scalar MAC of
  every matmul routed through ``tracked_matmul``. Reported "GFLOPs" follow
  the usual convention for transformer cost accounting: one MAC counts as
  one FLOP, elementwise work (norms, softmax, activations) is not counted.

Kernels are backed by numpy/BLAS. For a fixed build and thread
configuration BLAS accumulation order is deterministic, so repeated runs on
the same inputs are bit-identical; golden tests assert this directly.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError

# Constants of the tanh GELU approximation:
#   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
_GELU_COEF = 0.044715
_GELU_SCALE = math.sqrt(2.0 / math.pi)

_local = threading.local()


def _alloc_logs() -> list["AllocationLog"]:
    if not hasattr(_local, "alloc_logs"):
        _local.alloc_logs = []
    return _local.alloc_logs


def _flop_logs() -> list["FlopCounter"]:
    if not hasattr(_local, "flop_logs"):
        _local.flop_logs = []
    return _local.flop_logs


class AllocationLog:
    """Record of buffer shapes materialized while the log was active."""

    def __init__(self) -> None:
        self.shapes: list[tuple[int, ...]] = []

    def record(self, shape: tuple[int, ...]) -> None:
        self.shapes.append(tuple(int(d) for d in shape))

    def max_buffer_elems(self) -> int:
        if not self.shapes:
            return 0
        return max(int(np.prod(s)) for s in self.shapes)

    def has_square_of(self, n: int) -> bool:
        """True if any recorded buffer has two or more axes of extent ``n``."""
        for shape in self.shapes:
            if sum(1 for d in shape if d == n) >= 2:
                return True
        return False


class FlopCounter:
    """Accumulates matmul multiply-accumulate counts."""

    def __init__(self) -> None:
        self.macs = 0

    def add(self, macs: int) -> None:
        self.macs += macs

    @property
    def gflops(self) -> float:
        return self.macs / 1e9


@contextmanager
def track_allocations() -> Iterator[AllocationLog]:
    log = AllocationLog()
    _alloc_logs().append(log)
    try:
        yield log
    finally:
        _alloc_logs().remove(log)


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    _flop_logs().append(counter)
    try:
        yield counter
    finally:
        _flop_logs().remove(counter)


def _record_alloc(shape: tuple[int, ...]) -> None:
    for log in _alloc_logs():
        log.record(shape)


def alloc_empty(shape: Sequence[int]) -> np.ndarray:
    _record_alloc(tuple(shape))
    return np.empty(tuple(shape), dtype=np.float32)


def alloc_zeros(shape: Sequence[int]) -> np.ndarray:
    _record_alloc(tuple(shape))
    return np.zeros(tuple(shape), dtype=np.float32)


def alloc_full(shape: Sequence[int], value: float) -> np.ndarray:
    _record_alloc(tuple(shape))
    return np.full(tuple(shape), value, dtype=np.float32)


def tracked_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw (possibly batched) matmul with shape recording and MAC counting.

    MACs for a stack of ``B`` products of (M,K)@(K,N) count as B*M*K*N.
    """
    out = np.matmul(a, b)
    _record_alloc(out.shape)
    flop_logs = _flop_logs()
    if flop_logs:
        k = a.shape[-1]
        macs = int(np.prod(out.shape)) * int(k)
        for counter in flop_logs:
            counter.add(macs)
    return out


class Tensor:
    """Immutable dense array of float32 values, row-major.

    Invariants enforced at construction: the backing buffer is C-contiguous
    float32, read-only, and every element is finite. Operations that would
    produce NaN/Inf raise :class:`NonFiniteError` instead of propagating.
    """

    __slots__ = ("_data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float32, order="C", copy=True)
        _record_alloc(arr.shape)
        self._data = _finalize(arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt an engine-allocated float32 array without copying.

        The array must have been recorded at its allocation site
        (``alloc_*`` or ``tracked_matmul``); this path only finalizes it.
        """
        t = object.__new__(cls)
        t._data = _finalize(np.ascontiguousarray(arr, dtype=np.float32))
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def to_numpy(self) -> np.ndarray:
        """Read-only view of the backing buffer."""
        return self._data

    def tolist(self):
        return self._data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _finalize(arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(
            f"non-finite values in tensor of shape {tuple(arr.shape)}"
        )
    arr.setflags(write=False)
    return arr


def as_array(x: "Tensor | np.ndarray") -> np.ndarray:
    return x.to_numpy() if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)


# ---------------------------------------------------------------------------
# Raw kernels. These operate on plain float32 arrays so model code can chain
# them without re-validating at every step; public ops wrap them.
# ---------------------------------------------------------------------------


def softmax_last_raw(x: np.ndarray) -> np.ndarray:
    """Numerically stabilized softmax over the last axis."""
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm_raw(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float
) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = np.mean(d * d, axis=-1, keepdims=True)
    return (d / np.sqrt(var + np.float32(eps))) * gamma + beta


def gelu_raw(x: np.ndarray) -> np.ndarray:
    inner = _GELU_SCALE * (x + _GELU_COEF * x * x * x)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))


# ---------------------------------------------------------------------------
# Public operations.
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    am, bm = a.to_numpy(), b.to_numpy()
    if am.ndim != 2 or bm.ndim != 2 or am.shape[1] != bm.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {tuple(am.shape)} x {tuple(bm.shape)}"
        )
    return Tensor._wrap(tracked_matmul(am, bm))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row standardization followed by the (gamma, beta) affine map."""
    if eps <= 0:
        raise DimensionError(f"layer_norm eps must be > 0, got {eps}")
    xm, g, b = x.to_numpy(), gamma.to_numpy(), beta.to_numpy()
    if xm.ndim != 2 or g.shape != (xm.shape[1],) or b.shape != (xm.shape[1],):
        raise DimensionError(
            f"layer_norm width mismatch: x {tuple(xm.shape)}, "
            f"gamma {tuple(g.shape)}, beta {tuple(b.shape)}"
        )
    out = layer_norm_raw(xm, g, b, eps)
    _record_alloc(out.shape)
    return Tensor._wrap(out)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor; each output row sums to 1."""
    xm = x.to_numpy()
    if xm.ndim != 2:
        raise DimensionError(f"softmax_rows expects 2-D input, got {tuple(xm.shape)}")
    out = softmax_last_raw(xm)
    _record_alloc(out.shape)
    return Tensor._wrap(out)


def gelu(x: Tensor) -> Tensor:
    """Elementwise GELU, tanh approximation (coefficients in module docs)."""
    out = gelu_raw(x.to_numpy())
    _record_alloc(out.shape)
    return Tensor._wrap(out)


def row_norm(x: Tensor, p: str = "l2") -> Tensor:
    """Per-row Lp norm of a 2-D tensor, p in {"l1", "l2"}."""
    xm = x.to_numpy()
    if xm.ndim != 2:
        raise DimensionError(f"row_norm expects 2-D input, got {tuple(xm.shape)}")
    if p == "l1":
        out = np.abs(xm).sum(axis=1)
    elif p == "l2":
        out = np.sqrt((xm * xm).sum(axis=1))
    else:
        raise DimensionError(f"row_norm p must be 'l1' or 'l2', got {p!r}")
    out = out.astype(np.float32)
    _record_alloc(out.shape)
    return Tensor._wrap(out)
