"""Self-attention, in two interchangeable implementations.

``naive_attention`` computes the full softmax(Q K^T / sqrt(d)) map and can
hand it back to attention-based token scorers. ``fused_attention`` streams
key/value tiles through an online softmax (running row max + running
normalizer), so the map is never materialized: the largest temporaries are
tile-sized score blocks and O(N)-sized running statistics. The two paths
agree to float32 accumulation noise for any tile size.

Both operate per head with scaling 1/sqrt(d_head) where d_head = C / heads.
Projection biases are optional; absent means zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .tensor import (
    Tensor,
    _record_alloc,
    softmax_last_raw,
    tracked_matmul,
)

DEFAULT_TILE_SIZE = 64


@dataclass(frozen=True)
class AttentionWeights:
    """Projection weights of one attention layer.

    qkv_proj: (C, 3C) fused query/key/value projection.
    out_proj: (C, C) output projection.
    qkv_bias / out_bias: optional; treated as zero when None.
    """

    qkv_proj: Tensor
    out_proj: Tensor
    num_heads: int
    qkv_bias: Tensor | None = None
    out_bias: Tensor | None = None

    def __post_init__(self) -> None:
        c = self.width
        if self.qkv_proj.shape != (c, 3 * c):
            raise DimensionError(
                f"qkv_proj must be (C, 3C), got {self.qkv_proj.shape}"
            )
        if self.out_proj.shape != (c, c):
            raise DimensionError(f"out_proj must be (C, C), got {self.out_proj.shape}")
        if self.num_heads < 1 or c % self.num_heads != 0:
            raise DimensionError(
                f"width {c} not divisible by num_heads {self.num_heads}"
            )
        if self.qkv_bias is not None and self.qkv_bias.shape != (3 * c,):
            raise DimensionError(f"qkv_bias must be (3C,), got {self.qkv_bias.shape}")
        if self.out_bias is not None and self.out_bias.shape != (c,):
            raise DimensionError(f"out_bias must be (C,), got {self.out_bias.shape}")

    @property
    def width(self) -> int:
        return self.qkv_proj.shape[0]

    @property
    def head_dim(self) -> int:
        return self.width // self.num_heads


@dataclass(frozen=True)
class AttentionArtifacts:
    """Attention output plus, on the naive path only, the attention map.

    attn_map has shape (heads, N, N) with rows summing to 1; it is always
    None on the fused path.
    """

    output: Tensor
    attn_map: Tensor | None = None


def _project_qkv(
    x: np.ndarray, w: AttentionWeights
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project tokens to per-head q, k, v with shape (heads, N, d)."""
    n, c = x.shape
    qkv = tracked_matmul(x, w.qkv_proj.to_numpy())
    if w.qkv_bias is not None:
        qkv = qkv + w.qkv_bias.to_numpy()
    h, d = w.num_heads, w.head_dim
    # (N, 3C) -> (3, heads, N, d)
    qkv = qkv.reshape(n, 3, h, d).transpose(1, 2, 0, 3)
    return qkv[0], qkv[1], qkv[2]


def _finish(ctx: np.ndarray, w: AttentionWeights, n: int) -> Tensor:
    """Concatenate heads and apply the output projection."""
    c = w.width
    merged = ctx.transpose(1, 0, 2).reshape(n, c)
    _record_alloc(merged.shape)
    out = tracked_matmul(merged, w.out_proj.to_numpy())
    if w.out_bias is not None:
        out = out + w.out_bias.to_numpy()
    return Tensor._wrap(out)


def naive_attention(
    x: Tensor, w: AttentionWeights, keep_map: bool = False
) -> AttentionArtifacts:
    """Reference path: materializes the per-head attention map."""
    xm = x.to_numpy()
    if xm.ndim != 2 or xm.shape[1] != w.width:
        raise DimensionError(
            f"attention input must be (N, {w.width}), got {tuple(xm.shape)}"
        )
    n = xm.shape[0]
    q, k, v = _project_qkv(xm, w)
    scale = np.float32(1.0 / np.sqrt(w.head_dim))
    scores = tracked_matmul(q * scale, k.transpose(0, 2, 1))  # (h, N, N)
    attn = softmax_last_raw(scores)
    ctx = tracked_matmul(attn, v)  # (h, N, d)
    output = _finish(ctx, w, n)
    if keep_map:
        return AttentionArtifacts(output=output, attn_map=Tensor._wrap(attn))
    return AttentionArtifacts(output=output, attn_map=None)


def _effective_tile(tile_size: int, n: int) -> int:
    # Clamp so a "degenerate" large tile still never materializes an N x N
    # block (two tiles minimum once N > 1); results are tile-independent.
    t = min(tile_size, n)
    if t == n and n > 1:
        t = (n + 1) // 2
    return t


def fused_attention(
    x: Tensor, w: AttentionWeights, tile_size: int = DEFAULT_TILE_SIZE
) -> AttentionArtifacts:
    """Tiled online-softmax path; the attention map is never materialized.

    For each query tile we stream key/value tiles, maintaining per-row
    running maxima ``m`` and normalizers ``l`` and rescaling the partial
    output by exp(m_old - m_new) whenever the running max advances. Peak
    auxiliary memory per head is O(N + tile^2 + tile*d): the running stats,
    one score tile, and one partial-context tile.
    """
    if tile_size < 1:
        raise DimensionError(f"tile_size must be >= 1, got {tile_size}")
    xm = x.to_numpy()
    if xm.ndim != 2 or xm.shape[1] != w.width:
        raise DimensionError(
            f"attention input must be (N, {w.width}), got {tuple(xm.shape)}"
        )
    n = xm.shape[0]
    q, k, v = _project_qkv(xm, w)
    h, d = w.num_heads, w.head_dim
    scale = np.float32(1.0 / np.sqrt(d))
    t = _effective_tile(tile_size, n)

    # Score tiles come out of float32 BLAS; the running statistics and the
    # output accumulator are float64 so the repeated exp(m_old - m_new)
    # rescaling does not drift the result away from the naive path.
    ctx = np.zeros((h, n, d), dtype=np.float64)
    row_max = np.full((h, n), -np.inf)
    row_sum = np.zeros((h, n))
    for arr in (ctx, row_max, row_sum):
        _record_alloc(arr.shape)

    for i0 in range(0, n, t):
        i1 = min(i0 + t, n)
        qi = q[:, i0:i1, :] * scale
        m_i = row_max[:, i0:i1]
        l_i = row_sum[:, i0:i1]
        o_i = ctx[:, i0:i1, :]
        for j0 in range(0, n, t):
            j1 = min(j0 + t, n)
            s = tracked_matmul(qi, k[:, j0:j1, :].transpose(0, 2, 1))  # (h, ti, tj)
            m_new = np.maximum(m_i, s.max(axis=-1))
            p = np.exp(s - m_new[:, :, None])
            rescale = np.exp(m_i - m_new)  # exp(-inf) == 0 on the first tile
            l_i *= rescale
            l_i += p.sum(axis=-1)
            o_i *= rescale[:, :, None]
            o_i += tracked_matmul(p.astype(np.float32), v[:, j0:j1, :])
            m_i[:] = m_new
        o_i /= l_i[:, :, None]

    return AttentionArtifacts(output=_finish(ctx.astype(np.float32), w, n),
                              attn_map=None)
