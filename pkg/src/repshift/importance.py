"""Token importance scorers.

Representation shift ranks tokens by how much a layer's transformation
moves them: score_i = D(F(x)_i, x_i), where F is the branch output before
the residual add and D is an L1, L2, or cosine distance. It reads only the
token embeddings, so it works identically under naive and fused attention.

The two conventional baselines read the attention map instead: the class
token's attention row, or the per-column mean attention received across all
queries. Both raise :class:`FusedIncompatible` when handed fused-path
artifacts, since the fused path never materializes the map.

Scores live in plain float arrays rather than engine tensors: the class
token is exempted from pruning via a +inf sentinel, which the Tensor type's
all-finite invariant deliberately forbids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FusedIncompatible
from .attention import AttentionArtifacts
from .tensor import Tensor

logger = logging.getLogger("repshift.importance")

SCORER_REP_SHIFT = "rep_shift"
SCORER_CLS_ATTENTION = "cls_attention"
SCORER_MEAN_ATTENTION = "mean_attention"
SCORERS = (SCORER_REP_SHIFT, SCORER_CLS_ATTENTION, SCORER_MEAN_ATTENTION)

METRIC_L1 = "l1"
METRIC_L2 = "l2"
METRIC_COSINE = "cosine"
METRICS = (METRIC_L1, METRIC_L2, METRIC_COSINE)

OP_ATTN = "attn"
OP_MLP = "mlp"
OP_BLOCK = "block"
OP_CHOICES = (OP_ATTN, OP_MLP, OP_BLOCK)

_FUSED_MAP_ERROR = (
    "attention map unavailable: fused attention streams tiles through an "
    "online softmax and never materializes the map, so attention-based "
    "importance scores cannot be computed on this path; use the "
    "representation-shift scorer instead"
)


@dataclass(frozen=True)
class ImportanceScores:
    """Per-token scalar scores at one scoring site.

    ``scores`` is 1-D float32, one entry per live token; +inf marks tokens
    exempt from pruning (the class token). ``metric`` and ``op_choice`` are
    populated for the representation-shift scorer only.
    """

    scores: np.ndarray
    scorer: str
    metric: str | None = None
    op_choice: str | None = None

    def __post_init__(self) -> None:
        arr = np.array(self.scores, dtype=np.float32, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "scores", arr)
        if arr.ndim != 1:
            raise DimensionError(f"scores must be 1-D, got shape {tuple(arr.shape)}")
        if self.scorer not in SCORERS:
            raise DimensionError(f"unknown scorer {self.scorer!r}")

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    def with_exempt(self, index: int) -> "ImportanceScores":
        """Copy with the token at ``index`` marked never-prune (+inf)."""
        s = self.scores.copy()
        s[index] = np.inf
        return ImportanceScores(s, self.scorer, self.metric, self.op_choice)


def representation_shift(
    before: Tensor, after: Tensor, metric: str = METRIC_L2
) -> ImportanceScores:
    """Per-token distance between a branch's output and its input.

    ``before`` is the branch input and ``after`` the branch output F(x),
    excluding the residual addition. Metrics: l1 / l2 row distances, or
    cosine distance 1 - cos(angle) in [0, 2]. A zero-norm row under the
    cosine metric scores 1 (orthogonality convention) and is logged.
    """
    if metric not in METRICS:
        raise DimensionError(f"unknown metric {metric!r}, expected one of {METRICS}")
    b, a = before.to_numpy(), after.to_numpy()
    if b.shape != a.shape or b.ndim != 2:
        raise DimensionError(
            f"representation_shift needs matching 2-D inputs, got "
            f"{tuple(b.shape)} vs {tuple(a.shape)}"
        )
    if metric == METRIC_L1:
        scores = np.abs(a - b).sum(axis=1)
    elif metric == METRIC_L2:
        d = a - b
        scores = np.sqrt((d * d).sum(axis=1))
    else:
        # float64 with denom = sqrt(sa*sb): identical rows give dot == sa
        # bitwise and sqrt(sa*sa) == sa in IEEE round-to-nearest, so the
        # identity transformation scores exactly zero.
        a64, b64 = a.astype(np.float64), b.astype(np.float64)
        dot = (a64 * b64).sum(axis=1)
        sa = (a64 * a64).sum(axis=1)
        sb = (b64 * b64).sum(axis=1)
        denom = np.sqrt(sa * sb)
        zero = denom == 0.0
        if zero.any():
            logger.warning(
                "cosine shift: %d zero-norm row(s) scored as 1.0", int(zero.sum())
            )
        cos = np.where(zero, 0.0, dot / np.where(zero, 1.0, denom))
        scores = np.clip(1.0 - cos, 0.0, 2.0)
    return ImportanceScores(
        scores.astype(np.float32), SCORER_REP_SHIFT, metric=metric, op_choice=None
    )


def _require_map(artifacts: AttentionArtifacts) -> np.ndarray:
    if artifacts.attn_map is None:
        raise FusedIncompatible(_FUSED_MAP_ERROR)
    return artifacts.attn_map.to_numpy()


def cls_attention_score(artifacts: AttentionArtifacts) -> ImportanceScores:
    """Class-token attention row, averaged over heads.

    Token 0 must be the class token; its own score is the +inf sentinel so
    it is never pruned.
    """
    attn = _require_map(artifacts)  # (heads, N, N)
    scores = attn[:, 0, :].mean(axis=0).astype(np.float32)
    scores[0] = np.inf
    return ImportanceScores(scores, SCORER_CLS_ATTENTION)


def mean_attention_score(artifacts: AttentionArtifacts) -> ImportanceScores:
    """Column-mean attention received by each token, averaged over heads."""
    attn = _require_map(artifacts)
    scores = attn.mean(axis=1).mean(axis=0).astype(np.float32)
    return ImportanceScores(scores, SCORER_MEAN_ATTENTION)
