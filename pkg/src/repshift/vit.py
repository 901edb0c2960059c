"""ViT-style encoder with token-pruning hooks.

Each block computes x' = SA(LN(x)) + x and x_hat = MLP(LN(x')) + x'. When a
schedule entry lands on a block, token scores are computed from that same
pass (no recomputation) and the lowest-ranked tokens are dropped from the
block's output:

* rep_shift scores compare a branch output to its input, before the
  residual add: attn -> D(SA(LN(x)), x), mlp -> D(MLP(LN(x')), x'),
  block -> D(x_hat, x).
* attn_score reads the materialized attention map (naive path only): the
  class-token row when a class token exists, the column mean otherwise.

Positional embeddings are added once at embed time; pruning just drops
rows, so survivors keep their original embeddings (tracked via
origin_index). The class token is exempted from pruning with a +inf score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    DEFAULT_TILE_SIZE,
    AttentionWeights,
    fused_attention,
    naive_attention,
)
from .compression import (
    CLS_ORIGIN,
    PruneSchedule,
    ScheduleEntry,
    TokenState,
    apply_prune,
    select_keep_indices,
    SELECT_BOTTOM,
)
from .errors import DimensionError, FusedIncompatible, ScheduleError
from .importance import (
    OP_ATTN,
    OP_BLOCK,
    OP_MLP,
    SCORER_CLS_ATTENTION,
    SCORER_MEAN_ATTENTION,
    SCORER_REP_SHIFT,
    ImportanceScores,
    cls_attention_score,
    mean_attention_score,
    representation_shift,
)
from .tensor import (
    Tensor,
    _record_alloc,
    gelu_raw,
    layer_norm_raw,
    tracked_matmul,
)

MODE_BASELINE = "baseline"
MODE_ATTN_SCORE = "attn_score"
MODE_REP_SHIFT = "rep_shift"
MODES = (MODE_BASELINE, MODE_ATTN_SCORE, MODE_REP_SHIFT)

IMPL_NAIVE = "naive"
IMPL_FUSED = "fused"
IMPLS = (IMPL_NAIVE, IMPL_FUSED)

MLP_RATIO = 4  # hidden width is always 4C


@dataclass(frozen=True)
class VitConfig:
    """Architecture of a ViT-style encoder."""

    image_size: tuple[int, int]
    patch_size: int
    depth: int
    width: int
    heads: int
    num_classes: int
    use_class_token: bool = True
    ln_eps: float = 1e-6

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_size", tuple(self.image_size))
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise DimensionError(
                f"image size {self.image_size} not divisible by patch size "
                f"{self.patch_size}"
            )
        if self.width % self.heads:
            raise DimensionError(
                f"width {self.width} not divisible by heads {self.heads}"
            )
        if self.depth < 1 or self.num_classes < 1:
            raise DimensionError("depth and num_classes must be >= 1")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch_size,
                self.image_size[1] // self.patch_size)

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid_shape
        return gh * gw

    @property
    def seq_len(self) -> int:
        return self.num_patches + (1 if self.use_class_token else 0)

    @property
    def hidden_width(self) -> int:
        return MLP_RATIO * self.width

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


def manifest(config: VitConfig) -> tuple[dict[str, tuple[int, ...]],
                                         dict[str, tuple[int, ...]]]:
    """Required and optional tensor names with their expected shapes."""
    c, hid, k = config.width, config.hidden_width, config.num_classes
    required: dict[str, tuple[int, ...]] = {
        "patch_embed.w": (config.patch_dim, c),
        "patch_embed.b": (c,),
        "pos_embed": (config.seq_len, c),
        "norm.g": (c,),
        "norm.b": (c,),
        "head.w": (c, k),
        "head.b": (k,),
    }
    if config.use_class_token:
        required["cls_token"] = (1, c)
    optional: dict[str, tuple[int, ...]] = {}
    for i in range(config.depth):
        p = f"blocks.{i}"
        required.update({
            f"{p}.ln1.g": (c,), f"{p}.ln1.b": (c,),
            f"{p}.attn.qkv_w": (c, 3 * c),
            f"{p}.attn.out_w": (c, c),
            f"{p}.ln2.g": (c,), f"{p}.ln2.b": (c,),
            f"{p}.mlp.w1": (c, hid), f"{p}.mlp.b1": (hid,),
            f"{p}.mlp.w2": (hid, c), f"{p}.mlp.b2": (c,),
        })
        optional[f"{p}.attn.qkv_b"] = (3 * c,)
        optional[f"{p}.attn.out_b"] = (c,)
    return required, optional


@dataclass(frozen=True)
class BlockParams:
    """Weights of one encoder block."""

    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionWeights
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @classmethod
    def from_tensors(cls, tensors: dict[str, Tensor], index: int,
                     heads: int) -> "BlockParams":
        p = f"blocks.{index}"
        attn = AttentionWeights(
            qkv_proj=tensors[f"{p}.attn.qkv_w"],
            out_proj=tensors[f"{p}.attn.out_w"],
            num_heads=heads,
            qkv_bias=tensors.get(f"{p}.attn.qkv_b"),
            out_bias=tensors.get(f"{p}.attn.out_b"),
        )
        return cls(
            ln1_g=tensors[f"{p}.ln1.g"], ln1_b=tensors[f"{p}.ln1.b"],
            attn=attn,
            ln2_g=tensors[f"{p}.ln2.g"], ln2_b=tensors[f"{p}.ln2.b"],
            mlp_w1=tensors[f"{p}.mlp.w1"], mlp_b1=tensors[f"{p}.mlp.b1"],
            mlp_w2=tensors[f"{p}.mlp.w2"], mlp_b2=tensors[f"{p}.mlp.b2"],
        )


@dataclass(frozen=True)
class PruneStep:
    """A schedule entry resolved against the live token count."""

    keep_total: int
    scorer: str
    metric: str
    op_choice: str
    select: str


@dataclass(frozen=True)
class BlockTrace:
    """Observability record emitted by each block."""

    n_tokens_in: int
    n_tokens_out: int
    scores: ImportanceScores | None = None
    shift_source: str | None = None


def resolve_prune_step(schedule: PruneSchedule, entry: ScheduleEntry,
                       state: TokenState, n_prunable_original: int) -> PruneStep:
    n_cls = 1 if state.has_class_token else 0
    prunable = state.n_live - n_cls
    r = entry.pruned_count(prunable, n_prunable_original, schedule.ratio_basis)
    if r >= prunable:
        raise ScheduleError(
            f"layer {entry.layer}: pruning {r} of {prunable} prunable tokens "
            f"would leave none"
        )
    return PruneStep(
        keep_total=state.n_live - r,
        scorer=schedule.scorer,
        metric=schedule.metric,
        op_choice=schedule.op_choice,
        select=schedule.select,
    )


def _residual_add(a: Tensor, b: Tensor) -> Tensor:
    out = a.to_numpy() + b.to_numpy()
    _record_alloc(out.shape)
    return Tensor._wrap(out)


def _mlp(x: np.ndarray, p: BlockParams) -> np.ndarray:
    h = tracked_matmul(x, p.mlp_w1.to_numpy()) + p.mlp_b1.to_numpy()
    h = gelu_raw(h)
    return tracked_matmul(h, p.mlp_w2.to_numpy()) + p.mlp_b2.to_numpy()


def block_forward(
    state: TokenState,
    params: BlockParams,
    mode: str = MODE_BASELINE,
    attn_impl: str = IMPL_FUSED,
    tile_size: int = DEFAULT_TILE_SIZE,
    prune: PruneStep | None = None,
    ln_eps: float = 1e-6,
) -> tuple[TokenState, BlockTrace]:
    """One encoder block, optionally scoring and pruning its output."""
    if mode not in MODES:
        raise ScheduleError(f"unknown mode {mode!r}")
    if attn_impl not in IMPLS:
        raise ScheduleError(f"unknown attn_impl {attn_impl!r}")
    scoring_from_map = prune is not None and mode == MODE_ATTN_SCORE
    if scoring_from_map and attn_impl == IMPL_FUSED:
        raise FusedIncompatible(
            "attn_score pruning needs the attention map, which the fused "
            "path never materializes; use naive attention or rep_shift"
        )

    x = state.tokens
    xm = x.to_numpy()
    a_in = layer_norm_raw(xm, params.ln1_g.to_numpy(), params.ln1_b.to_numpy(),
                          ln_eps)
    _record_alloc(a_in.shape)
    a_in_t = Tensor._wrap(a_in)
    if attn_impl == IMPL_NAIVE:
        art = naive_attention(a_in_t, params.attn, keep_map=scoring_from_map)
    else:
        art = fused_attention(a_in_t, params.attn, tile_size=tile_size)

    x_prime = _residual_add(x, art.output)
    b_in = layer_norm_raw(x_prime.to_numpy(), params.ln2_g.to_numpy(),
                          params.ln2_b.to_numpy(), ln_eps)
    mlp_out_m = _mlp(b_in, params)
    mlp_out = Tensor._wrap(mlp_out_m)
    x_hat = _residual_add(x_prime, mlp_out)

    n_in = state.n_live
    out_state = TokenState(tokens=x_hat, origin_index=state.origin_index)
    if prune is None:
        return out_state, BlockTrace(n_tokens_in=n_in, n_tokens_out=n_in)

    if mode == MODE_REP_SHIFT:
        if prune.op_choice == OP_ATTN:
            scores = representation_shift(x, art.output, prune.metric)
        elif prune.op_choice == OP_MLP:
            scores = representation_shift(x_prime, mlp_out, prune.metric)
        elif prune.op_choice == OP_BLOCK:
            scores = representation_shift(x, x_hat, prune.metric)
        else:
            raise ScheduleError(f"unknown op_choice {prune.op_choice!r}")
        shift_source = prune.op_choice
    elif mode == MODE_ATTN_SCORE:
        if prune.scorer == SCORER_CLS_ATTENTION:
            scores = cls_attention_score(art)
        elif prune.scorer == SCORER_MEAN_ATTENTION:
            scores = mean_attention_score(art)
        else:
            raise ScheduleError(
                f"attn_score mode cannot use scorer {prune.scorer!r}"
            )
        shift_source = None
    else:
        raise ScheduleError("baseline mode cannot take a prune step")

    cls_pos = state.class_position
    if cls_pos is not None:
        scores = scores.with_exempt(cls_pos)
    keep = select_keep_indices(scores, prune.keep_total,
                               lowest=prune.select == SELECT_BOTTOM)
    pruned = apply_prune(out_state, keep)
    return pruned, BlockTrace(
        n_tokens_in=n_in,
        n_tokens_out=pruned.n_live,
        scores=scores,
        shift_source=shift_source,
    )


def embed_image(image: Tensor, bundle) -> TokenState:
    """Patchify, project, add positional embeddings, prepend class token."""
    config: VitConfig = bundle.config
    h, w = config.image_size
    im = image.to_numpy()
    if im.shape != (h, w, 3):
        raise DimensionError(
            f"image must be ({h}, {w}, 3), got {tuple(im.shape)}"
        )
    p = config.patch_size
    gh, gw = config.grid_shape
    # (H, W, 3) -> (gh, gw, P*P*3), scanning patches row-major and pixels
    # row-major channel-last within each patch.
    patches = im.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4)
    patches = np.ascontiguousarray(patches).reshape(config.num_patches,
                                                    config.patch_dim)
    _record_alloc(patches.shape)
    t = bundle.tensors
    tokens = tracked_matmul(patches, t["patch_embed.w"].to_numpy())
    tokens = tokens + t["patch_embed.b"].to_numpy()
    pos = t["pos_embed"].to_numpy()
    if config.use_class_token:
        first = t["cls_token"].to_numpy()
        full = np.concatenate([first, tokens], axis=0) + pos
        origins = (CLS_ORIGIN,) + tuple(range(config.num_patches))
    else:
        full = tokens + pos
        origins = tuple(range(config.num_patches))
    _record_alloc(full.shape)
    return TokenState(tokens=Tensor._wrap(np.ascontiguousarray(full)),
                      origin_index=origins)


def check_run_setup(config: VitConfig, schedule: PruneSchedule, mode: str,
                    attn_impl: str) -> None:
    """Validate mode/scorer/impl consistency before running."""
    if mode not in MODES:
        raise ScheduleError(f"unknown mode {mode!r}")
    if attn_impl not in IMPLS:
        raise ScheduleError(f"unknown attn_impl {attn_impl!r}")
    if mode == MODE_BASELINE:
        if not schedule.is_empty:
            raise ScheduleError("baseline mode requires an empty schedule")
        return
    if schedule.is_empty:
        return
    if mode == MODE_REP_SHIFT and schedule.scorer != SCORER_REP_SHIFT:
        raise ScheduleError(
            f"rep_shift mode requires the rep_shift scorer, got "
            f"{schedule.scorer!r}"
        )
    if mode == MODE_ATTN_SCORE:
        if schedule.scorer not in (SCORER_CLS_ATTENTION, SCORER_MEAN_ATTENTION):
            raise ScheduleError(
                f"attn_score mode requires an attention scorer, got "
                f"{schedule.scorer!r}"
            )
        if attn_impl == IMPL_FUSED:
            raise FusedIncompatible(
                "attn_score pruning needs the attention map, which the "
                "fused path never materializes; use naive attention or "
                "rep_shift"
            )
        if schedule.scorer == SCORER_CLS_ATTENTION and not config.use_class_token:
            raise ScheduleError(
                "cls_attention scoring requires a class token"
            )
    schedule.validate(config.depth, config.num_patches)


def forward(
    image: Tensor,
    bundle,
    schedule: PruneSchedule | None = None,
    mode: str = MODE_BASELINE,
    attn_impl: str = IMPL_FUSED,
    tile_size: int = DEFAULT_TILE_SIZE,
) -> tuple[Tensor, list[BlockTrace]]:
    """Full forward pass: embed, L blocks with optional pruning, LN, head."""
    config: VitConfig = bundle.config
    schedule = schedule if schedule is not None else PruneSchedule()
    check_run_setup(config, schedule, mode, attn_impl)

    state = embed_image(image, bundle)
    t = bundle.tensors
    traces: list[BlockTrace] = []
    for i in range(config.depth):
        params = BlockParams.from_tensors(t, i, config.heads)
        entry = schedule.entry_for(i)
        prune = None
        if entry is not None:
            prune = resolve_prune_step(schedule, entry, state,
                                       config.num_patches)
        state, trace = block_forward(
            state, params, mode=mode, attn_impl=attn_impl,
            tile_size=tile_size, prune=prune, ln_eps=config.ln_eps,
        )
        traces.append(trace)

    final = layer_norm_raw(state.tokens.to_numpy(), t["norm.g"].to_numpy(),
                           t["norm.b"].to_numpy(), config.ln_eps)
    if config.use_class_token:
        pos = state.class_position
        if pos is None:
            raise ScheduleError("class token was pruned; cannot read head")
        head_in = final[pos:pos + 1]
    else:
        head_in = final.mean(axis=0, keepdims=True)
    logits = tracked_matmul(head_in, t["head.w"].to_numpy())
    logits = logits + t["head.b"].to_numpy()
    return Tensor._wrap(logits.reshape(-1)), traces
