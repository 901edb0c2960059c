"""Inference engine for vision models with representation-shift token pruning.

Token importance is measured as the distance each token moves through a
layer's transformation, which needs no attention map and therefore composes
with fused (online-softmax) attention and with CNN grids.
"""

from .attention import (
    AttentionArtifacts,
    AttentionWeights,
    fused_attention,
    naive_attention,
)
from .cnn import (
    CnnConfig,
    PrunePlanEntry,
    StageSpec,
    cnn_forward,
    stage_forward,
    stage_shift,
)
from .compression import (
    PruneSchedule,
    ScheduleEntry,
    TokenState,
    apply_prune,
    line_wise_prune,
    select_keep_indices,
    token_wise_prune,
)
from .errors import (
    BadMagic,
    ConfigError,
    ContainerError,
    DigestMismatch,
    DimensionError,
    EngineError,
    FusedIncompatible,
    NonFiniteError,
    ScheduleError,
    ShapeMismatch,
    VersionUnsupported,
)
from .fixtures import (
    PlantedFixture,
    load_fixture,
    make_cnn_planted_fixture,
    make_planted_fixture,
    make_synthetic_bundle,
    make_synthetic_cnn_bundle,
    save_fixture,
)
from .harness import (
    BenchReport,
    estimate_cnn_flops,
    estimate_flops,
    evaluate,
    flops_breakdown,
    run_ablation,
    run_ablation_grid,
    run_benchmark,
    run_reliability,
    with_speedup,
)
from .estimators import TokenPruningClassifier, check_image_batch
from .importance import (
    ImportanceScores,
    cls_attention_score,
    mean_attention_score,
    representation_shift,
)
from .model_io import (
    ModelBundle,
    load_bundle,
    make_bundle,
    parse_run_config,
    save_bundle,
)
from .tensor import (
    Tensor,
    count_flops,
    gelu,
    layer_norm,
    matmul,
    row_norm,
    softmax_rows,
    track_allocations,
)
from .vit import BlockTrace, VitConfig, block_forward, forward

__version__ = "0.1.0"
