"""Query-directed sparse attention transformer for long-document ranking."""

__version__ = "0.1.0"

from .attention import (
    AttentionTrace,
    AttentionWeights,
    CostEstimate,
    ForwardCache,
    HeadConfig,
    dense_reference_attention,
    flop_estimate,
    masked_softmax_row,
    project_qkv,
    sparse_attention_backward,
    sparse_attention_forward,
)
from .errors import (
    CorruptModel,
    EmptyResult,
    InternalInvariantViolation,
    InvalidInput,
    InvalidState,
    MissingDocument,
    NumericalError,
    ParseError,
    QDSTError,
)
from .model import (
    AdamState,
    LossKind,
    ModelConfig,
    ModelParams,
    Ranker,
    TrainConfig,
    encode,
    load_params,
    save_params,
    score,
    train_step,
)
from .pattern import (
    BlockSparsePattern,
    PatternConfig,
    Preset,
    SequenceLayout,
    SparsityStats,
    TokenRole,
    build_layout,
    build_pattern,
    cls_mask,
    local_mask,
    query_mask,
    sentence_mask,
    sparsity,
)
