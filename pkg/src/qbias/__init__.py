"""Bounded-rounding quantization of phrase embeddings plus a fused
streaming top-k kernel, so a biasing catalogue can be scored against
acoustic queries in per-group table lookups instead of dense matmuls."""

from .errors import (
    BadMagicError,
    BadVersionError,
    ChecksumError,
    ConfigurationError,
    DataError,
    IndexLoadError,
    InputError,
    QbiasError,
    StateError,
    TrainingError,
    TruncatedFileError,
)
from .fsq import (
    FsqConfig,
    FsqParams,
    Quantized,
    ValueSet,
    bound_round,
    capacity,
    normalize,
    pack_codes,
    packing_supported,
    quantize,
    reconstruct,
    unpack_codes,
)
from .attention import (
    AttentionOutput,
    ProjectionSet,
    attend,
    dense_scores,
    project,
    quantized_attend,
)
from .retrieval import (
    Columns,
    RetrievalResult,
    ScoreTable,
    approx_score,
    build_score_table,
    precompute_columns,
    score_matrix,
    topk_from_codes,
    topk_retrieve,
    union_retrieved,
)

__version__ = "0.1.0"
