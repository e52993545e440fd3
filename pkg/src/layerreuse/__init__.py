"""Layer-wise top-k attention reuse on a deterministic synthetic decoder.

The pipeline has four stages. Profile a full-attention decode to measure how
much top-k selections agree between layers. Plan which layers may reuse a
lower layer's selection instead of scoring their whole cache, minimizing the
number of full layers under an overlap threshold. Decode in hybrid mode under
that policy while measuring fidelity against the full baseline. Price the KV
traffic either way with an analytic cost model, including the case where
reused layers' caches are offloaded across a slow link.
"""

from .attention import (
    AttentionScores,
    BlockSet,
    LayerKvCache,
    TopKSet,
    block_aggregate_scores,
    block_max_of_logits,
    full_attention,
    softmax,
    sparse_attention,
    topk_blocks,
    topk_indices,
    topk_of_logits,
)
from .engine import (
    CostModelReport,
    DecodeRunResult,
    FidelityReport,
    FidelityTable,
    cost_model,
    fidelity_report,
    hybrid_decode,
    hybrid_decode_blocks,
)
from .errors import (
    ConfigurationError,
    InvalidInputError,
    InvalidSelectionError,
    LayerReuseError,
    NumericInputError,
)
from .formats import (
    read_cost_report,
    read_json,
    read_policy,
    read_run_result,
    read_sensitivity_report,
    read_similarity_matrix,
    read_trace,
    similarity_matrix_csv_rows,
    write_cost_report,
    write_policy,
    write_run_result,
    write_sensitivity_report,
    write_similarity_matrix,
    write_trace,
)
from .policy import (
    Action,
    DpCell,
    LayerPolicy,
    brute_force_policy,
    dp_optimize,
    static_jump_policy,
    validate_policy,
)
from .profiling import (
    LayerSensitivity,
    SensitivityReport,
    SimilarityMatrix,
    build_similarity_matrix,
    kl_extended,
    merge_similarity_matrices,
    overlap_ratio,
    relative_l2_error,
    sensitivity_profile,
)
from .synthetic import (
    DecodeTrace,
    SynthModelConfig,
    SyntheticModel,
    generate_model,
    run_full_trace,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AttentionScores",
    "BlockSet",
    "LayerKvCache",
    "TopKSet",
    "softmax",
    "full_attention",
    "sparse_attention",
    "topk_indices",
    "topk_of_logits",
    "block_aggregate_scores",
    "block_max_of_logits",
    "topk_blocks",
    "SynthModelConfig",
    "SyntheticModel",
    "DecodeTrace",
    "generate_model",
    "run_full_trace",
    "SimilarityMatrix",
    "LayerSensitivity",
    "SensitivityReport",
    "overlap_ratio",
    "build_similarity_matrix",
    "merge_similarity_matrices",
    "relative_l2_error",
    "kl_extended",
    "sensitivity_profile",
    "Action",
    "DpCell",
    "LayerPolicy",
    "dp_optimize",
    "brute_force_policy",
    "validate_policy",
    "static_jump_policy",
    "FidelityTable",
    "FidelityReport",
    "DecodeRunResult",
    "CostModelReport",
    "hybrid_decode",
    "hybrid_decode_blocks",
    "cost_model",
    "fidelity_report",
    "write_trace",
    "read_trace",
    "write_similarity_matrix",
    "read_similarity_matrix",
    "similarity_matrix_csv_rows",
    "write_sensitivity_report",
    "read_sensitivity_report",
    "write_policy",
    "read_policy",
    "write_run_result",
    "read_run_result",
    "write_cost_report",
    "read_cost_report",
    "read_json",
    "LayerReuseError",
    "ConfigurationError",
    "NumericInputError",
    "InvalidSelectionError",
    "InvalidInputError",
]
