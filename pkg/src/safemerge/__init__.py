"""safemerge: checkpoint merging and safety-drift analysis for LLM/LVLM weights."""

__version__ = "0.1.0"

from .errors import (
    AlignmentError,
    JudgeError,
    SafemergeError,
    TensorFormatError,
    UnparseableVerdictError,
    ValidationError,
)
from .tensorfile import (
    AlignmentReport,
    Checkpoint,
    TensorMeta,
    open_checkpoint,
    validate_alignment,
    write_checkpoint,
)
from .merge import (
    LayerMask,
    MergeRecipe,
    TaskVector,
    apply_layer_mask,
    apply_task_vectors,
    classify_tensor_layer,
    dare_merge,
    dare_sparsify,
    linear_merge,
    task_vector,
    ties_merge,
)
from .drift import (
    ActivationDump,
    DriftCurve,
    SafetyLayerReport,
    activation_drift_curve,
    cosine_similarity,
    flag_safety_layers,
    load_activation_dump,
    save_activation_dump,
    weight_drift_curve,
)
from .metrics import (
    DEFAULT_REFUSAL_KEYWORDS,
    EvalRecord,
    MetricsReport,
    aggregate_trajectory,
    attack_success_rate,
    build_report,
    complement_asr,
    cumulative_score,
    exact_match_accuracy,
    refusal_rate,
    trajectory_json,
)
from .judge import JudgeConfig, SafetyLabel, classify_harmfulness, label_records
