"""Shapley and concept-sensitivity explanations for attention models."""

from .attribution import METHODS, TokenAttributor, attribute
from .cav import (
    Cav,
    LinearProbe,
    SensitivityRecord,
    TcavReport,
    cav_from_probe,
    collect_activations,
    directional_derivative,
    relative_cav,
    significance_test,
    tcav_scores,
    token_directional_derivatives,
    train_probe,
)
from .exceptions import (
    AttnShapError,
    ConfigError,
    DataError,
    DimensionError,
    InvalidInputError,
    NumericError,
)
from .metrics import (
    MetricConfig,
    MetricReport,
    comprehensiveness,
    evaluate_suite,
    f1_weighted,
    sufficiency,
    top_b_tokens,
)
from .shapley import (
    AttributionResult,
    CharacteristicSpec,
    MaskingPayload,
    SamplingScheme,
    closed_form_cls,
    closed_form_mutual,
    exact_shapley,
    grad_sam_scores,
    kernel_weight,
    sampled_shapley,
)
from .tensor import (
    AttentionStack,
    ContributionMatrix,
    GradientStack,
    average_attention,
    contribution_matrix,
    raw_attention_importance,
)
from .transformer import (
    ModelConfig,
    SequenceInput,
    ToyTransformer,
    attention_gradients,
    hidden_gradient,
    mask_tokens,
    patchify,
)

__version__ = "0.1.0"
