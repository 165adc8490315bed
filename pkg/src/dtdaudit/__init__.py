"""Deep Taylor Decomposition, LRP rules and checks of their assumptions."""
from .diagnostics import (
    ClassSimilarity,
    RegionCheckResult,
    Table1Report,
    bias_counterexample,
    check_root_region,
    class_insensitivity,
    forge_relevance,
    higher_order_term,
    run_table1,
    verify_prop2,
    verify_prop3,
)
from .engine import (
    DegenerateSaliencyWarning,
    RelevanceTrace,
    relevance_at_layer,
    relevance_closed_form,
    relevance_train_free,
    saliency,
)
from .exceptions import (
    BoundaryProximity,
    ClassIndexError,
    DegenerateDenominator,
    DTDError,
    InputShapeError,
    OrthogonalDirection,
    RootUnavailable,
    SamplerExhausted,
    UnreachableTarget,
    ZeroRelevance,
)
from .experiment import ExperimentConfig, generate_network, sample_inputs
from .network import (
    ForwardTrace,
    GradientResult,
    LayerSpec,
    Network,
    RegionFingerprint,
    finite_difference_gradient,
    fingerprint,
    forward,
    gradient,
    load_network,
    save_network,
)
from .recursive import ConstantPerRegion, Custom, RecursiveRelevance, RootPolicy, RuleBased, relevance_recursive
from .rules import (
    LRP0,
    W2,
    ZPLUS,
    RootPoint,
    RuleKind,
    epsilon,
    find_root_linear,
    find_root_train_free,
    gamma,
    parse_rule,
    propagate_closed_form,
    search_direction,
)

__version__ = "0.1.0"
