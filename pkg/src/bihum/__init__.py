"""Null-control solver and Carleman-inequality audit toolkit for fourth-order
parabolic problems on boxes with Navier conditions."""

from .errors import (
    BihumError,
    CgStagnationError,
    ConfigParseError,
    ConfigValidationError,
    ConstructionInfeasibleError,
    CoupledSolveDivergenceError,
    DegenerateSolutionError,
    GridMismatchError,
    InstabilityError,
    InvalidRegionError,
    MissingRunError,
    NoConvergenceError,
    ShapeMismatchError,
    SweepDivergenceError,
    UnresolvedIterateError,
    WeightOverflowError,
)
from .discretization import (
    CoefficientSet,
    SpaceTimeField,
    SpatialGrid,
    TimeGrid,
    apply_forward_operator,
    apply_lower_order,
    apply_lower_order_t,
    box_mask,
    duality_check,
    sine_field,
    solve_adjoint,
    solve_forward,
)
from .weights import (
    DomainSpec,
    EtaField,
    WeightBundle,
    WeightPropertyReport,
    build_eta,
    check_weight_properties,
    eval_weights,
    weighted_source_norm,
    write_weights_csv,
)
from .hum import (
    HumConfig,
    HumResult,
    SweepReport,
    dense_gramian,
    epsilon_sweep,
    free_trajectory,
    gramian_apply,
    hum_solve,
)
from .carleman_audit import (
    AuditProblem,
    CarlemanReport,
    ConstantSweepTable,
    DualExtremalResult,
    audit_divergence_source,
    audit_l2_source,
    constant_sweep,
    solve_dual_extremal,
)
from .semilinear import (
    FixedPointTrace,
    NonlinearitySpec,
    averaged_jacobians,
    fixed_point_solve,
    make_nonlinearity,
    mean_value_residual,
    state_only_variant,
)

__version__ = "0.1.0"

__all__ = [
    "AuditProblem",
    "BihumError",
    "CarlemanReport",
    "CgStagnationError",
    "CoefficientSet",
    "ConfigParseError",
    "ConfigValidationError",
    "ConstantSweepTable",
    "ConstructionInfeasibleError",
    "CoupledSolveDivergenceError",
    "DegenerateSolutionError",
    "DomainSpec",
    "DualExtremalResult",
    "EtaField",
    "FixedPointTrace",
    "GridMismatchError",
    "HumConfig",
    "HumResult",
    "InstabilityError",
    "InvalidRegionError",
    "MissingRunError",
    "NoConvergenceError",
    "NonlinearitySpec",
    "ShapeMismatchError",
    "SpaceTimeField",
    "SpatialGrid",
    "SweepDivergenceError",
    "SweepReport",
    "TimeGrid",
    "UnresolvedIterateError",
    "WeightBundle",
    "WeightOverflowError",
    "WeightPropertyReport",
    "apply_forward_operator",
    "apply_lower_order",
    "apply_lower_order_t",
    "audit_divergence_source",
    "audit_l2_source",
    "averaged_jacobians",
    "box_mask",
    "build_eta",
    "check_weight_properties",
    "constant_sweep",
    "dense_gramian",
    "duality_check",
    "epsilon_sweep",
    "eval_weights",
    "fixed_point_solve",
    "free_trajectory",
    "gramian_apply",
    "hum_solve",
    "make_nonlinearity",
    "mean_value_residual",
    "sine_field",
    "solve_adjoint",
    "solve_dual_extremal",
    "solve_forward",
    "state_only_variant",
    "weighted_source_norm",
    "write_weights_csv",
]
