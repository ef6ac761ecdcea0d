"""Singular sets and control-transverse design for control-affine systems.

The toolkit computes where a system can be brought to rest by some control
input (the singular set), builds submanifolds transverse to the control
directions together with the dynamics they induce, and uses both to design
and verify feedback: invariance laws, isolated equilibria, and bifurcations
under manifold deformation.
"""

from .expr import (
    EvaluationError,
    Expr,
    ExprError,
    ParseError,
    UndeclaredVariableError,
    parse,
    parse_vector,
)
from .sysmodel import (
    ControlAffineSystem,
    GridSizeError,
    LinearControlSystem,
    RankStratification,
    StrictFeedbackSystem,
    distribution_corank,
    grid_points,
    matrix_corank,
    stratify,
)
from .sigma import (
    NewtonFailure,
    SigmaResidualFrame,
    SigmaSet,
    StratumError,
    residual_jacobian,
    residual_rank,
    sigma_continuation,
    sigma_grid_scan,
    sigma_linear,
    sigma_newton,
    sigma_residual,
    sigma_strict_feedback,
)
from .transverse import (
    EquilibriumRecord,
    LevelSetManifold,
    NotOnManifoldError,
    TransversalityCheck,
    TransversalityError,
    TransverseDynamics,
    TransverseManifold,
    find_equilibria,
    transversality_to_D,
    transversality_to_sigma,
    transverse_dynamics,
)
from .design import (
    BifurcationDiagram,
    BifurcationEvent,
    FeedbackLaw,
    Trajectory,
    simulate,
    synthesize_invariance_feedback,
    trace_bifurcation,
)

__version__ = "0.1.0"

__all__ = [
    "BifurcationDiagram",
    "BifurcationEvent",
    "ControlAffineSystem",
    "EquilibriumRecord",
    "EvaluationError",
    "Expr",
    "ExprError",
    "FeedbackLaw",
    "GridSizeError",
    "LevelSetManifold",
    "LinearControlSystem",
    "NewtonFailure",
    "NotOnManifoldError",
    "ParseError",
    "RankStratification",
    "SigmaResidualFrame",
    "SigmaSet",
    "StratumError",
    "StrictFeedbackSystem",
    "Trajectory",
    "TransversalityCheck",
    "TransversalityError",
    "TransverseDynamics",
    "TransverseManifold",
    "UndeclaredVariableError",
    "distribution_corank",
    "find_equilibria",
    "grid_points",
    "matrix_corank",
    "parse",
    "parse_vector",
    "residual_jacobian",
    "residual_rank",
    "sigma_continuation",
    "sigma_grid_scan",
    "sigma_linear",
    "sigma_newton",
    "sigma_residual",
    "sigma_strict_feedback",
    "simulate",
    "stratify",
    "synthesize_invariance_feedback",
    "trace_bifurcation",
    "transversality_to_D",
    "transversality_to_sigma",
    "transverse_dynamics",
]
