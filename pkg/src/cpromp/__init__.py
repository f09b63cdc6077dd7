"""Constrained probabilistic movement primitives.

Learn ProMPs from demonstrations and adapt them to new scenarios by
minimising the KL divergence to the original primitive subject to
probabilistic trajectory constraints.
"""
import jax

# All kernels assume double precision; this must run before any jax array exists.
jax.config.update("jax_enable_x64", True)

from cpromp.errors import (  # noqa: E402
    ConstraintError,
    CProMPError,
    DomainError,
    NumericError,
    ProblemFormatError,
)
from cpromp.promp import (  # noqa: E402
    BasisConfig,
    DemoSet,
    GaussianMoments,
    ProMP,
    basis_features,
    condition,
    kl_weights,
    learn_em,
    marginal_moments,
    sample_trajectories,
)
from cpromp.kinematics import (  # noqa: E402
    KinematicChain,
    UTConfig,
    forward_kinematics,
    task_moments,
    ut_propagate,
)
from cpromp.constraints import (  # noqa: E402
    Hyperplane,
    JointLimit,
    MutualAvoidance,
    NonConvexCorner,
    Repeller,
    Smoothness,
    UnboundWaypoint,
    Waypoint,
)
from cpromp.objective import AdaptationProblem, ObjectiveSpec  # noqa: E402
from cpromp.optimizer import AdaptationResult, SolverConfig, adapt  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AdaptationProblem",
    "AdaptationResult",
    "Hyperplane",
    "JointLimit",
    "MutualAvoidance",
    "NonConvexCorner",
    "ObjectiveSpec",
    "Repeller",
    "Smoothness",
    "SolverConfig",
    "UnboundWaypoint",
    "Waypoint",
    "adapt",
    "BasisConfig",
    "ConstraintError",
    "CProMPError",
    "DemoSet",
    "DomainError",
    "GaussianMoments",
    "KinematicChain",
    "NumericError",
    "ProMP",
    "ProblemFormatError",
    "UTConfig",
    "basis_features",
    "condition",
    "forward_kinematics",
    "kl_weights",
    "learn_em",
    "marginal_moments",
    "sample_trajectories",
    "task_moments",
    "ut_propagate",
]
