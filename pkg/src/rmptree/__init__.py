"""rmptree: weighted fusion of Riemannian motion policies on trees.

Leaf policies are geometric dynamical systems; edges carry task maps and
strictly positive weight functions.  The fused root policy provably
dissipates the weighted tree energy, the whole forward pass is
differentiable with respect to the weight parameters, and a small
simulator reproduces 2-D and planar-arm imitation experiments.
"""

from .errors import (
    ConfigError,
    DimensionError,
    NumericError,
    RmpTreeError,
    SingularityError,
    StabilityContractError,
)
from .gds import (
    GdsSpec,
    LeafOutput,
    attractor_leaf,
    damper_leaf,
    gds_curvature,
    gds_evaluate,
    identity_metric_leaf,
    jointlimit_leaf,
    obstacle_leaf,
)
from .numerics import finite_diff_grad, finite_diff_jacobian, is_psd, pseudo_inverse
from .taskmaps import (
    AuxRef,
    TaskMap,
    affine,
    compose,
    distance_to_point,
    goal_offset,
    identity,
    joint_limit_1d,
    map_curvature,
    map_eval,
    map_jacobian,
    planar_fk,
)
from .tree import (
    ChildTerm,
    Edge,
    NodeOutput,
    PolicyEval,
    PolicyState,
    StabilityWarning,
    TreeSpec,
    decompose_two_step,
    evaluate_policy,
    init_params,
    lyapunov_root,
    make_tree,
    n_params,
    pullback_star,
    pushforward,
    reduce_to_rmpflow,
    resolve,
)
from .weights import (
    CoordGate,
    MlpArch,
    RadialGate,
    WeightFn,
    analytic_weight,
    constant_weight,
    mlp_weight,
    weight_eval,
)

__version__ = "0.1.0"
