"""Shipped tree fixtures and their environment samplers.

Three tasks are bundled: a 2-D particle with one obstacle (depth-one
tree), a 2-D particle with two obstacles combined under an intermediate
node (depth-two tree, the weights multiply along the path), and a planar
3-link arm with per-joint limit barriers, per-control-point obstacle
spaces (sharing one learnable weight), an end-effector attractor, and
root damper/identity-metric regularizers.

Each task has an `expert` variant with fixed analytic weights -- the
ground-truth policy the experiments imitate -- and a `learner` variant
with the same topology but randomly initialized network weights.  The
small two-child `y_tree` is the closed-form oracle case.

The canonical YAML encodings of all fixtures ship in fixtures/ next to
this module; builders and files are kept in sync by a test.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .errors import ConfigError
from .gds import attractor_leaf, damper_leaf, identity_metric_leaf, jointlimit_leaf, obstacle_leaf
from .sim import EnvSampler, sample_env, sample_start
from .taskmaps import AuxRef, distance_to_point, goal_offset, identity, joint_limit_1d, planar_fk
from .tree import PolicyState, TreeSpec, make_tree
from .weights import RadialGate, analytic_weight, constant_weight, mlp_weight

ARM_LINKS = (0.5, 0.4, 0.3)
ARM_JOINT_LO = (0.15, -2.2, -2.2)
ARM_JOINT_HI = (2.99, 2.2, 2.2)

_2D_ATTRACTOR = {"stiffness": 1.5, "damping": 3.4, "metric_scale": 1.0, "norm_scale": 8.0}
_2D_OBSTACLE = {
    "scale": 6.0,
    "length_scale": 0.25,
    "damping": 1.5,
    "damping_length": 0.4,
    "barrier_scale": 2.5,
    "barrier_length": 0.35,
}

_ARM_ATTRACTOR = {"stiffness": 1.6, "damping": 3.2, "metric_scale": 1.0, "norm_scale": 8.0}
_ARM_OBSTACLE = {
    "scale": 4.0,
    "length_scale": 0.2,
    "damping": 1.0,
    "damping_length": 0.3,
    "barrier_scale": 1.6,
    "barrier_length": 0.25,
}
_ARM_JOINTLIMIT = {
    "scale": 0.6,
    "length_scale": 0.12,
    "damping": 0.4,
    "damping_length": 0.2,
    "barrier_scale": 0.5,
    "barrier_length": 0.12,
}

MLP_HIDDEN_2D = (24,)
MLP_HIDDEN_ARM = (16,)


def _attractor_gate(aux_center: AuxRef, aux_radius: AuxRef, in_dim: int):
    # attractor fades out near the obstacle surface; the gates are kept
    # gentle (long length scales) so their gradients stay moderate
    return analytic_weight(
        RadialGate(
            base=0.7, amp=1.2, offset=0.7, length_scale=0.45,
            point=aux_center, radius=aux_radius,
        ),
        in_dim=in_dim,
    )


def _obstacle_gate(aux_center: AuxRef, aux_radius: AuxRef, in_dim: int):
    # obstacle response ramps up close to the surface (flipped gate)
    return analytic_weight(
        RadialGate(
            base=0.45, amp=1.6, offset=0.6, length_scale=-0.4,
            point=aux_center, radius=aux_radius,
        ),
        in_dim=in_dim,
    )


def build_2d1level(expert: bool = True) -> TreeSpec:
    aux_dim = 5  # [goal(2), center(2), radius]
    in_dim = 2 + aux_dim
    if expert:
        w_a = _attractor_gate(AuxRef(2, 2), AuxRef(4), in_dim)
        w_o = _obstacle_gate(AuxRef(2, 2), AuxRef(4), in_dim)
    else:
        w_a = mlp_weight(in_dim, MLP_HIDDEN_2D, "tanh")
        w_o = mlp_weight(in_dim, MLP_HIDDEN_2D, "tanh")
    return make_tree(
        "q", 2, aux_dim,
        edges=[
            ("q", "a_rmp", goal_offset(AuxRef(0, 2)), w_a),
            ("q", "o_rmp", distance_to_point(AuxRef(2, 2), AuxRef(4)), w_o),
        ],
        leaves={
            "a_rmp": attractor_leaf(2, _2D_ATTRACTOR),
            "o_rmp": obstacle_leaf(_2D_OBSTACLE),
        },
    )


def build_2d2level(expert: bool = True) -> TreeSpec:
    aux_dim = 8  # [goal(2), c1(2), r1, c2(2), r2]
    in_dim = 2 + aux_dim
    if expert:
        w_a = _attractor_gate(AuxRef(2, 2), AuxRef(4), in_dim)
        # gate of the combined obstacle node: active near the first obstacle,
        # per-obstacle gates refine below it (the weights multiply down the path)
        w_o = analytic_weight(
            RadialGate(base=0.55, amp=1.2, offset=0.9, length_scale=-0.5,
                       point=AuxRef(2, 2), radius=AuxRef(4)),
            in_dim=in_dim,
        )
        w_o1 = _obstacle_gate(AuxRef(2, 2), AuxRef(4), in_dim)
        w_o2 = _obstacle_gate(AuxRef(5, 2), AuxRef(7), in_dim)
    else:
        w_a = mlp_weight(in_dim, MLP_HIDDEN_2D, "tanh")
        w_o = mlp_weight(in_dim, MLP_HIDDEN_2D, "tanh")
        w_o1 = mlp_weight(in_dim, MLP_HIDDEN_2D, "tanh")
        w_o2 = mlp_weight(in_dim, MLP_HIDDEN_2D, "tanh")
    return make_tree(
        "q", 2, aux_dim,
        edges=[
            ("q", "a_rmp", goal_offset(AuxRef(0, 2)), w_a),
            ("q", "o", identity(2), w_o),
            ("o", "o_rmp1", distance_to_point(AuxRef(2, 2), AuxRef(4)), w_o1),
            ("o", "o_rmp2", distance_to_point(AuxRef(5, 2), AuxRef(7)), w_o2),
        ],
        leaves={
            "a_rmp": attractor_leaf(2, _2D_ATTRACTOR),
            "o_rmp1": obstacle_leaf(_2D_OBSTACLE),
            "o_rmp2": obstacle_leaf(_2D_OBSTACLE),
        },
    )


def build_arm(expert: bool = True) -> TreeSpec:
    aux_dim = 5
    lengths = np.asarray(ARM_LINKS)
    n = len(ARM_LINKS)
    cp_in = 2 + aux_dim  # control-point spaces are planar
    q_in = n + aux_dim

    def w_obs():
        if expert:
            return analytic_weight(
                RadialGate(base=0.5, amp=1.4, offset=0.4, length_scale=-0.3,
                           point=AuxRef(2, 2), radius=AuxRef(4)),
                in_dim=cp_in,
            )
        # one network serves every obstacle space on every control point
        return mlp_weight(cp_in, MLP_HIDDEN_ARM, "tanh", share="obs")

    if expert:
        w_a = analytic_weight(
            RadialGate(base=0.7, amp=1.1, offset=0.45, length_scale=0.4, point=AuxRef(0, 2)),
            in_dim=cp_in,
        )
        w_jl = lambda: constant_weight(0.8)  # noqa: E731
    else:
        w_a = mlp_weight(cp_in, MLP_HIDDEN_ARM, "tanh")
        w_jl = lambda: mlp_weight(q_in, (8,), "tanh", share="jl")  # noqa: E731

    edges = [
        ("q", "ee", planar_fk(lengths, n, 1.0), constant_weight(1.0)),
        ("ee", "a_rmp", goal_offset(AuxRef(0, 2)), w_a),
        ("ee", "o_rmp3", distance_to_point(AuxRef(2, 2), AuxRef(4)), w_obs()),
        ("q", "cp1", planar_fk(lengths, 1, 1.0), constant_weight(1.0)),
        ("cp1", "o_rmp1", distance_to_point(AuxRef(2, 2), AuxRef(4)), w_obs()),
        ("q", "cp2", planar_fk(lengths, 2, 1.0), constant_weight(1.0)),
        ("cp2", "o_rmp2", distance_to_point(AuxRef(2, 2), AuxRef(4)), w_obs()),
    ]
    leaves = {
        "a_rmp": attractor_leaf(2, _ARM_ATTRACTOR),
        "o_rmp1": obstacle_leaf(_ARM_OBSTACLE),
        "o_rmp2": obstacle_leaf(_ARM_OBSTACLE),
        "o_rmp3": obstacle_leaf(_ARM_OBSTACLE),
    }
    for j in range(n):
        for side, limit in (("lower", ARM_JOINT_LO[j]), ("upper", ARM_JOINT_HI[j])):
            name = f"{side[0]}jl{j}_rmp"
            edges.append(("q", name, joint_limit_1d(n, j, limit, side), w_jl()))
            leaves[name] = jointlimit_leaf(_ARM_JOINTLIMIT)
    edges.append(("q", "q_d", identity(n), constant_weight(1.0)))
    leaves["q_d"] = damper_leaf(n, 0.7)
    edges.append(("q", "q_mi", identity(n), constant_weight(1.0)))
    leaves["q_mi"] = identity_metric_leaf(n, 0.05)
    return make_tree("q", n, aux_dim, edges=edges, leaves=leaves)


def build_y_tree(conservative: bool = False) -> TreeSpec:
    """Two children under the root, literal geometry, no auxiliary state.

    With `conservative` the damping is zeroed and the weights are constant,
    so the root energy is an exact invariant of the continuous dynamics.
    """
    goal = np.array([1.1, 0.7])
    center = np.array([-0.6, 0.5])
    radius = 0.45
    att_gains = dict(_2D_ATTRACTOR)
    obs_gains = dict(_2D_OBSTACLE)
    if conservative:
        att_gains["damping"] = 0.0
        obs_gains["damping"] = 0.0
        w1 = constant_weight(1.0)
        w2 = constant_weight(1.0)
    else:
        w1 = analytic_weight(
            RadialGate(base=0.7, amp=1.3, offset=0.9, length_scale=0.35, point=goal),
            in_dim=2,
        )
        w2 = analytic_weight(
            RadialGate(base=0.45, amp=1.9, offset=0.4, length_scale=-0.25,
                       point=center, radius=radius),
            in_dim=2,
        )
    return make_tree(
        "p", 2, 0,
        edges=[
            ("p", "att", goal_offset(goal), w1),
            ("p", "obs", distance_to_point(center, radius), w2),
        ],
        leaves={"att": attractor_leaf(2, att_gains), "obs": obstacle_leaf(obs_gains)},
    )


_BUILDERS = {
    "2d1level_expert": lambda: build_2d1level(expert=True),
    "2d1level_learner": lambda: build_2d1level(expert=False),
    "2d2level_expert": lambda: build_2d2level(expert=True),
    "2d2level_learner": lambda: build_2d2level(expert=False),
    "arm_expert": lambda: build_arm(expert=True),
    "arm_learner": lambda: build_arm(expert=False),
    "y_tree": lambda: build_y_tree(conservative=False),
}

FIXTURE_NAMES = tuple(_BUILDERS)


def build_fixture(name: str) -> TreeSpec:
    if name not in _BUILDERS:
        raise ConfigError(f"unknown fixture {name!r}; have {sorted(_BUILDERS)}")
    return _BUILDERS[name]()


def fixture_text(name: str) -> str:
    """The shipped canonical YAML encoding."""
    if name not in _BUILDERS:
        raise ConfigError(f"unknown fixture {name!r}; have {sorted(_BUILDERS)}")
    return resources.files("rmptree").joinpath(f"fixtures/{name}.yaml").read_text()


def load_fixture(name: str) -> TreeSpec:
    from .serialize import tree_from_dict

    import yaml

    return tree_from_dict(yaml.safe_load(fixture_text(name)))


def env_sampler(task: str) -> EnvSampler:
    """Sampling ranges matching each fixture's auxiliary-state layout."""
    if task == "2d1level":
        return EnvSampler(kind="point2d", n_obstacles=1)
    if task == "2d2level":
        return EnvSampler(kind="point2d", n_obstacles=2)
    if task == "arm":
        return EnvSampler(
            kind="planar_arm",
            n_obstacles=1,
            bounds_lo=(-1.2, -0.2),
            bounds_hi=(1.2, 1.2),
            radius_range=(0.12, 0.2),
            clearance=0.18,
            start_goal_min_dist=0.5,
            start_speed=0.25,
            link_lengths=ARM_LINKS,
            joint_limits_lo=ARM_JOINT_LO,
            joint_limits_hi=ARM_JOINT_HI,
        )
    raise ConfigError(f"unknown task {task!r}")


def sample_task_state(task: str, rng: np.random.Generator) -> PolicyState:
    """A random in-distribution (q, qd, aux) for property checks."""
    if task == "y_tree":
        return PolicyState(
            q=rng.uniform(-1.5, 1.5, 2), qd=rng.uniform(-1.0, 1.0, 2), aux=np.zeros(0)
        )
    cfg = env_sampler(task)
    env = sample_env(cfg, rng)
    q0, qd0 = sample_start(cfg, env, rng)
    return PolicyState(q=q0, qd=qd0, aux=env.aux())
