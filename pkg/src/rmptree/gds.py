"""Geometric dynamical system leaf policies.

A leaf is a (metric G, damping B, potential Phi) triple on its manifold,
evolving as  (G + Xi_G) xdd + xi_G = -grad(Phi) - B xd.  The curvature
terms Xi_G and xi_G come from the state dependence of the metric and
vanish when G is constant.  Every leaf also reports its energy
V = 1/2 xd^T G xd + Phi and the Lagrangian-like scalar
L = 1/2 xd^T G xd - Phi that the weighted tree combination consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .numerics import as_vector

# Floor used for metrics that would otherwise be exactly zero, keeping the
# root inertia invertible alongside the identity-metric leaf.
METRIC_FLOOR = 1e-6

# Exponentials are clamped at this argument so deep obstacle penetration
# saturates instead of overflowing.
_EXP_ARG_MAX = 60.0


def _exp(z):
    return np.exp(np.minimum(z, _EXP_ARG_MAX))


@dataclass
class LeafOutput:
    """Force map, inertia and the scalar bookkeeping of one node."""

    f: np.ndarray
    M: np.ndarray
    G: np.ndarray
    B: np.ndarray
    phi: float
    L: float
    V: float


class GdsSpec:
    """Interface of a leaf system.

    Subclasses provide the metric/damping/potential and their analytic
    partial derivatives; `metric_dx(x, xd)[k]` is dG/dx_k and
    `metric_dxd(x, xd)[k]` is dG/dxd_k, each a dim x dim matrix.
    """

    dim: int
    leaf_kind: str = "custom"
    potential_lower_bound: float = -np.inf

    def metric(self, x: np.ndarray, xd: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def metric_dx(self, x: np.ndarray, xd: np.ndarray) -> np.ndarray:
        return np.zeros((self.dim, self.dim, self.dim))

    def metric_dxd(self, x: np.ndarray, xd: np.ndarray) -> np.ndarray:
        return np.zeros((self.dim, self.dim, self.dim))

    def damping(self, x: np.ndarray, xd: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def potential(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def potential_grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gains(self) -> dict:
        """Constructor parameters, for serialization."""
        return {}

    def evaluate(self, x: np.ndarray, xd: np.ndarray) -> "LeafOutput":
        """Assemble the leaf output; simple leaves override with fused forms."""
        G = np.asarray(self.metric(x, xd), dtype=float)
        B = np.asarray(self.damping(x, xd), dtype=float)
        phi = float(self.potential(x))
        grad_phi = np.asarray(self.potential_grad(x), dtype=float)
        Xi, xi = self.curvature(x, xd)
        f = -grad_phi - B @ xd - xi
        kinetic = 0.5 * float(xd @ G @ xd)
        return LeafOutput(
            f=f, M=G + Xi, G=G, B=B, phi=phi, L=kinetic - phi, V=kinetic + phi
        )

    def curvature(self, x: np.ndarray, xd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(Xi, xi) from the metric partials; leaves with simple metrics
        override this with their closed forms."""
        dGdx = np.asarray(self.metric_dx(x, xd), dtype=float)
        dGdxd = np.asarray(self.metric_dxd(x, xd), dtype=float)
        if not (np.isfinite(dGdx).all() and np.isfinite(dGdxd).all()):
            raise NumericError("gds curvature: non-finite metric partials")
        # dGdxd[k, j, i] = dG[j, i] / dxd_k
        Xi = 0.5 * np.einsum("i,kji->jk", xd, dGdxd)
        xi = np.einsum("kji,k,i->j", dGdx, xd, xd) - 0.5 * np.einsum("kji,j,i->k", dGdx, xd, xd)
        return Xi, xi


def gds_curvature(spec: GdsSpec, x, xd) -> tuple[np.ndarray, np.ndarray]:
    """Curvature terms (Xi, xi) of the leaf metric at (x, xd).

    Xi = 1/2 sum_i xd_i * d(g_i)/d(xd)   (columns g_i of G)
    xi = [dG/dx contracted twice with xd] - 1/2 grad_x(xd^T G xd)

    For a metric that depends on x only, Xi = 0 and xi reduces to the
    classical Coriolis product of the metric's Christoffel symbols.
    """
    x = as_vector(x, spec.dim, "gds state")
    xd = as_vector(xd, spec.dim, "gds velocity")
    return spec.curvature(x, xd)


def gds_evaluate(spec: GdsSpec, x, xd) -> LeafOutput:
    """Evaluate the leaf: f = -grad(Phi) - B xd - xi,  M = G + Xi."""
    x = np.asarray(x, dtype=float)
    xd = np.asarray(xd, dtype=float)
    if x.shape != (spec.dim,) or xd.shape != (spec.dim,):
        raise DimensionError(
            f"gds_evaluate: state shapes {x.shape}/{xd.shape} != ({spec.dim},)"
        )
    out = spec.evaluate(x, xd)
    if not np.isfinite(out.f).all():
        raise NumericError(f"gds_evaluate: non-finite force from {spec.leaf_kind} leaf")
    return out


def _positive(gains: dict, key: str, default: float) -> float:
    v = float(gains.get(key, default))
    if v <= 0.0:
        raise ConfigError(f"gain {key!r} must be positive, got {v}")
    return v


def _non_negative(gains: dict, key: str, default: float) -> float:
    v = float(gains.get(key, default))
    if v < 0.0:
        raise ConfigError(f"gain {key!r} must be >= 0, got {v}")
    return v


@dataclass
class AttractorGds(GdsSpec):
    """Pulls its coordinate toward the origin through a soft-norm well.

    Phi(y) = stiffness * (||y|| - log(1 + norm_scale ||y||) / norm_scale),
    whose gradient  stiffness * norm_scale * y / (1 + norm_scale ||y||)
    is smooth at the origin and saturates at ||grad|| = stiffness far out,
    so forces stay bounded in large workspaces.
    """

    dim: int
    stiffness: float
    damp: float
    metric_scale: float
    norm_scale: float
    leaf_kind = "attractor"
    potential_lower_bound = 0.0

    def __post_init__(self):
        self._G = self.metric_scale * np.eye(self.dim)
        self._B = self.damp * np.eye(self.dim)
        self._zero = (np.zeros((self.dim, self.dim)), np.zeros(self.dim))

    def metric(self, x, xd):
        return self._G

    def damping(self, x, xd):
        return self._B

    def curvature(self, x, xd):
        return self._zero

    def evaluate(self, x, xd):
        r = float(np.sqrt(x @ x))
        phi = self.stiffness * (r - np.log1p(self.norm_scale * r) / self.norm_scale)
        grad = (self.stiffness * self.norm_scale / (1.0 + self.norm_scale * r)) * x
        kinetic = 0.5 * self.metric_scale * float(xd @ xd)
        return LeafOutput(
            f=-grad - self.damp * xd, M=self._G, G=self._G, B=self._B,
            phi=phi, L=kinetic - phi, V=kinetic + phi,
        )

    def potential(self, x):
        r = float(np.sqrt(x @ x))
        return self.stiffness * (r - np.log1p(self.norm_scale * r) / self.norm_scale)

    def potential_grad(self, x):
        r = float(np.sqrt(x @ x))
        return self.stiffness * self.norm_scale * x / (1.0 + self.norm_scale * r)

    def gains(self):
        return {
            "stiffness": self.stiffness,
            "damping": self.damp,
            "metric_scale": self.metric_scale,
            "norm_scale": self.norm_scale,
        }


@dataclass
class BarrierGds(GdsSpec):
    """1-D barrier on a signed-distance coordinate d.

    The metric grows only while the coordinate shrinks (approach):
    g(d, dd) = scale * exp(-d / length_scale) * relu(-dd)^2 + epsilon.
    The relu^2 gate keeps dg/ddd continuous, which Xi_G needs.  The
    potential barrier_scale * exp(-d / barrier_length) is decreasing in d
    and bounded below by zero.  Evaluation at d <= 0 (post-collision) is
    permitted; the simulator flags it as an event.
    """

    scale: float
    length_scale: float
    damp: float
    damping_length: float
    barrier_scale: float
    barrier_length: float
    epsilon: float
    leaf_kind = "obstacle"
    dim = 1
    potential_lower_bound = 0.0

    def _gate(self, xd):
        return max(-float(xd[0]), 0.0)

    def metric(self, x, xd):
        r = self._gate(xd)
        g = self.scale * float(_exp(-x[0] / self.length_scale)) * r * r + self.epsilon
        return np.array([[g]])

    def metric_dx(self, x, xd):
        r = self._gate(xd)
        dg = -self.scale / self.length_scale * float(_exp(-x[0] / self.length_scale)) * r * r
        return np.array([[[dg]]])

    def metric_dxd(self, x, xd):
        r = self._gate(xd)
        # d(relu(-v)^2)/dv = -2 relu(-v), continuous through v = 0
        dg = -2.0 * self.scale * float(_exp(-x[0] / self.length_scale)) * r
        return np.array([[[dg]]])

    def curvature(self, x, xd):
        r = self._gate(xd)
        e = float(_exp(-x[0] / self.length_scale))
        v = float(xd[0])
        dg_dv = -2.0 * self.scale * e * r
        dg_dd = -self.scale / self.length_scale * e * r * r
        return np.array([[0.5 * v * dg_dv]]), np.array([0.5 * dg_dd * v * v])

    def evaluate(self, x, xd):
        d = float(x[0])
        v = float(xd[0])
        r = max(-v, 0.0)
        e = float(_exp(-d / self.length_scale))
        g = self.scale * e * r * r + self.epsilon
        xi = -0.5 * self.scale / self.length_scale * e * r * r * v * v
        big_xi = -self.scale * e * r * v  # 1/2 v dg/dv
        b = self.damp * float(_exp(-d / self.damping_length))
        phi = self.barrier_scale * float(_exp(-d / self.barrier_length))
        grad_phi = -phi / self.barrier_length
        kinetic = 0.5 * g * v * v
        return LeafOutput(
            f=np.array([-grad_phi - b * v - xi]),
            M=np.array([[g + big_xi]]),
            G=np.array([[g]]),
            B=np.array([[b]]),
            phi=phi, L=kinetic - phi, V=kinetic + phi,
        )

    def damping(self, x, xd):
        return np.array([[self.damp * float(_exp(-x[0] / self.damping_length))]])

    def potential(self, x):
        return self.barrier_scale * float(_exp(-x[0] / self.barrier_length))

    def potential_grad(self, x):
        return np.array(
            [-self.barrier_scale / self.barrier_length * float(_exp(-x[0] / self.barrier_length))]
        )

    def gains(self):
        return {
            "scale": self.scale,
            "length_scale": self.length_scale,
            "damping": self.damp,
            "damping_length": self.damping_length,
            "barrier_scale": self.barrier_scale,
            "barrier_length": self.barrier_length,
            "epsilon": self.epsilon,
        }


@dataclass
class DamperGds(GdsSpec):
    """Constant damper: f = -b xd under an epsilon metric."""

    dim: int
    b: float
    epsilon: float = METRIC_FLOOR
    leaf_kind = "damper"
    potential_lower_bound = 0.0

    def __post_init__(self):
        self._G = self.epsilon * np.eye(self.dim)
        self._B = self.b * np.eye(self.dim)
        self._zero = (np.zeros((self.dim, self.dim)), np.zeros(self.dim))

    def metric(self, x, xd):
        return self._G

    def damping(self, x, xd):
        return self._B

    def curvature(self, x, xd):
        return self._zero

    def evaluate(self, x, xd):
        kinetic = 0.5 * self.epsilon * float(xd @ xd)
        return LeafOutput(
            f=-self.b * xd, M=self._G, G=self._G, B=self._B,
            phi=0.0, L=kinetic, V=kinetic,
        )

    def potential(self, x):
        return 0.0

    def potential_grad(self, x):
        return np.zeros(self.dim)

    def gains(self):
        return {"b": self.b, "epsilon": self.epsilon}


@dataclass
class IdentityMetricGds(GdsSpec):
    """Pure regularizer: zero force, eps * I inertia, keeps resolve stable."""

    dim: int
    eps: float
    leaf_kind = "identity_metric"
    potential_lower_bound = 0.0

    def __post_init__(self):
        self._G = self.eps * np.eye(self.dim)
        self._B = np.zeros((self.dim, self.dim))
        self._zero = (np.zeros((self.dim, self.dim)), np.zeros(self.dim))

    def metric(self, x, xd):
        return self._G

    def damping(self, x, xd):
        return self._B

    def curvature(self, x, xd):
        return self._zero

    def evaluate(self, x, xd):
        kinetic = 0.5 * self.eps * float(xd @ xd)
        return LeafOutput(
            f=self._zero[1], M=self._G, G=self._G, B=self._B,
            phi=0.0, L=kinetic, V=kinetic,
        )

    def potential(self, x):
        return 0.0

    def potential_grad(self, x):
        return np.zeros(self.dim)

    def gains(self):
        return {"eps": self.eps}


def attractor_leaf(dim: int, gains: dict | None = None) -> GdsSpec:
    gains = dict(gains or {})
    if dim < 1:
        raise ConfigError(f"attractor dim must be >= 1, got {dim}")
    return AttractorGds(
        dim=dim,
        stiffness=_positive(gains, "stiffness", 1.0),
        damp=_non_negative(gains, "damping", 2.0),
        metric_scale=_positive(gains, "metric_scale", 1.0),
        norm_scale=_positive(gains, "norm_scale", 8.0),
    )


def obstacle_leaf(gains: dict | None = None) -> GdsSpec:
    gains = dict(gains or {})
    scale = _positive(gains, "scale", 1.0)
    length_scale = _positive(gains, "length_scale", 0.3)
    leaf = BarrierGds(
        scale=scale,
        length_scale=length_scale,
        damp=_non_negative(gains, "damping", 1.0),
        damping_length=_positive(gains, "damping_length", length_scale),
        barrier_scale=_non_negative(gains, "barrier_scale", scale),
        barrier_length=_positive(gains, "barrier_length", length_scale),
        epsilon=_positive(gains, "epsilon", METRIC_FLOOR),
    )
    return leaf


def jointlimit_leaf(gains: dict | None = None) -> GdsSpec:
    """Barrier on a 1-D joint-limit margin; same family as obstacle_leaf
    with sharper defaults."""
    gains = dict(gains or {})
    scale = _positive(gains, "scale", 0.5)
    length_scale = _positive(gains, "length_scale", 0.15)
    leaf = BarrierGds(
        scale=scale,
        length_scale=length_scale,
        damp=_non_negative(gains, "damping", 0.5),
        damping_length=_positive(gains, "damping_length", length_scale),
        barrier_scale=_non_negative(gains, "barrier_scale", scale),
        barrier_length=_positive(gains, "barrier_length", length_scale),
        epsilon=_positive(gains, "epsilon", METRIC_FLOOR),
    )
    leaf.leaf_kind = "jointlimit"
    return leaf


def damper_leaf(dim: int, b: float, epsilon: float = METRIC_FLOOR) -> GdsSpec:
    if dim < 1:
        raise ConfigError(f"damper dim must be >= 1, got {dim}")
    if b <= 0.0:
        raise ConfigError(f"damper coefficient must be positive, got {b}")
    if epsilon <= 0.0:
        raise ConfigError(f"damper metric floor must be positive, got {epsilon}")
    return DamperGds(dim=dim, b=float(b), epsilon=float(epsilon))


def identity_metric_leaf(dim: int, eps: float) -> GdsSpec:
    if dim < 1:
        raise ConfigError(f"identity-metric dim must be >= 1, got {dim}")
    if eps <= 0.0:
        raise ConfigError(f"identity-metric eps must be positive, got {eps}")
    return IdentityMetricGds(dim=dim, eps=float(eps))
