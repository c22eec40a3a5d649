"""Differentiable maps placed on tree edges.

Each map family supplies its value, analytic Jacobian, and the curvature
vector Jdot(x, xd) @ xd that the pullback needs.  No runtime autodiff: the
families are small and closed-form, which keeps rollout cost predictable.

Map parameters may be literals or :class:`AuxRef` slices into the
per-rollout auxiliary state (goal location, obstacle geometry).  A map
holding aux references must be bound with :meth:`TaskMap.bind` before
evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, SingularityError
from .numerics import as_matrix, as_vector

# Evaluating the distance-map derivative closer to the center than this
# raises instead of returning an arbitrary subgradient.
CENTER_SINGULARITY_RADIUS = 1e-9

_EYE_CACHE: dict[int, np.ndarray] = {}


def _eye(dim: int) -> np.ndarray:
    """Shared read-only identity (hot-path Jacobians; do not mutate)."""
    if dim not in _EYE_CACHE:
        e = np.eye(dim)
        e.setflags(write=False)
        _EYE_CACHE[dim] = e
    return _EYE_CACHE[dim]


@dataclass(frozen=True)
class AuxRef:
    """A slice [offset, offset+length) of the auxiliary state vector."""

    offset: int
    length: int = 1

    def pick(self, aux: np.ndarray) -> np.ndarray:
        if self.offset < 0 or self.offset + self.length > aux.shape[0]:
            raise DimensionError(
                f"aux reference [{self.offset}:{self.offset + self.length}] "
                f"out of range for aux of dim {aux.shape[0]}"
            )
        return aux[self.offset : self.offset + self.length]


def _resolve(value, aux: np.ndarray | None, what: str):
    if isinstance(value, AuxRef):
        if aux is None:
            raise ConfigError(f"{what} references the auxiliary state but no aux was bound")
        return value.pick(aux)
    return value


class TaskMap:
    """Base class; concrete families subclass and fill in the geometry."""

    kind: str = "abstract"
    in_dim: int
    out_dim: int

    def bind(self, aux: np.ndarray) -> "TaskMap":
        """Substitute aux-state references with concrete values."""
        return self

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def curvature(self, x: np.ndarray, xd: np.ndarray) -> np.ndarray:
        """Return Jdot(x, xd) @ xd."""
        raise NotImplementedError

    def _check_unbound(self) -> None:
        pass


def map_eval(m: TaskMap, x) -> np.ndarray:
    x = as_vector(x, m.in_dim, "map input")
    return m.value(x)


def map_jacobian(m: TaskMap, x) -> np.ndarray:
    x = as_vector(x, m.in_dim, "map input")
    return m.jacobian(x)


def map_curvature(m: TaskMap, x, xd) -> np.ndarray:
    x = as_vector(x, m.in_dim, "map input")
    xd = as_vector(xd, m.in_dim, "map velocity")
    return m.curvature(x, xd)


@dataclass(frozen=True, eq=False)
class IdentityMap(TaskMap):
    dim: int
    kind = "identity"

    @property
    def in_dim(self) -> int:
        return self.dim

    @property
    def out_dim(self) -> int:
        return self.dim

    def value(self, x):
        return x

    def jacobian(self, x):
        return _eye(self.dim)

    def curvature(self, x, xd):
        return np.zeros(self.dim)


@dataclass(frozen=True, eq=False)
class AffineMap(TaskMap):
    A: np.ndarray
    b: np.ndarray
    kind = "affine"

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.A.shape[0]

    def value(self, x):
        return self.A @ x + self.b

    def jacobian(self, x):
        return self.A

    def curvature(self, x, xd):
        return np.zeros(self.out_dim)


@dataclass(frozen=True, eq=False)
class GoalOffsetMap(TaskMap):
    """y = x - x_g: attractor coordinates with the goal at the origin."""

    goal: np.ndarray | AuxRef
    kind = "goal_offset"

    @property
    def dim(self) -> int:
        return self.goal.length if isinstance(self.goal, AuxRef) else self.goal.shape[0]

    @property
    def in_dim(self) -> int:
        return self.dim

    @property
    def out_dim(self) -> int:
        return self.dim

    def bind(self, aux):
        if isinstance(self.goal, AuxRef):
            return GoalOffsetMap(goal=np.asarray(self.goal.pick(aux), dtype=float))
        return self

    def value(self, x):
        return x - _resolve(self.goal, None, "goal_offset goal")

    def jacobian(self, x):
        return _eye(self.dim)

    def curvature(self, x, xd):
        return np.zeros(self.dim)


@dataclass(frozen=True, eq=False)
class DistanceMap(TaskMap):
    """Scalar signed distance to a ball: y = ||x - c|| - r.

    Negative inside the ball; the policies decide what to do there, not
    the map.  The derivative is undefined at the center, so jacobian and
    curvature raise within CENTER_SINGULARITY_RADIUS of it.
    """

    center: np.ndarray | AuxRef
    radius: float | AuxRef
    kind = "distance_to_point"

    @property
    def in_dim(self) -> int:
        return self.center.length if isinstance(self.center, AuxRef) else self.center.shape[0]

    out_dim = 1

    def bind(self, aux):
        if isinstance(self.center, AuxRef) or isinstance(self.radius, AuxRef):
            center = np.asarray(_resolve(self.center, aux, "distance center"), dtype=float)
            radius = _resolve(self.radius, aux, "distance radius")
            return DistanceMap(center=center, radius=float(np.asarray(radius).reshape(())))
        return self

    def _delta(self, x):
        return x - _resolve(self.center, None, "distance center")

    def value(self, x):
        d = self._delta(x)
        r = _resolve(self.radius, None, "distance radius")
        return np.array([float(np.sqrt(d @ d)) - float(r)])

    def _norm_checked(self, d):
        n = float(np.sqrt(d @ d))
        if n <= CENTER_SINGULARITY_RADIUS:
            raise SingularityError("distance_to_point: derivative undefined at the center")
        return n

    def jacobian(self, x):
        d = self._delta(x)
        n = self._norm_checked(d)
        return (d / n)[None, :]

    def curvature(self, x, xd):
        # d/dt of the unit-vector row, contracted with xd:
        # (||xd||^2 - (dhat . xd)^2) / ||d||
        d = self._delta(x)
        n = self._norm_checked(d)
        radial = float(d @ xd) / n
        return np.array([(float(xd @ xd) - radial * radial) / n])


@dataclass(frozen=True, eq=False)
class JointLimitMap(TaskMap):
    """1-D margin to one joint limit: x_j - lo (side='lower') or hi - x_j."""

    dim: int
    joint: int
    limit: float
    side: str
    kind = "joint_limit_1d"

    @property
    def in_dim(self) -> int:
        return self.dim

    out_dim = 1

    def _sign(self) -> float:
        return 1.0 if self.side == "lower" else -1.0

    def value(self, x):
        s = self._sign()
        return np.array([s * x[self.joint] - s * self.limit])

    def jacobian(self, x):
        J = np.zeros((1, self.dim))
        J[0, self.joint] = self._sign()
        return J

    def curvature(self, x, xd):
        return np.zeros(1)


@dataclass(frozen=True, eq=False)
class PlanarFkMap(TaskMap):
    """Planar revolute-arm control point: position of the point a given
    fraction along a given link, as a function of the joint angles."""

    lengths: np.ndarray
    link: int
    fraction: float
    kind = "planar_fk"

    @property
    def in_dim(self) -> int:
        return self.lengths.shape[0]

    out_dim = 2

    def _segments(self):
        # effective segment lengths up to (and including) the control point
        k = self.link
        seg = self.lengths[:k].copy()
        seg[k - 1] *= self.fraction
        return seg

    def value(self, x):
        phi = np.cumsum(x[: self.link])
        seg = self._segments()
        return np.array([float(seg @ np.cos(phi)), float(seg @ np.sin(phi))])

    def jacobian(self, x):
        phi = np.cumsum(x[: self.link])
        seg = self._segments()
        sx, sy = seg * np.sin(phi), seg * np.cos(phi)
        J = np.zeros((2, self.in_dim))
        for i in range(self.link):
            # joint i moves every segment at or beyond it
            J[0, i] = -sx[i:].sum()
            J[1, i] = sy[i:].sum()
        return J

    def curvature(self, x, xd):
        # Jdot @ xd = -sum_j seg_j * phidot_j^2 * (cos phi_j, sin phi_j)
        phi = np.cumsum(x[: self.link])
        phid = np.cumsum(xd[: self.link])
        seg = self._segments()
        w = seg * phid * phid
        return np.array([-float(w @ np.cos(phi)), -float(w @ np.sin(phi))])


@dataclass(frozen=True, eq=False)
class ComposedMap(TaskMap):
    outer: TaskMap
    inner: TaskMap
    kind = "compose"

    @property
    def in_dim(self) -> int:
        return self.inner.in_dim

    @property
    def out_dim(self) -> int:
        return self.outer.out_dim

    def bind(self, aux):
        return ComposedMap(outer=self.outer.bind(aux), inner=self.inner.bind(aux))

    def value(self, x):
        return self.outer.value(self.inner.value(x))

    def jacobian(self, x):
        y = self.inner.value(x)
        return self.outer.jacobian(y) @ self.inner.jacobian(x)

    def curvature(self, x, xd):
        # chain rule on Jdot @ xd: outer curvature at the pushed state
        # plus the inner curvature mapped through the outer Jacobian
        y = self.inner.value(x)
        yd = self.inner.jacobian(x) @ xd
        return self.outer.curvature(y, yd) + self.outer.jacobian(y) @ self.inner.curvature(x, xd)


def identity(dim: int) -> TaskMap:
    if dim < 1:
        raise ConfigError(f"identity map needs dim >= 1, got {dim}")
    return IdentityMap(dim=dim)


def affine(A, b) -> TaskMap:
    A = as_matrix(A, name="affine A")
    b = as_vector(b, A.shape[0], "affine b")
    return AffineMap(A=A, b=b)


def goal_offset(goal) -> TaskMap:
    if not isinstance(goal, AuxRef):
        goal = as_vector(goal, name="goal")
    return GoalOffsetMap(goal=goal)


def distance_to_point(center, radius) -> TaskMap:
    if not isinstance(center, AuxRef):
        center = as_vector(center, name="obstacle center")
    if not isinstance(radius, AuxRef):
        radius = float(radius)
        if radius < 0.0:
            raise ConfigError(f"distance_to_point radius must be >= 0, got {radius}")
    return DistanceMap(center=center, radius=radius)


def joint_limit_1d(dim: int, joint: int, limit: float, side: str) -> TaskMap:
    if side not in ("lower", "upper"):
        raise ConfigError(f"joint limit side must be 'lower' or 'upper', got {side!r}")
    if not 0 <= joint < dim:
        raise ConfigError(f"joint index {joint} out of range for dim {dim}")
    return JointLimitMap(dim=dim, joint=joint, limit=float(limit), side=side)


def planar_fk(lengths, link: int, fraction: float = 1.0) -> TaskMap:
    lengths = as_vector(lengths, name="link lengths")
    if (lengths <= 0.0).any():
        raise ConfigError("planar_fk link lengths must be positive")
    if not 1 <= link <= lengths.shape[0]:
        raise ConfigError(f"link index {link} out of range for {lengths.shape[0]} links")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"control-point fraction must be in (0, 1], got {fraction}")
    return PlanarFkMap(lengths=lengths, link=int(link), fraction=float(fraction))


def compose(outer: TaskMap, inner: TaskMap) -> TaskMap:
    if inner.out_dim != outer.in_dim:
        raise DimensionError(
            f"compose: inner out_dim {inner.out_dim} != outer in_dim {outer.in_dim}"
        )
    return ComposedMap(outer=outer, inner=inner)
