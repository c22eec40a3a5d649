"""Edge weight functions: constant, hand-designed analytic, and MLP.

A weight is a strictly positive scalar function of the parent-node
coordinate and the auxiliary state.  Every evaluation returns both the
value and its gradient with respect to the parent coordinate, because the
weighted combination needs grad(w) for its correction term.

MLP weights are squashed through softplus plus a small floor, so any
finite parameter vector yields w > 0; that is what keeps the fused policy
inside the stability class even before training has converged.
Activations are restricted to tanh/elu so grad_x(w) is continuous and
itself differentiable with respect to the parameters.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .numerics import as_vector
from .taskmaps import AuxRef

W_MIN = 1e-4
# final-layer init is shrunk so an untrained weight starts near softplus(0)
FINAL_LAYER_INIT_SCALE = 0.1


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class MlpArch:
    hidden: tuple[int, ...]
    activation: str  # tanh | elu


@dataclass(frozen=True, eq=False)
class RadialGate:
    """w = base + amp * sigmoid((||x - point|| - radius - offset) / length_scale).

    A negative length_scale flips the gate (high near the point).  The
    point and radius may reference the auxiliary state.
    """

    base: float
    amp: float
    offset: float
    length_scale: float
    point: np.ndarray | AuxRef
    radius: float | AuxRef | None = None


@dataclass(frozen=True, eq=False)
class CoordGate:
    """w = base + amp * sigmoid((x[index] - threshold) / length_scale)."""

    base: float
    amp: float
    threshold: float
    length_scale: float
    index: int


@dataclass(frozen=True, eq=False)
class WeightFn:
    kind: str  # constant | analytic | mlp
    in_dim: int  # parent coordinate dim + aux dim
    param_slice: tuple[int, int] = (0, 0)
    value: float = 1.0
    form: RadialGate | CoordGate | None = None
    arch: MlpArch | None = None
    share: str | None = None  # edges with the same tag alias one slice
    # unpacked-layer memo for the last-seen parameter vector (rollouts
    # evaluate thousands of times against one frozen array)
    _memo: list = field(default_factory=lambda: [None, None], repr=False, compare=False)


@dataclass(frozen=True)
class WeightValue:
    value: float
    grad_x: np.ndarray


def constant_weight(c: float, in_dim: int = 0) -> WeightFn:
    if not np.isfinite(c) or c <= 0.0:
        raise ConfigError(f"constant weight must be a positive finite number, got {c}")
    return WeightFn(kind="constant", in_dim=in_dim, value=float(c))


def analytic_weight(form: RadialGate | CoordGate, in_dim: int) -> WeightFn:
    if form.base <= 0.0 or form.amp < 0.0:
        raise ConfigError("analytic weight needs base > 0 and amp >= 0 to stay positive")
    if form.length_scale == 0.0:
        raise ConfigError("analytic weight length_scale must be nonzero")
    return WeightFn(kind="analytic", in_dim=in_dim, form=form)


def mlp_weight(
    in_dim: int,
    hidden: list[int] | tuple[int, ...],
    activation: str = "tanh",
    share: str | None = None,
) -> WeightFn:
    if in_dim < 1:
        raise ConfigError(f"mlp weight in_dim must be >= 1, got {in_dim}")
    if activation not in ("tanh", "elu"):
        raise ConfigError(f"activation must be tanh or elu, got {activation!r}")
    hidden = tuple(int(h) for h in hidden)
    if any(h < 1 for h in hidden):
        raise ConfigError(f"hidden widths must be >= 1, got {hidden}")
    arch = MlpArch(hidden=hidden, activation=activation)
    w = WeightFn(kind="mlp", in_dim=in_dim, arch=arch, share=share)
    return replace(w, param_slice=(0, param_count(w)))


def param_count(w: WeightFn) -> int:
    """Number of learnable parameters (dense layers, scalar output)."""
    if w.kind != "mlp":
        return 0
    widths = [w.in_dim, *w.arch.hidden, 1]
    return sum((n_in + 1) * n_out for n_in, n_out in zip(widths[:-1], widths[1:]))


def _layer_shapes(w: WeightFn) -> list[tuple[int, int]]:
    widths = [w.in_dim, *w.arch.hidden, 1]
    return list(zip(widths[:-1], widths[1:]))


def unpack_mlp(w: WeightFn, params: np.ndarray, check: bool = True) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split the slice of the flat parameter vector into (W, b) layers."""
    off, length = w.param_slice
    if off + length > params.shape[0]:
        raise DimensionError(
            f"parameter vector of length {params.shape[0]} too short for slice {w.param_slice}"
        )
    theta = params[off : off + length]
    if check and not np.isfinite(theta).all():
        raise NumericError("mlp weight: non-finite parameters")
    layers = []
    pos = 0
    for n_in, n_out in _layer_shapes(w):
        W = theta[pos : pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = theta[pos : pos + n_out]
        pos += n_out
        layers.append((W, b))
    return layers


def _activation(name: str, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (a, da/dz)."""
    if name == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    # elu: z for z > 0, exp(z) - 1 otherwise; derivative continuous at 0
    ez = np.exp(np.minimum(z, 0.0))
    a = np.where(z > 0.0, z, ez - 1.0)
    return a, np.where(z > 0.0, 1.0, ez)


def weight_eval(
    w: WeightFn, x, aux, params: np.ndarray | None = None, validate: bool = True
) -> WeightValue:
    """Evaluate w and grad_x(w) at (parent coordinate x, auxiliary state aux).

    The caller may pass validate=False when it has already checked the
    inputs (the tree evaluation validates state and parameters once).
    """
    if validate:
        x = as_vector(x, name="weight coordinate")
        aux = as_vector(aux, name="weight aux") if aux is not None else np.zeros(0)
    else:
        x = np.asarray(x, dtype=float)
        aux = np.asarray(aux, dtype=float) if aux is not None else np.zeros(0)
    if w.kind == "constant":
        return WeightValue(value=w.value, grad_x=np.zeros(x.shape[0]))
    if w.kind == "analytic":
        return _analytic_eval(w.form, x, aux)
    if w.kind == "mlp":
        if x.shape[0] + aux.shape[0] != w.in_dim:
            raise DimensionError(
                f"mlp weight expects in_dim {w.in_dim}, got {x.shape[0]} + {aux.shape[0]}"
            )
        if params is None:
            raise ConfigError("mlp weight evaluation needs a parameter vector")
        return _mlp_eval(w, x, aux, params, check=validate)
    raise ConfigError(f"unknown weight kind {w.kind!r}")


def _analytic_eval(form, x: np.ndarray, aux: np.ndarray) -> WeightValue:
    if isinstance(form, CoordGate):
        z = (x[form.index] - form.threshold) / form.length_scale
        s = sigmoid(z)
        grad = np.zeros(x.shape[0])
        grad[form.index] = form.amp * s * (1.0 - s) / form.length_scale
        return WeightValue(value=form.base + form.amp * float(s), grad_x=grad)
    point = form.point.pick(aux) if isinstance(form.point, AuxRef) else form.point
    radius = 0.0
    if form.radius is not None:
        r = form.radius.pick(aux) if isinstance(form.radius, AuxRef) else form.radius
        radius = float(np.asarray(r).reshape(()))
    delta = x - point
    dist = float(np.linalg.norm(delta))
    z = (dist - radius - form.offset) / form.length_scale
    s = sigmoid(z)
    # delta/dist -> 0 as x -> point, so the gradient stays finite
    direction = delta / max(dist, 1e-12)
    grad = form.amp * s * (1.0 - s) / form.length_scale * direction
    return WeightValue(value=form.base + form.amp * float(s), grad_x=grad)


def _mlp_eval(
    w: WeightFn, x: np.ndarray, aux: np.ndarray, params: np.ndarray, check: bool = True
) -> WeightValue:
    ref = w._memo[0]
    if ref is not None and ref() is params:
        layers = w._memo[1]
    else:
        layers = unpack_mlp(w, params, check=check)
        try:
            w._memo[0] = weakref.ref(params)
            w._memo[1] = layers
        except TypeError:
            pass
    inp = np.concatenate([x, aux])
    act = w.arch.activation

    a = inp
    deriv_chain = []  # (W, da/dz) per hidden layer in forward order
    for W, b in layers[:-1]:
        z = a @ W + b
        a, da = _activation(act, z)
        deriv_chain.append((W, da))
    W_out, b_out = layers[-1]
    raw = float(a @ W_out + b_out)

    # analytic input gradient of raw, back through the layers
    delta = W_out[:, 0]
    for W, da in reversed(deriv_chain):
        delta = W @ (da * delta)
    grad_raw = delta  # d raw / d input

    s = float(sigmoid(raw))  # softplus' = sigmoid
    value = float(softplus(raw)) + W_MIN
    grad_x = s * grad_raw[: x.shape[0]]
    return WeightValue(value=value, grad_x=grad_x)


def allocate_slices(weight_fns: list[WeightFn]) -> tuple[list[WeightFn], int]:
    """Assign offsets into one flat parameter vector, honoring share tags."""
    out: list[WeightFn] = []
    shared: dict[str, tuple[int, int]] = {}
    total = 0
    for w in weight_fns:
        n = param_count(w)
        if n == 0:
            out.append(replace(w, param_slice=(0, 0)))
            continue
        if w.share is not None and w.share in shared:
            off, length = shared[w.share]
            if length != n:
                raise ConfigError(
                    f"shared weight group {w.share!r} mixes incompatible architectures"
                )
            out.append(replace(w, param_slice=(off, length)))
            continue
        sl = (total, n)
        if w.share is not None:
            shared[w.share] = sl
        out.append(replace(w, param_slice=sl))
        total += n
    return out, total


def init_mlp_params(w: WeightFn, rng: np.random.Generator) -> np.ndarray:
    """uniform(+-1/sqrt(fan_in)) weights, zero biases, scaled final layer."""
    chunks = []
    shapes = _layer_shapes(w)
    for i, (n_in, n_out) in enumerate(shapes):
        bound = 1.0 / np.sqrt(n_in)
        W = rng.uniform(-bound, bound, size=(n_in, n_out))
        if i == len(shapes) - 1:
            W = W * FINAL_LAYER_INIT_SCALE
        chunks.append(W.reshape(-1))
        chunks.append(np.zeros(n_out))
    return np.concatenate(chunks)
