"""Reverse-mode differentiation tape over small numpy arrays.

A Tape records every operation of one (batched) policy evaluation in
creation order, which is already a topological order: operands exist
before the ops that consume them.  The backward pass walks the record
once in reverse, accumulating adjoints; replay() recomputes every value
from the recorded closures, which must reproduce the forward results
bit-for-bit.

Only the primitives the fusion forward pass needs are provided.  The
activations are smooth (tanh/elu/sigmoid/softplus), so expressions built
from them -- including the analytic input-gradient of a weight network --
remain differentiable with respect to the parameters.
"""

from __future__ import annotations

import warnings

import numpy as np

from ..errors import NumericError

# backward contributions of records whose root inertia is closer to
# singular than this (relative) are dropped: pseudo-inverse derivatives
# at rank changes are ill-defined
SOLVE_CLIP_RCOND = 1e-10


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "parents", "_back", "_fwd", "requires_grad", "tag")

    def __init__(self, value, parents=(), back=None, fwd=None, requires_grad=False, tag="op"):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self._back = back
        self._fwd = fwd
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.tag = tag

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Recorded operation graph of one evaluation."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _record(self, t: Tensor) -> Tensor:
        self.nodes.append(t)
        return t

    def input(self, value, tag="const", requires_grad=False) -> Tensor:
        """Register a graph input (state, aux, params or plain constant)."""
        return self._record(Tensor(value, requires_grad=requires_grad, tag=tag))

    # -- elementwise / structural primitives --------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        def back(g):
            return (
                _unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None,
            )

        return self._record(
            Tensor(a.value + b.value, (a, b), back, fwd=lambda va, vb: va + vb)
        )

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        def back(g):
            return (
                _unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None,
            )

        return self._record(
            Tensor(a.value - b.value, (a, b), back, fwd=lambda va, vb: va - vb)
        )

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        def back(g):
            return (
                _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
            )

        return self._record(
            Tensor(a.value * b.value, (a, b), back, fwd=lambda va, vb: va * vb)
        )

    def neg(self, a: Tensor) -> Tensor:
        return self._record(Tensor(-a.value, (a,), lambda g: (-g,), fwd=lambda va: -va))

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        def back(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
            return ga, gb

        return self._record(
            Tensor(np.matmul(a.value, b.value), (a, b), back, fwd=np.matmul)
        )

    def transpose(self, a: Tensor) -> Tensor:
        """Swap the last two axes."""

        def back(g):
            return (np.swapaxes(g, -1, -2),)

        return self._record(
            Tensor(
                np.swapaxes(a.value, -1, -2), (a,), back,
                fwd=lambda va: np.swapaxes(va, -1, -2),
            )
        )

    def reshape(self, a: Tensor, shape) -> Tensor:
        def back(g):
            return (g.reshape(a.shape),)

        return self._record(
            Tensor(a.value.reshape(shape), (a,), back, fwd=lambda va: va.reshape(shape))
        )

    def getitem(self, a: Tensor, idx) -> Tensor:
        def back(g):
            buf = np.zeros(a.shape)
            np.add.at(buf, idx, g)
            return (buf,)

        return self._record(Tensor(a.value[idx], (a,), back, fwd=lambda va: va[idx]))

    def concat(self, parts: list[Tensor], axis: int = -1) -> Tensor:
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def back(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._record(
            Tensor(
                np.concatenate([p.value for p in parts], axis=axis),
                tuple(parts), back,
                fwd=lambda *vals: np.concatenate(vals, axis=axis),
            )
        )

    def sum(self, a: Tensor, axis=None, keepdims=False) -> Tensor:
        def back(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)

        return self._record(
            Tensor(
                a.value.sum(axis=axis, keepdims=keepdims), (a,), back,
                fwd=lambda va: va.sum(axis=axis, keepdims=keepdims),
            )
        )

    def mean(self, a: Tensor) -> Tensor:
        n = a.value.size

        def back(g):
            return (np.broadcast_to(g / n, a.shape).copy(),)

        return self._record(
            Tensor(a.value.mean(), (a,), back, fwd=lambda va: va.mean())
        )

    # -- nonlinearities ------------------------------------------------------

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.value)

        def back(g):
            return (g * (1.0 - y * y),)

        return self._record(Tensor(y, (a,), back, fwd=np.tanh))

    def sigmoid(self, a: Tensor) -> Tensor:
        y = 0.5 * (1.0 + np.tanh(0.5 * a.value))

        def back(g):
            return (g * y * (1.0 - y),)

        return self._record(
            Tensor(y, (a,), back, fwd=lambda va: 0.5 * (1.0 + np.tanh(0.5 * va)))
        )

    def softplus(self, a: Tensor) -> Tensor:
        def back(g):
            return (g * 0.5 * (1.0 + np.tanh(0.5 * a.value)),)

        return self._record(
            Tensor(np.logaddexp(0.0, a.value), (a,), back, fwd=lambda va: np.logaddexp(0.0, va))
        )

    def exp(self, a: Tensor) -> Tensor:
        y = np.exp(a.value)

        def back(g):
            return (g * y,)

        return self._record(Tensor(y, (a,), back, fwd=np.exp))

    # -- linear solve ---------------------------------------------------------

    def solve(self, M: Tensor, f: Tensor) -> Tensor:
        """Batched a = M^-1 f for stacks of symmetric PD matrices.

        Records too close to singular keep their forward value but have
        their backward contribution zeroed (and a warning emitted): exact
        pseudo-inverse derivatives at rank changes are ill-defined.
        """
        try:
            a_val = np.linalg.solve(M.value, f.value)
        except np.linalg.LinAlgError as e:
            raise NumericError(f"singular inertia in differentiable resolve: {e}") from None
        evals = np.linalg.eigvalsh(M.value)
        ok = evals[..., 0] > SOLVE_CLIP_RCOND * np.maximum(np.abs(evals[..., -1]), 1.0)
        if not ok.all():
            warnings.warn(
                f"{int((~ok).sum())} record(s) near rank deficiency; "
                "their gradient contribution is clipped",
                RuntimeWarning,
                stacklevel=2,
            )
        mask = ok.astype(float).reshape(ok.shape + (1, 1)) if ok.ndim else float(ok)

        def back(g):
            gf = np.linalg.solve(np.swapaxes(M.value, -1, -2), g * mask)
            gM = -np.matmul(gf, np.swapaxes(a_val, -1, -2))
            return _unbroadcast(gM, M.shape), _unbroadcast(gf, f.shape)

        return self._record(
            Tensor(a_val, (M, f), back, fwd=np.linalg.solve)
        )

    # -- driver ----------------------------------------------------------------

    def backward(self, output: Tensor) -> int:
        """Reverse sweep from output; returns the number of ops visited."""
        for t in self.nodes:
            t.grad = None
        output.grad = np.ones_like(output.value)
        visited = 0
        for t in reversed(self.nodes):
            if t.grad is None or t._back is None:
                continue
            visited += 1
            if not t.requires_grad:
                continue
            for parent, g in zip(t.parents, t._back(t.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        return visited

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the recorded closures, in order."""
        values: dict[int, np.ndarray] = {}
        out = []
        for t in self.nodes:
            if t._fwd is None:
                val = t.value
            else:
                val = np.asarray(t._fwd(*(values[id(p)] for p in t.parents)), dtype=float)
            values[id(t)] = val
            out.append(val)
        return out
