"""Differentiable policies trainable by behavior cloning.

TreePolicy differentiates the full fusion forward pass with respect to
the weight-function parameters.  Everything that does not depend on the
parameters -- pushed-forward states, edge Jacobians and curvatures, leaf
outputs -- is precomputed once per dataset as plain arrays; the tape then
records only the weighted combination, the analytic input-gradients of
the weight networks (so the correction term stays exactly differentiable)
and the final linear solve, batched across records.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, NumericError
from ..gds import gds_evaluate
from ..numerics import DEFAULT_TOL
from ..tree import PolicyState, TreeSpec, _forward, evaluate_policy, init_params
from ..weights import W_MIN, WeightFn, weight_eval
from .data import Dataset
from .tape import Tape, Tensor


@dataclass
class BoundPolicy:
    """A policy with its parameters frozen in, ready for rollouts."""

    policy: object
    params: np.ndarray

    def act(self, q, qd, aux):
        return self.policy.act(q, qd, aux, self.params)


@dataclass
class _EdgeCache:
    leaf_child: bool
    learnable: bool
    # learnable edges: network input [x_parent, aux]; fixed edges: value and grad
    w_input: np.ndarray | None = None
    w_value: np.ndarray | None = None  # (N, 1, 1)
    w_grad: np.ndarray | None = None  # (N, dp, 1)
    h_fixed: np.ndarray | None = None  # (N, dp, 1), leaf children of fixed edges only
    # edge geometry (internal children only; folded into t1 etc. for leaves)
    J: np.ndarray | None = None
    Jt: np.ndarray | None = None
    jdot: np.ndarray | None = None
    # leaf children: pulled-back constants
    t1: np.ndarray | None = None  # (N, dp, 1)  J^T (f - M jdot)
    JMJ: np.ndarray | None = None
    JGJ: np.ndarray | None = None
    gxd: np.ndarray | None = None  # (N, dp, 1)  JGJ @ xd
    L: np.ndarray | None = None  # (N, 1, 1)


@dataclass
class TreeForwardCache:
    n: int
    labels: np.ndarray  # (N, dq)
    xd_col: dict[str, np.ndarray]  # internal nodes: (N, d, 1)
    edges: dict[str, _EdgeCache]


class TreePolicy:
    """Fusion tree viewed as a parametric function theta -> actions."""

    def __init__(self, tree: TreeSpec, tol: float = DEFAULT_TOL):
        self.tree = tree
        self.tol = tol

    @property
    def n_params(self) -> int:
        return self.tree.param_dim

    def init_params(self, rng) -> np.ndarray:
        return init_params(self.tree, rng)

    def bind(self, params: np.ndarray) -> BoundPolicy:
        return BoundPolicy(policy=self, params=np.asarray(params, dtype=float))

    def act(self, q, qd, aux, params):
        out = evaluate_policy(
            self.tree, PolicyState(q=q, qd=qd, aux=aux), params, tol=self.tol
        )
        return out.a, out.diag.V

    def param_slices(self) -> list[tuple[str, tuple[int, int]]]:
        """(edge child id, slice) for every learnable edge."""
        out = []
        for node in self.tree.order:
            for child in self.tree.children.get(node, ()):
                w = self.tree.edges[child].weight
                if w.param_slice[1] > 0:
                    out.append((child, w.param_slice))
        return out

    # -- precomputation ------------------------------------------------------

    def precompute(self, ds: Dataset) -> TreeForwardCache:
        tree = self.tree
        n = len(ds)
        xd_col: dict[str, list] = {
            node: [] for node in tree.order if not tree.is_leaf(node)
        }
        buf: dict[str, dict[str, list]] = {child: {} for child in tree.edges}

        for r in range(n):
            state = PolicyState(q=ds.q[r], qd=ds.qd[r], aux=ds.aux[r])
            fwd = _forward(tree, state)
            for node in xd_col:
                xd_col[node].append(fwd[node].xd[:, None])
            for node in tree.order:
                for child in tree.children.get(node, ()):
                    e = tree.edges[child]
                    cf = fwd[child]
                    entry = buf[child]
                    learnable = e.weight.param_slice[1] > 0
                    if learnable:
                        entry.setdefault("w_input", []).append(
                            np.concatenate([fwd[node].x, state.aux])
                        )
                    else:
                        wv = weight_eval(e.weight, fwd[node].x, state.aux, None)
                        entry.setdefault("w_value", []).append(wv.value)
                        entry.setdefault("w_grad", []).append(wv.grad_x[:, None])
                    if tree.is_leaf(child):
                        leaf = gds_evaluate(tree.leaves[child], cf.x, cf.xd)
                        J = cf.J
                        JG = J.T @ leaf.G
                        JGJ = JG @ J
                        gxd = JGJ @ fwd[node].xd
                        entry.setdefault("t1", []).append(
                            (J.T @ (leaf.f - leaf.M @ cf.jdot_xd))[:, None]
                        )
                        entry.setdefault("JMJ", []).append(J.T @ leaf.M @ J)
                        entry.setdefault("JGJ", []).append(JGJ)
                        entry.setdefault("gxd", []).append(gxd[:, None])
                        entry.setdefault("L", []).append(leaf.L)
                    else:
                        entry.setdefault("J", []).append(cf.J)
                        entry.setdefault("jdot", []).append(cf.jdot_xd[:, None])

        xd_stacked = {k: np.stack(v) for k, v in xd_col.items()}
        edges: dict[str, _EdgeCache] = {}
        for node in tree.order:
            for child in tree.children.get(node, ()):
                e = tree.edges[child]
                entry = buf[child]
                learnable = e.weight.param_slice[1] > 0
                ec = _EdgeCache(leaf_child=tree.is_leaf(child), learnable=learnable)
                for key, rows in entry.items():
                    setattr(ec, key, np.stack(rows))
                if ec.w_value is not None:
                    ec.w_value = ec.w_value.reshape(n, 1, 1)
                if ec.L is not None:
                    ec.L = ec.L.reshape(n, 1, 1)
                if ec.J is not None:
                    ec.Jt = np.swapaxes(ec.J, -1, -2)
                if not learnable and ec.leaf_child:
                    # fixed weight, constant child: h is cache-determined
                    xd = xd_stacked[node]
                    dot = np.matmul(np.swapaxes(ec.w_grad, -1, -2), xd)  # (N,1,1)
                    ec.h_fixed = ec.L * ec.w_grad - dot * ec.gxd
                edges[child] = ec

        return TreeForwardCache(
            n=n,
            labels=ds.a_expert.copy(),
            xd_col=xd_stacked,
            edges=edges,
        )

    # -- tape forward ---------------------------------------------------------

    def _mlp_layers(self, tape: Tape, theta: Tensor, w: WeightFn, made: dict):
        key = w.param_slice
        if key in made:
            return made[key]
        off, _ = key
        widths = [w.in_dim, *w.arch.hidden, 1]
        layers = []
        pos = off
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            W = tape.reshape(tape.getitem(theta, slice(pos, pos + n_in * n_out)), (n_in, n_out))
            pos += n_in * n_out
            b = tape.getitem(theta, slice(pos, pos + n_out))
            pos += n_out
            layers.append((W, b))
        made[key] = layers
        return layers

    def _tape_weight(self, tape: Tape, theta: Tensor, w: WeightFn, x_in: Tensor, dp: int, made: dict):
        """Weight value (B,1,1) and its parent-coordinate gradient (B,dp,1)."""
        layers = self._mlp_layers(tape, theta, w, made)
        act = w.arch.activation
        a = x_in
        chain = []
        for W, b in layers[:-1]:
            z = tape.add(tape.matmul(a, W), b)
            if act == "tanh":
                a = tape.tanh(z)
                one = tape.input(np.ones(1))
                da = tape.sub(one, tape.mul(a, a))
            else:  # elu
                mask = tape.input((z.value > 0.0).astype(float))
                inv_mask = tape.input((z.value <= 0.0).astype(float))
                ez = tape.exp(tape.mul(inv_mask, z))  # exp(min(z,0)) via masking
                one = tape.input(np.ones(1))
                a = tape.add(
                    tape.mul(mask, z), tape.mul(inv_mask, tape.sub(ez, one))
                )
                da = tape.add(mask, tape.mul(inv_mask, ez))
            chain.append((W, da))
        W_out, b_out = layers[-1]
        raw = tape.add(tape.matmul(a, W_out), b_out)  # (B, 1)

        delta = tape.transpose(W_out)  # (1, h) row, broadcasts over the batch
        for W, da in reversed(chain):
            delta = tape.matmul(tape.mul(da, delta), tape.transpose(W))
        grad_x = tape.getitem(delta, (slice(None), slice(0, dp)))

        s = tape.sigmoid(raw)
        value = tape.add(tape.softplus(raw), tape.input(np.array(W_MIN)))
        b = x_in.shape[0]
        w_val = tape.reshape(value, (b, 1, 1))
        gw = tape.reshape(tape.mul(s, grad_x), (b, dp, 1))
        return w_val, gw

    def _tape_node(self, tape, theta, cache, idx, node, made):
        """Tape tensors (f, M, G, L) of an internal node, in its coordinates."""
        tree = self.tree
        xd = tape.input(cache.xd_col[node][idx])  # (B, dp, 1)
        dp = xd.shape[1]
        f_sum = m_sum = g_sum = l_sum = None
        for child in tree.children[node]:
            ec = cache.edges[child]
            if ec.learnable:
                x_in = tape.input(ec.w_input[idx], tag="state")
                w, gw = self._tape_weight(
                    tape, theta, tree.edges[child].weight, x_in, dp, made
                )
            else:
                w = tape.input(ec.w_value[idx])
                gw = tape.input(ec.w_grad[idx])
            if ec.leaf_child:
                t1 = tape.input(ec.t1[idx])
                JMJ = tape.input(ec.JMJ[idx])
                JGJ = tape.input(ec.JGJ[idx])
                gxd = tape.input(ec.gxd[idx])
                L_c = tape.input(ec.L[idx])
            else:
                f_c, M_c, G_c, L_c = self._tape_node(tape, theta, cache, idx, child, made)
                Jt = tape.input(ec.Jt[idx])
                J = tape.input(ec.J[idx])
                jdot = tape.input(ec.jdot[idx])
                t1 = tape.matmul(Jt, tape.sub(f_c, tape.matmul(M_c, jdot)))
                JMJ = tape.matmul(Jt, tape.matmul(M_c, J))
                JGJ = tape.matmul(Jt, tape.matmul(G_c, J))
                gxd = tape.matmul(JGJ, xd)
            f_term = tape.mul(w, t1)
            if ec.learnable or not ec.leaf_child:
                dot = tape.matmul(tape.transpose(gw), xd)  # (B,1,1)
                h = tape.sub(tape.mul(L_c, gw), tape.mul(dot, gxd))
                f_term = tape.add(f_term, h)
            elif ec.h_fixed is not None:
                f_term = tape.add(f_term, tape.input(ec.h_fixed[idx]))
            m_term = tape.mul(w, JMJ)
            g_term = tape.mul(w, JGJ)
            l_term = tape.mul(w, L_c)
            f_sum = f_term if f_sum is None else tape.add(f_sum, f_term)
            m_sum = m_term if m_sum is None else tape.add(m_sum, m_term)
            g_sum = g_term if g_sum is None else tape.add(g_sum, g_term)
            l_sum = l_term if l_sum is None else tape.add(l_sum, l_term)
        return f_sum, m_sum, g_sum, l_sum

    def _tape_actions(self, tape: Tape, cache: TreeForwardCache, idx, params) -> tuple[Tensor, Tensor]:
        theta = tape.input(np.asarray(params, dtype=float), tag="params", requires_grad=True)
        made: dict = {}
        f_r, M_r, _, _ = self._tape_node(tape, theta, cache, idx, self.tree.root, made)
        a_col = tape.solve(M_r, f_r)  # (B, dq, 1)
        b = f_r.shape[0]
        return tape.reshape(a_col, (b, self.tree.root_dim)), theta

    def predict(self, cache: TreeForwardCache, idx, params) -> np.ndarray:
        tape = Tape()
        actions, _ = self._tape_actions(tape, cache, idx, params)
        return actions.value

    def loss_value(self, cache: TreeForwardCache, idx, params) -> float:
        tape = Tape()
        actions, _ = self._tape_actions(tape, cache, idx, params)
        err = tape.sub(actions, tape.input(cache.labels[idx], tag="label"))
        return float(tape.mean(tape.mul(err, err)).value)

    def loss_and_grad(self, cache: TreeForwardCache, idx, params) -> tuple[float, np.ndarray]:
        tape = Tape()
        actions, theta = self._tape_actions(tape, cache, idx, params)
        err = tape.sub(actions, tape.input(cache.labels[idx], tag="label"))
        loss = tape.mean(tape.mul(err, err))
        tape.backward(loss)
        grad = theta.grad if theta.grad is not None else np.zeros_like(theta.value)
        if not np.isfinite(grad).all():
            bad = self._blame_slices(grad)
            raise NumericError(f"non-finite gradient in parameter slice(s): {bad}")
        return float(loss.value), grad

    def _blame_slices(self, grad: np.ndarray) -> str:
        names = []
        for child, (off, length) in self.param_slices():
            if not np.isfinite(grad[off : off + length]).all():
                names.append(f"{child}[{off}:{off + length}]")
        return ", ".join(names) or "<unknown>"


class UnstructuredPolicy:
    """Plain feed-forward regression baseline: [q, qd, aux] -> acceleration.

    No fusion structure, no energy diagnostics (act reports NaN for V):
    whatever it learns about staying stable has to come from data.
    """

    def __init__(self, in_dim: int, hidden, out_dim: int, activation: str = "tanh"):
        if in_dim < 1 or out_dim < 1:
            raise ConfigError("unstructured policy needs in_dim, out_dim >= 1")
        if activation not in ("tanh", "elu"):
            raise ConfigError(f"activation must be tanh or elu, got {activation!r}")
        hidden = tuple(int(h) for h in hidden)
        if any(h < 1 for h in hidden):
            raise ConfigError(f"hidden widths must be >= 1, got {hidden}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = hidden
        self.activation = activation

    @property
    def widths(self):
        return [self.in_dim, *self.hidden, self.out_dim]

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum((i + 1) * o for i, o in zip(w[:-1], w[1:]))

    def init_params(self, rng) -> np.ndarray:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        chunks = []
        w = self.widths
        pairs = list(zip(w[:-1], w[1:]))
        for i, (n_in, n_out) in enumerate(pairs):
            bound = 1.0 / np.sqrt(n_in)
            W = rng.uniform(-bound, bound, size=(n_in, n_out))
            if i == len(pairs) - 1:
                W = W * 0.1
            chunks.append(W.reshape(-1))
            chunks.append(np.zeros(n_out))
        return np.concatenate(chunks)

    def bind(self, params: np.ndarray) -> BoundPolicy:
        return BoundPolicy(policy=self, params=np.asarray(params, dtype=float))

    def _layers(self, params: np.ndarray):
        w = self.widths
        layers = []
        pos = 0
        for n_in, n_out in zip(w[:-1], w[1:]):
            W = params[pos : pos + n_in * n_out].reshape(n_in, n_out)
            pos += n_in * n_out
            b = params[pos : pos + n_out]
            pos += n_out
            layers.append((W, b))
        if pos != params.shape[0]:
            raise ConfigError(
                f"parameter vector length {params.shape[0]} != expected {pos}"
            )
        return layers

    def act(self, q, qd, aux, params):
        x = np.concatenate([np.asarray(q, float), np.asarray(qd, float), np.asarray(aux, float)])
        layers = self._layers(np.asarray(params, float))
        a = x
        for W, b in layers[:-1]:
            z = a @ W + b
            a = np.tanh(z) if self.activation == "tanh" else np.where(
                z > 0.0, z, np.exp(np.minimum(z, 0.0)) - 1.0
            )
        W, b = layers[-1]
        return a @ W + b, float("nan")

    def precompute(self, ds: Dataset):
        return {
            "x": np.concatenate([ds.q, ds.qd, ds.aux], axis=1),
            "labels": ds.a_expert.copy(),
        }

    def _tape_actions(self, tape: Tape, cache, idx, params):
        theta = tape.input(np.asarray(params, dtype=float), tag="params", requires_grad=True)
        a = tape.input(cache["x"][idx], tag="state")
        w = self.widths
        pos = 0
        pairs = list(zip(w[:-1], w[1:]))
        for i, (n_in, n_out) in enumerate(pairs):
            W = tape.reshape(tape.getitem(theta, slice(pos, pos + n_in * n_out)), (n_in, n_out))
            pos += n_in * n_out
            b = tape.getitem(theta, slice(pos, pos + n_out))
            pos += n_out
            z = tape.add(tape.matmul(a, W), b)
            if i == len(pairs) - 1:
                a = z
            elif self.activation == "tanh":
                a = tape.tanh(z)
            else:
                mask = tape.input((z.value > 0.0).astype(float))
                inv_mask = tape.input((z.value <= 0.0).astype(float))
                ez = tape.exp(tape.mul(inv_mask, z))
                a = tape.add(tape.mul(mask, z), tape.mul(inv_mask, tape.sub(ez, tape.input(np.ones(1)))))
        return a, theta

    def predict(self, cache, idx, params) -> np.ndarray:
        tape = Tape()
        actions, _ = self._tape_actions(tape, cache, idx, params)
        return actions.value

    def loss_value(self, cache, idx, params) -> float:
        tape = Tape()
        actions, _ = self._tape_actions(tape, cache, idx, params)
        err = tape.sub(actions, tape.input(cache["labels"][idx]))
        return float(tape.mean(tape.mul(err, err)).value)

    def loss_and_grad(self, cache, idx, params):
        tape = Tape()
        actions, theta = self._tape_actions(tape, cache, idx, params)
        err = tape.sub(actions, tape.input(cache["labels"][idx]))
        loss = tape.mean(tape.mul(err, err))
        tape.backward(loss)
        grad = theta.grad if theta.grad is not None else np.zeros_like(theta.value)
        if not np.isfinite(grad).all():
            raise NumericError("non-finite gradient in unstructured policy")
        return float(loss.value), grad


def unstructured_policy(in_dim: int, hidden, out_dim: int, activation: str = "tanh") -> UnstructuredPolicy:
    return UnstructuredPolicy(in_dim=in_dim, hidden=hidden, out_dim=out_dim, activation=activation)
