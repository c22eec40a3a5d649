"""Policy trees and their fusion algebra.

A tree carries task maps and weight functions on its edges and GDS leaf
policies at the leaves.  Evaluation is a two-pass algorithm: a forward
pass propagates state from the root (pushforward), then a backward pass
combines the children of each node with state-dependent weights
(pullback_star) and converts the root to an acceleration (resolve).

The weighted combination at a node with parent state (x, xd) and children
i = 1..K is

    f   = sum_i  w_i J_i^T (f_i - M_i Jdot_i xd) + h_i
    M   = sum_i  w_i J_i^T M_i J_i          (same shape for G and B)
    phi = sum_i  w_i phi_i                  (same for L and V)

with the correction term

    h_i = L_i grad(w_i) - (xd . grad(w_i)) (J_i^T G_i J_i) xd

that anticipates the change of the weights so the root energy
V = 1/2 qd^T G_r qd + phi_r still decays along trajectories.  With all
weights constant one this reduces to the unweighted pullback.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    NumericError,
    RmpTreeError,
    StabilityContractError,
)
from .gds import GdsSpec, LeafOutput, gds_evaluate
from .numerics import DEFAULT_TOL, as_vector, is_symmetric
from .taskmaps import TaskMap, identity
from .weights import WeightFn, allocate_slices, constant_weight, init_mlp_params, weight_eval

# Per-node bundle flowing up the tree; leaves produce the same fields.
NodeOutput = LeafOutput

# Root inertias with smaller minimum eigenvalue than this trigger a warning:
# the decay guarantee is only certified for positive-definite root inertia.
ROOT_INERTIA_WARN_EIG = 1e-9


class StabilityWarning(RuntimeWarning):
    """Root inertia too close to singular to certify the decay property."""


@dataclass(frozen=True, eq=False)
class Edge:
    map: TaskMap
    weight: WeightFn


@dataclass(frozen=True, eq=False)
class TreeSpec:
    root: str
    root_dim: int
    aux_dim: int
    children: Mapping[str, tuple[str, ...]]
    edges: Mapping[str, Edge]  # keyed by child node id
    leaves: Mapping[str, GdsSpec]
    param_dim: int = 0

    @cached_property
    def order(self) -> tuple[str, ...]:
        """Node ids in root-first (pre)order; reverse it for the backward pass."""
        out: list[str] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            stack.extend(reversed(self.children.get(node, ())))
        return tuple(out)

    @cached_property
    def node_dims(self) -> dict[str, int]:
        dims = {self.root: self.root_dim}
        for node in self.order:
            for child in self.children.get(node, ()):
                dims[child] = self.edges[child].map.out_dim
        return dims

    def is_leaf(self, node: str) -> bool:
        return len(self.children.get(node, ())) == 0


@dataclass(frozen=True)
class PolicyState:
    q: np.ndarray
    qd: np.ndarray
    aux: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", as_vector(self.q, name="q"))
        object.__setattr__(self, "qd", as_vector(self.qd, self.q.shape[0], "qd"))
        object.__setattr__(self, "aux", as_vector(self.aux, name="aux"))


def make_tree(
    root: str,
    root_dim: int,
    aux_dim: int,
    edges: Sequence[tuple[str, str, TaskMap, WeightFn]],
    leaves: Mapping[str, GdsSpec],
    allocate: bool = True,
) -> TreeSpec:
    """Build and validate a tree from (parent, child, map, weight) rows.

    Child order under a parent follows the edge sequence; with
    ``allocate`` the learnable weight functions receive fresh slices of
    one flat parameter vector, honoring their sharing tags.
    """
    children: dict[str, tuple[str, ...]] = {root: ()}
    edge_table: dict[str, Edge] = {}
    for parent, child, m, w in edges:
        if child in edge_table:
            raise ConfigError(f"node {child!r} has more than one parent")
        if child == root:
            raise ConfigError("the root cannot be a child")
        edge_table[child] = Edge(map=m, weight=w)
        children.setdefault(parent, ())
        children.setdefault(child, ())
        children[parent] = children[parent] + (child,)

    # slice allocation follows the preorder edge walk so any construction
    # order (including serialization round-trips) yields the same layout
    walk: list[str] = []
    stack = [root]
    while stack:
        node = stack.pop()
        for child in children.get(node, ()):
            walk.append(child)
        stack.extend(reversed(children.get(node, ())))
    if allocate:
        allocated, total = allocate_slices([edge_table[c].weight for c in walk if c in edge_table])
        for child, w in zip([c for c in walk if c in edge_table], allocated):
            edge_table[child] = Edge(map=edge_table[child].map, weight=w)
    else:
        total = max(
            (e.weight.param_slice[0] + e.weight.param_slice[1] for e in edge_table.values()),
            default=0,
        )
    tree = TreeSpec(
        root=root,
        root_dim=root_dim,
        aux_dim=aux_dim,
        children=children,
        edges=edge_table,
        leaves=dict(leaves),
        param_dim=total,
    )
    _validate(tree)
    return tree


def _validate(tree: TreeSpec) -> None:
    reachable = set(tree.order)
    if len(reachable) != len(tree.order):
        raise ConfigError("tree contains a cycle")
    for child in tree.edges:
        if child not in reachable:
            raise ConfigError(f"edge child {child!r} is not reachable from the root")
    for node in tree.children:
        if node != tree.root and node not in tree.edges:
            raise ConfigError(f"non-root node {node!r} has no incoming edge")
    dims = tree.node_dims
    for node in tree.order:
        kids = tree.children.get(node, ())
        if kids:
            if node in tree.leaves:
                raise ConfigError(f"internal node {node!r} must not carry a leaf policy")
        else:
            if node not in tree.leaves:
                raise ConfigError(f"leaf node {node!r} has no leaf policy")
            if tree.leaves[node].dim != dims[node]:
                raise ConfigError(
                    f"leaf {node!r}: policy dim {tree.leaves[node].dim} != node dim {dims[node]}"
                )
        for child in kids:
            edge = tree.edges[child]
            if edge.map.in_dim != dims[node]:
                raise ConfigError(
                    f"edge into {child!r}: map in_dim {edge.map.in_dim} != parent dim {dims[node]}"
                )
            w = edge.weight
            if w.kind != "constant" and w.in_dim != dims[node] + tree.aux_dim:
                raise ConfigError(
                    f"edge into {child!r}: weight in_dim {w.in_dim} != "
                    f"parent dim {dims[node]} + aux dim {tree.aux_dim}"
                )
    for leaf in tree.leaves:
        if leaf not in reachable:
            raise ConfigError(f"leaf policy for unknown node {leaf!r}")


def n_params(tree: TreeSpec) -> int:
    return tree.param_dim


def init_params(tree: TreeSpec, rng: np.random.Generator | int) -> np.ndarray:
    """Initialize the flat parameter vector for all learnable weights."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = np.zeros(tree.param_dim)
    done: set[tuple[int, int]] = set()
    for node in tree.order:
        for child in tree.children.get(node, ()):
            w = tree.edges[child].weight
            off, length = w.param_slice
            if length == 0 or (off, length) in done:
                continue
            params[off : off + length] = init_mlp_params(w, rng)
            done.add((off, length))
    return params


def _bound_maps(tree: TreeSpec, aux: np.ndarray) -> dict[str, TaskMap]:
    """Aux-bound edge maps, memoized per tree (rollouts reuse one aux)."""
    memo = tree.__dict__.setdefault("_bind_memo", {})
    key = aux.tobytes()
    hit = memo.get(key)
    if hit is None:
        if len(memo) > 64:
            memo.clear()
        hit = {child: e.map.bind(aux) for child, e in tree.edges.items()}
        memo[key] = hit
    return hit


@dataclass
class _NodeFwd:
    x: np.ndarray
    xd: np.ndarray
    J: np.ndarray | None  # Jacobian of the incoming edge map (None at root)
    jdot_xd: np.ndarray | None


def _forward(tree: TreeSpec, state: PolicyState) -> dict[str, _NodeFwd]:
    if state.q.shape[0] != tree.root_dim:
        raise DimensionError(f"state dim {state.q.shape[0]} != tree root dim {tree.root_dim}")
    if state.aux.shape[0] != tree.aux_dim:
        raise DimensionError(f"aux dim {state.aux.shape[0]} != tree aux dim {tree.aux_dim}")
    table = {tree.root: _NodeFwd(x=state.q, xd=state.qd, J=None, jdot_xd=None)}
    bound = _bound_maps(tree, state.aux)
    for node in tree.order:
        parent = table[node]
        for child in tree.children.get(node, ()):
            m = bound[child]
            try:
                x = m.value(parent.x)
                J = m.jacobian(parent.x)
                jdot_xd = m.curvature(parent.x, parent.xd)
            except RmpTreeError as e:
                raise type(e)(f"node {child!r}: {e}") from e
            table[child] = _NodeFwd(x=x, xd=J @ parent.xd, J=J, jdot_xd=jdot_xd)
    return table


def pushforward(tree: TreeSpec, state: PolicyState) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Propagate (coordinate, velocity) to every node of the tree."""
    return {node: (fwd.x, fwd.xd) for node, fwd in _forward(tree, state).items()}


@dataclass
class ChildTerm:
    """One child's contribution to a weighted combination."""

    out: NodeOutput
    J: np.ndarray
    jdot_xd: np.ndarray
    w: float
    grad_w: np.ndarray


def pullback_star(parent_x, parent_xd, children: Sequence[ChildTerm]) -> NodeOutput:
    """Weighted pullback of the children onto the parent manifold."""
    x = np.asarray(parent_x, dtype=float)
    xd = np.asarray(parent_xd, dtype=float)
    if x.ndim != 1 or xd.shape != x.shape:
        raise DimensionError(f"pullback: parent state shapes {x.shape}/{xd.shape}")
    d = x.shape[0]
    f = np.zeros(d)
    M = np.zeros((d, d))
    G = np.zeros((d, d))
    B = np.zeros((d, d))
    phi = 0.0
    L = 0.0
    V = 0.0
    for term in children:
        if term.w < 0.0:
            raise StabilityContractError(
                f"negative fusion weight {term.w}; the decay guarantee needs w >= 0"
            )
        J = term.J
        if J.shape != (term.out.f.shape[0], d):
            raise DimensionError(f"child Jacobian shape {J.shape} inconsistent with parent dim {d}")
        grad_w = np.asarray(term.grad_w, dtype=float)
        if grad_w.shape != (d,):
            raise DimensionError(f"weight gradient shape {grad_w.shape} != ({d},)")
        if term.out.f.shape[0] == 1:
            # scalar child (distance/limit spaces): avoid tiny matmuls
            j = J[0]
            jj = np.outer(j, j)
            JGJ = term.out.G[0, 0] * jj
            f += term.w * ((term.out.f[0] - term.out.M[0, 0] * term.jdot_xd[0]) * j)
            f += term.out.L * grad_w - (float(xd @ grad_w) * term.out.G[0, 0] * float(j @ xd)) * j
            M += term.w * term.out.M[0, 0] * jj
            G += term.w * JGJ
            B += term.w * term.out.B[0, 0] * jj
        else:
            Jt = J.T
            JGJ = (Jt @ term.out.G) @ J
            JMt = Jt @ term.out.M
            f += term.w * (Jt @ term.out.f - JMt @ term.jdot_xd)
            f += term.out.L * grad_w - float(xd @ grad_w) * (JGJ @ xd)
            M += term.w * (JMt @ J)
            G += term.w * JGJ
            B += term.w * ((Jt @ term.out.B) @ J)
        phi += term.w * term.out.phi
        L += term.w * term.out.L
        V += term.w * term.out.V
    return NodeOutput(f=f, M=M, G=G, B=B, phi=phi, L=L, V=V)


def _resolve_eig(f: np.ndarray, M: np.ndarray, tol: float) -> tuple[np.ndarray, float]:
    """Shared eigen route: returns (acceleration, min eigenvalue)."""
    if not is_symmetric(M, max(tol, 1e-8)):
        raise StabilityContractError("resolve: inertia is not symmetric")
    evals, vecs = np.linalg.eigh(M)
    min_eig = float(evals[0]) if evals.shape[0] else 0.0  # eigh sorts ascending
    top = float(np.abs(evals).max(initial=0.0))
    if min_eig < -tol * max(top, 1.0):
        raise StabilityContractError(
            f"resolve: inertia has negative eigenvalue {min_eig:.3e}"
        )
    cutoff = tol * top
    inv = np.where(np.abs(evals) > cutoff, 1.0 / np.where(evals == 0.0, 1.0, evals), 0.0)
    return (vecs * inv) @ (vecs.T @ f), min_eig


def resolve(f, M, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Map natural form [f, M] to the acceleration a = pinv(M) f."""
    f = as_vector(f, name="force")
    M = np.asarray(M, dtype=float)
    if M.shape != (f.shape[0], f.shape[0]):
        raise DimensionError(f"resolve: inertia shape {M.shape} vs force dim {f.shape[0]}")
    a, _ = _resolve_eig(f, M, tol)
    return a


def _root_output(
    tree: TreeSpec, state: PolicyState, params: np.ndarray | None
) -> tuple[NodeOutput, dict[str, NodeOutput]]:
    if params is not None:
        params = np.asarray(params, dtype=float)
        if not np.isfinite(params).all():
            raise NumericError("non-finite weight parameters")
    fwd = _forward(tree, state)
    outputs: dict[str, NodeOutput] = {}
    for node in reversed(tree.order):
        entry = fwd[node]
        if tree.is_leaf(node):
            try:
                outputs[node] = gds_evaluate(tree.leaves[node], entry.x, entry.xd)
            except RmpTreeError as e:
                raise type(e)(f"leaf {node!r}: {e}") from e
            continue
        terms = []
        for child in tree.children[node]:
            edge = tree.edges[child]
            try:
                wv = weight_eval(edge.weight, entry.x, state.aux, params, validate=False)
            except RmpTreeError as e:
                raise type(e)(f"edge into {child!r}: {e}") from e
            cf = fwd[child]
            terms.append(
                ChildTerm(out=outputs[child], J=cf.J, jdot_xd=cf.jdot_xd, w=wv.value, grad_w=wv.grad_x)
            )
        try:
            outputs[node] = pullback_star(entry.x, entry.xd, terms)
        except RmpTreeError as e:
            raise type(e)(f"node {node!r}: {e}") from e
    return outputs[tree.root], outputs


@dataclass
class PolicyEval:
    """Root acceleration plus the root-node bundle for stability monitoring."""

    a: np.ndarray
    diag: NodeOutput


def evaluate_policy(
    tree: TreeSpec,
    state: PolicyState,
    params: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    warn_small_inertia: bool = True,
) -> PolicyEval:
    """One full forward + backward pass: the global policy at this state."""
    root_out, _ = _root_output(tree, state, params)
    a, min_eig = _resolve_eig(root_out.f, root_out.M, tol)
    if warn_small_inertia and min_eig < ROOT_INERTIA_WARN_EIG:
        warnings.warn(
            f"root inertia min eigenvalue {min_eig:.3e} < {ROOT_INERTIA_WARN_EIG}; "
            "decay certificate not verifiable at this state",
            StabilityWarning,
            stacklevel=2,
        )
    return PolicyEval(a=a, diag=root_out)


def lyapunov_root(tree: TreeSpec, state: PolicyState, params: np.ndarray | None = None) -> float:
    """Root energy V_r: the weighted recursion over leaf energies."""
    root_out, _ = _root_output(tree, state, params)
    return root_out.V


def reduce_to_rmpflow(tree: TreeSpec) -> TreeSpec:
    """Same topology with every weight replaced by constant one."""
    edges = {
        child: Edge(map=e.map, weight=constant_weight(1.0)) for child, e in tree.edges.items()
    }
    out = TreeSpec(
        root=tree.root,
        root_dim=tree.root_dim,
        aux_dim=tree.aux_dim,
        children=dict(tree.children),
        edges=edges,
        leaves=dict(tree.leaves),
        param_dim=0,
    )
    _validate(out)
    return out


def decompose_two_step(tree: TreeSpec) -> TreeSpec:
    """Two-step realization of the weighted pullback.

    Every edge (u -> v, map, w) is split through a gate node on u's
    manifold: u -> gate with identity map and weight w, then gate -> v
    with the original map and constant weight one.  The expanded tree
    evaluates to the same root policy and doubles the edge count.
    """
    dims = tree.node_dims
    children: dict[str, tuple[str, ...]] = {n: () for n in tree.order}
    edges: dict[str, Edge] = {}
    gate_names = {}
    for child in tree.edges:
        gate = f"{child}.gate"
        while gate in dims or gate in gate_names:
            gate += "_"
        gate_names[child] = gate
    for node in tree.order:
        for child in tree.children.get(node, ()):
            edge = tree.edges[child]
            gate = gate_names[child]
            children[node] = children[node] + (gate,)
            children[gate] = (child,)
            edges[gate] = Edge(map=identity(dims[node]), weight=edge.weight)
            edges[child] = Edge(map=edge.map, weight=constant_weight(1.0))
    out = TreeSpec(
        root=tree.root,
        root_dim=tree.root_dim,
        aux_dim=tree.aux_dim,
        children=children,
        edges=edges,
        leaves=dict(tree.leaves),
        param_dim=tree.param_dim,
    )
    _validate(out)
    return out
