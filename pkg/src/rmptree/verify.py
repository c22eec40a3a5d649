"""Property suites runnable from the CLI, plus the reference
implementations they compare against.

The references take independent routes to the same quantities: a minimal
unweighted pullback evaluator (no weights, no correction terms), the
closed-form resultant dynamics of a two-child tree (assembled from the
structured-curvature algebra, not from force recursion), and a
path-product expansion of the root energy.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fixtures
from .errors import StabilityContractError
from .gds import gds_curvature, gds_evaluate
from .gds import attractor_leaf, damper_leaf, identity_metric_leaf, jointlimit_leaf, obstacle_leaf
from .learn import TreePolicy, grad_params
from .learn.data import Dataset
from .sim import integrate_step, rollout, sample_env, sample_start
from .taskmaps import affine, compose, distance_to_point, goal_offset, identity, joint_limit_1d
from .tree import (
    PolicyState,
    TreeSpec,
    decompose_two_step,
    evaluate_policy,
    lyapunov_root,
    make_tree,
    pushforward,
    reduce_to_rmpflow,
)
from .weights import WeightFn, constant_weight, mlp_weight, weight_eval

SUITES = ("reduction", "stability", "gradients", "lemma2", "energy")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteReport:
    suite: str
    passed: bool
    checks: list[Check] = field(default_factory=list)
    counterexample: dict | None = None

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(Check(name=name, passed=passed, detail=detail))
        if not passed:
            self.passed = False


# -- reference implementations ---------------------------------------------------


def pullback_reference(tree: TreeSpec, state: PolicyState) -> np.ndarray:
    """Unweighted natural-form pullback, recursively, then a pseudo-inverse.

    Deliberately minimal and separate from the weighted evaluation path;
    used to check that constant-one weights reduce to plain fusion.
    """

    def recurse(node, x, xd):
        if tree.is_leaf(node):
            out = gds_evaluate(tree.leaves[node], x, xd)
            return out.f, out.M
        d = x.shape[0]
        f, M = np.zeros(d), np.zeros((d, d))
        for child in tree.children[node]:
            m = tree.edges[child].map.bind(state.aux)
            J = m.jacobian(x)
            fc, Mc = recurse(child, m.value(x), J @ xd)
            f += J.T @ (fc - Mc @ m.curvature(x, xd))
            M += J.T @ Mc @ J
        return f, M

    f, M = recurse(tree.root, state.q, state.qd)
    return np.linalg.pinv(M) @ f


def two_child_closed_form(tree: TreeSpec, state: PolicyState, params=None) -> np.ndarray:
    """Root acceleration of a two-level tree from the resultant dynamics.

    Assembles M qdd = -grad(Phi_r) - B_r qd - eta directly: the potential
    gradient by the product rule over the weights, and eta from the
    pulled-back child curvatures plus the weight-gradient terms.  This
    never touches the force/correction-term recursion, so it is an
    independent oracle for trees whose children are all leaves.
    """
    q, qd, aux = state.q, state.qd, state.aux
    d = q.shape[0]
    M = np.zeros((d, d))
    grad_phi = np.zeros(d)
    damp = np.zeros(d)
    eta = np.zeros(d)
    for child in tree.children[tree.root]:
        assert tree.is_leaf(child), "closed form applies to depth-one trees"
        edge = tree.edges[child]
        m = edge.map.bind(aux)
        y = m.value(q)
        J = m.jacobian(q)
        yd = J @ qd
        curv = m.curvature(q, qd)
        spec = tree.leaves[child]
        G = spec.metric(y, yd)
        B = spec.damping(y, yd)
        Xi, xi = gds_curvature(spec, y, yd)
        wv = weight_eval(edge.weight, q, aux, params)
        w, gw = wv.value, wv.grad_x
        JGJ = J.T @ G @ J
        M += w * (J.T @ (G + Xi) @ J)
        grad_phi += w * (J.T @ spec.potential_grad(y)) + float(spec.potential(y)) * gw
        damp += w * (J.T @ B @ (J @ qd))
        eta += (
            w * (J.T @ (xi + (G + Xi) @ curv))
            + float(qd @ gw) * (JGJ @ qd)
            - 0.5 * float(qd @ JGJ @ qd) * gw
        )
    return np.linalg.pinv(M) @ (-grad_phi - damp - eta)


def lyapunov_path_expansion(tree: TreeSpec, state: PolicyState, params=None) -> float:
    """Sum over root-to-leaf paths of (product of edge weights) x leaf energy."""
    coords = pushforward(tree, state)

    def paths(node, factor):
        if tree.is_leaf(node):
            x, xd = coords[node]
            return factor * gds_evaluate(tree.leaves[node], x, xd).V
        total = 0.0
        x_parent, _ = coords[node]
        for child in tree.children[node]:
            w = weight_eval(tree.edges[child].weight, x_parent, state.aux, params).value
            total += paths(child, factor * w)
        return total

    return paths(tree.root, 1.0)


# -- random trees -------------------------------------------------------------------


def random_tree(
    rng: np.random.Generator,
    max_depth: int = 3,
    max_dim: int = 4,
    learnable: bool = False,
) -> TreeSpec:
    """Random topology/maps/leaves for property sweeps.

    The root always carries an identity-metric leaf with a large floor so
    the resolved inertia stays well conditioned, mirroring how real trees
    regularize the root.
    """
    root_dim = int(rng.integers(1, max_dim + 1))
    edges = []
    leaves = {}
    counter = [0]

    def fresh(prefix):
        counter[0] += 1
        return f"{prefix}{counter[0]}"

    def rand_map(dp, dc):
        choice = rng.random()
        if dc == dp and choice < 0.35:
            return identity(dp) if choice < 0.15 else goal_offset(rng.uniform(-1, 1, dp))
        if dc == 1 and choice < 0.6:
            if choice < 0.45 and dp >= 1:
                center = rng.uniform(2.5, 3.5, dp) * rng.choice([-1.0, 1.0], dp)
                return distance_to_point(center, float(rng.uniform(0.1, 0.5)))
            return joint_limit_1d(dp, int(rng.integers(0, dp)), float(rng.uniform(-2, 2)),
                                  "lower" if rng.random() < 0.5 else "upper")
        A = rng.uniform(-1.0, 1.0, (dc, dp))
        b = rng.uniform(-0.5, 0.5, dc)
        if choice > 0.85 and dc == dp:
            return compose(affine(A, b), goal_offset(rng.uniform(-1, 1, dp)))
        return affine(A, b)

    def rand_leaf(dim):
        r = rng.random()
        if dim == 1 and r < 0.35:
            maker = obstacle_leaf if r < 0.2 else jointlimit_leaf
            return maker({
                "scale": float(rng.uniform(0.5, 3.0)),
                "length_scale": float(rng.uniform(0.3, 0.8)),
                "damping": float(rng.uniform(0.2, 1.5)),
            })
        if r < 0.55:
            return damper_leaf(dim, float(rng.uniform(0.3, 2.0)))
        return attractor_leaf(dim, {
            "stiffness": float(rng.uniform(0.5, 2.5)),
            "damping": float(rng.uniform(0.5, 3.0)),
            "metric_scale": float(rng.uniform(0.5, 2.0)),
            "norm_scale": float(rng.uniform(3.0, 10.0)),
        })

    def rand_weight(dp):
        if not learnable:
            return constant_weight(1.0)
        r = rng.random()
        if r < 0.2:
            return constant_weight(float(rng.uniform(0.3, 2.0)))
        hidden = [int(rng.integers(2, 5))] if r < 0.9 else []
        return mlp_weight(dp, hidden, "tanh" if rng.random() < 0.5 else "elu")

    def grow(parent, dp, depth):
        n_children = int(rng.integers(1, 4))
        for _ in range(n_children):
            dc = int(rng.integers(1, max_dim + 1))
            child = fresh("n")
            m = rand_map(dp, dc)
            dc = m.out_dim
            edges.append((parent, child, m, rand_weight(dp)))
            if depth + 1 >= max_depth or rng.random() < 0.45:
                leaves[child] = rand_leaf(dc)
            else:
                grow(child, dc, depth + 1)

    grow("root", root_dim, 1)
    reg = fresh("reg")
    edges.append(("root", reg, identity(root_dim), constant_weight(1.0)))
    leaves[reg] = identity_metric_leaf(root_dim, float(rng.uniform(0.5, 1.5)))
    return make_tree("root", root_dim, 0, edges=edges, leaves=leaves)


def random_state(tree: TreeSpec, rng: np.random.Generator) -> PolicyState:
    return PolicyState(
        q=rng.uniform(-1.2, 1.2, tree.root_dim),
        qd=rng.uniform(-1.0, 1.0, tree.root_dim),
        aux=np.zeros(tree.aux_dim),
    )


def negative_weight_tree() -> TreeSpec:
    """Deliberately violates the positivity contract (for failure tests).

    The constructor helpers refuse non-positive constants, so the bad
    weight is built directly; evaluation must reject it at combine time.
    """
    bad = WeightFn(kind="constant", in_dim=0, value=-0.5)
    tree = make_tree(
        "q", 2, 0,
        edges=[("q", "leaf", identity(2), constant_weight(1.0))],
        leaves={"leaf": attractor_leaf(2, None)},
    )
    from .tree import Edge

    edges = dict(tree.edges)
    edges["leaf"] = Edge(map=edges["leaf"].map, weight=bad)
    return TreeSpec(
        root=tree.root, root_dim=2, aux_dim=0, children=dict(tree.children),
        edges=edges, leaves=dict(tree.leaves), param_dim=0,
    )


# -- suites -----------------------------------------------------------------------


def verify_reduction(seed: int = 0, n_trees: int = 200, states_per_tree: int = 3,
                     tol: float = 1e-10) -> SuiteReport:
    """Constant-one weights must match the minimal unweighted evaluator."""
    rng = np.random.default_rng(seed)
    report = SuiteReport(suite="reduction", passed=True)
    started = time.monotonic()
    worst = 0.0
    for k in range(n_trees):
        tree = reduce_to_rmpflow(random_tree(rng))
        for _ in range(states_per_tree):
            state = random_state(tree, rng)
            a = evaluate_policy(tree, state, warn_small_inertia=False).a
            a_ref = pullback_reference(tree, state)
            err = float(np.abs(a - a_ref).max())
            worst = max(worst, err)
            if err > tol:
                report.add(f"tree {k}", False, f"max-abs {err:.3e} > {tol:.0e}")
                report.counterexample = {
                    "tree_index": k, "q": state.q.tolist(), "qd": state.qd.tolist(),
                    "err": err,
                }
                return report
    elapsed = time.monotonic() - started
    report.add(
        f"{n_trees} random trees x {states_per_tree} states", True,
        f"worst max-abs {worst:.3e}, {elapsed:.1f}s",
    )
    return report


def _stability_job(args) -> tuple[int, float | None, str | None, dict]:
    seed, k, task, tree, dt, horizon = args
    if tree is None:
        tree = fixtures.build_fixture(f"{task}_learner")
    cfg = fixtures.env_sampler(task)
    rng = np.random.default_rng([seed, k])
    env = sample_env(cfg, rng)
    q0, qd0 = sample_start(cfg, env, rng)
    policy = TreePolicy(tree)
    params = policy.init_params(rng)
    info = {"rollout": k, "aux": env.aux().tolist(), "q0": q0.tolist(), "qd0": qd0.tolist()}
    try:
        traj = rollout(policy.bind(params), env, q0, qd0, horizon, dt)
    except StabilityContractError as e:
        return k, None, str(e), info
    inc = float(np.diff(traj.V).max()) if traj.t.shape[0] > 1 else -np.inf
    return k, inc, None, info


def verify_stability(
    seed: int = 0,
    n_rollouts: int = 100,
    dt: float = 1e-2,
    horizon: float = 10.0,
    tree: TreeSpec | None = None,
    task: str = "2d2level",
    workers: int = 1,
) -> SuiteReport:
    """Discrete root-energy decay on rollouts with untrained weights.

    Every increment must stay below the integrator slack 10*dt^3 + 1e-9.
    Rollouts are independent; with workers > 1 they run in parallel
    processes and are reported in rollout order either way.
    """
    report = SuiteReport(suite="stability", passed=True)
    bound = 10.0 * dt**3 + 1e-9
    jobs = [(seed, k, task, tree, dt, horizon) for k in range(n_rollouts)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_stability_job, jobs, chunksize=4))
    else:
        results = [_stability_job(j) for j in jobs]
    worst = -np.inf
    for k, inc, err, info in results:
        if err is not None:
            report.add(f"rollout {k}", False, f"contract violation: {err}")
            report.counterexample = {**info, "error": err}
            return report
        worst = max(worst, inc)
        if inc > bound:
            report.add(f"rollout {k}", False, f"V increment {inc:.3e} > {bound:.3e}")
            report.counterexample = {**info, "increment": inc}
            return report
    report.add(
        f"{n_rollouts} rollouts, T={horizon}s, dt={dt}", True,
        f"worst V increment {worst:.3e} (bound {bound:.3e})",
    )
    return report


def verify_gradients(seed: int = 0, n_trees: int = 50, h: float = 1e-5) -> SuiteReport:
    """Reverse-mode parameter gradients against central finite differences."""
    rng = np.random.default_rng(seed)
    report = SuiteReport(suite="gradients", passed=True)
    total = rel_ok = abs_ok = 0
    for k in range(n_trees):
        tree = random_tree(rng, max_depth=3, max_dim=3, learnable=True)
        if tree.param_dim == 0:
            continue
        policy = TreePolicy(tree)
        params = policy.init_params(rng) + 0.1 * rng.standard_normal(tree.param_dim)
        n_rec = int(rng.integers(1, 4))
        states = [random_state(tree, rng) for _ in range(n_rec)]
        ds = Dataset(
            q=np.stack([s.q for s in states]),
            qd=np.stack([s.qd for s in states]),
            aux=np.stack([s.aux for s in states]),
            a_expert=rng.uniform(-1, 1, (n_rec, tree.root_dim)),
            env_id=np.zeros(n_rec, int),
            traj_id=np.arange(n_rec),
        )
        _, grad = grad_params(tree, ds, params)
        cache = policy.precompute(ds)
        for i in range(tree.param_dim):
            e = np.zeros_like(params)
            e[i] = h
            fd = (
                policy.loss_value(cache, slice(None), params + e)
                - policy.loss_value(cache, slice(None), params - e)
            ) / (2 * h)
            diff = abs(fd - grad[i])
            total += 1
            if diff <= 1e-4 * max(abs(fd), abs(grad[i])):
                rel_ok += 1
            elif diff <= 1e-3:
                abs_ok += 1
            else:
                report.add(
                    f"tree {k} param {i}", False,
                    f"fd {fd:.6e} vs grad {grad[i]:.6e}",
                )
                report.counterexample = {"tree": k, "param": i, "fd": fd, "grad": grad[i]}
                return report
    frac = rel_ok / max(total, 1)
    ok = frac >= 0.95
    report.add(
        f"{total} components over {n_trees} trees",
        ok,
        f"{100 * frac:.2f}% within 1e-4 relative, rest within 1e-3 absolute",
    )
    return report


def verify_lemma2(seed: int = 0, n_states: int = 100, tol: float = 1e-10) -> SuiteReport:
    """Two-step decomposition equivalence on every shipped fixture, and the
    closed-form resultant dynamics on the two-child tree."""
    report = SuiteReport(suite="lemma2", passed=True)
    tasks = {
        "2d1level_expert": "2d1level", "2d2level_expert": "2d2level",
        "arm_expert": "arm", "y_tree": "y_tree",
    }
    for fixture_index, (name, task) in enumerate(tasks.items()):
        tree = fixtures.build_fixture(name)
        expanded = decompose_two_step(tree)
        n_edges = len(tree.edges)
        if len(expanded.edges) != 2 * n_edges:
            report.add(f"{name} edge count", False, f"{len(expanded.edges)} != {2 * n_edges}")
            continue
        rng = np.random.default_rng([seed, fixture_index])
        worst = 0.0
        for _ in range(n_states):
            state = fixtures.sample_task_state(task, rng)
            a = evaluate_policy(tree, state, warn_small_inertia=False).a
            b = evaluate_policy(expanded, state, warn_small_inertia=False).a
            worst = max(worst, float(np.abs(a - b).max()))
        report.add(f"{name} two-step equivalence", worst <= tol, f"worst {worst:.3e}")
        if worst > tol:
            report.counterexample = {"fixture": name, "err": worst}
    y = fixtures.build_fixture("y_tree")
    rng = np.random.default_rng([seed, 99])
    worst = 0.0
    for _ in range(n_states):
        state = fixtures.sample_task_state("y_tree", rng)
        a = evaluate_policy(y, state, warn_small_inertia=False).a
        a_ref = two_child_closed_form(y, state)
        worst = max(worst, float(np.abs(a - a_ref).max()))
    report.add("y_tree closed-form dynamics", worst <= 1e-8, f"worst {worst:.3e}")
    return report


def verify_energy(dt: float = 1e-3, horizon: float = 1.0, tol: float = 1e-5) -> SuiteReport:
    """Zero damping + constant weights conserve the root energy under RK4."""
    report = SuiteReport(suite="energy", passed=True)
    tree = fixtures.build_y_tree(conservative=True)
    policy = TreePolicy(tree)
    bound = policy.bind(np.zeros(0))
    q = np.array([0.4, -0.3])
    qd = np.array([0.6, 0.9])
    aux = np.zeros(0)
    v0 = lyapunov_root(tree, PolicyState(q=q, qd=qd, aux=aux))
    steps = int(round(horizon / dt))
    for _ in range(steps):
        q, qd = integrate_step(bound, q, qd, aux, dt, "rk4")
    v1 = lyapunov_root(tree, PolicyState(q=q, qd=qd, aux=aux))
    drift = abs(v1 - v0)
    report.add(
        f"|V({horizon}s) - V(0)| with B=0, unit weights", drift <= tol,
        f"drift {drift:.3e} over {steps} steps",
    )
    if drift > tol:
        report.counterexample = {"drift": drift, "v0": v0, "v1": v1}
    return report


def run_suite(
    name: str, seed: int = 0, tree: TreeSpec | None = None, workers: int = 1
) -> SuiteReport:
    if name == "reduction":
        return verify_reduction(seed=seed)
    if name == "stability":
        return verify_stability(seed=seed, tree=tree, workers=workers)
    if name == "gradients":
        return verify_gradients(seed=seed)
    if name == "lemma2":
        return verify_lemma2(seed=seed)
    if name == "energy":
        return verify_energy()
    raise ValueError(f"unknown suite {name!r}; have {SUITES}")
