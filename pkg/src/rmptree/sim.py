"""Environments, fixed-step integration, instrumented rollouts, dataset
generation, and evaluation metrics.

A rollout policy is anything with ``act(q, qd, aux) -> (a, V)``; fusion
policies report their root energy V, plain regression policies report
NaN.  Rollouts are deterministic given (seed, config); running them
across environments in parallel threads is safe because policy
evaluation is pure, and assembly stays in submission order.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, RmpTreeError
from .learn.data import Dataset, concat_datasets
from .learn.training import loss_mse
from .taskmaps import planar_fk

# fractions along each link probed for collision (and the tip for the goal)
ARM_PROBE_FRACTIONS = (0.5, 1.0)
GOAL_TOL = 0.05
REJECTION_CAP = 10_000


@dataclass(frozen=True)
class Obstacle:
    center: np.ndarray
    radius: float


@dataclass(frozen=True, eq=False)
class Environment:
    kind: str  # point2d | planar_arm
    obstacles: tuple[Obstacle, ...]
    goal: np.ndarray  # workspace goal (2-D in both kinds)
    bounds: tuple[np.ndarray, np.ndarray]  # workspace box (lo, hi)
    link_lengths: np.ndarray | None = None  # planar_arm only
    joint_limits: tuple[np.ndarray, np.ndarray] | None = None  # planar_arm only

    def aux(self) -> np.ndarray:
        """[goal, (center, radius) per obstacle], the weight-function context."""
        parts = [np.asarray(self.goal, float)]
        for ob in self.obstacles:
            parts.append(np.asarray(ob.center, float))
            parts.append(np.array([ob.radius]))
        return np.concatenate(parts)

    @staticmethod
    def aux_dim(n_obstacles: int) -> int:
        return 2 + 3 * n_obstacles

    @staticmethod
    def from_aux(kind, aux, bounds, link_lengths=None, joint_limits=None) -> "Environment":
        aux = np.asarray(aux, dtype=float)
        if (aux.shape[0] - 2) % 3 != 0:
            raise DimensionError(f"aux of dim {aux.shape[0]} is not [goal(2), (c(2), r)*k]")
        n = (aux.shape[0] - 2) // 3
        obstacles = tuple(
            Obstacle(center=aux[2 + 3 * i : 4 + 3 * i].copy(), radius=float(aux[4 + 3 * i]))
            for i in range(n)
        )
        return Environment(
            kind=kind,
            obstacles=obstacles,
            goal=aux[:2].copy(),
            bounds=bounds,
            link_lengths=link_lengths,
            joint_limits=joint_limits,
        )

    def probe_points(self, q: np.ndarray) -> np.ndarray:
        """Workspace points checked against obstacles (robot body samples)."""
        if self.kind == "point2d":
            return q[None, :]
        maps = _arm_probe_maps(tuple(self.link_lengths))
        return np.stack([m.value(q) for m in maps])

    def effector(self, q: np.ndarray) -> np.ndarray:
        if self.kind == "point2d":
            return q
        return _arm_tip_map(tuple(self.link_lengths)).value(q)

    def min_clearance(self, q: np.ndarray) -> float:
        """Smallest signed distance from any probe point to any obstacle."""
        if not self.obstacles:
            return np.inf
        pts = self.probe_points(q)
        best = np.inf
        for ob in self.obstacles:
            d = np.linalg.norm(pts - ob.center, axis=1) - ob.radius
            best = min(best, float(d.min()))
        return best


_PROBE_CACHE: dict[tuple, list] = {}


def _arm_probe_maps(lengths: tuple):
    if lengths not in _PROBE_CACHE:
        arr = np.asarray(lengths)
        maps = []
        for link in range(1, len(lengths) + 1):
            for frac in ARM_PROBE_FRACTIONS:
                maps.append(planar_fk(arr, link, frac))
        _PROBE_CACHE[lengths] = maps
    return _PROBE_CACHE[lengths]


def _arm_tip_map(lengths: tuple):
    return _arm_probe_maps(lengths)[-1]


# -- integration ---------------------------------------------------------------


def integrate_step(policy, q, qd, aux, dt: float, method: str = "rk4"):
    """One explicit step of qdd = policy(q, qd) on the state (q, qd)."""
    if dt <= 0.0:
        raise ConfigError(f"dt must be positive, got {dt}")
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    if method == "euler":
        a, _ = policy.act(q, qd, aux)
        return q + dt * qd, qd + dt * np.asarray(a, float)
    if method != "rk4":
        raise ConfigError(f"unknown integration method {method!r}")
    k1v = np.asarray(policy.act(q, qd, aux)[0], float)
    k1q = qd
    k2q = qd + 0.5 * dt * k1v
    k2v = np.asarray(policy.act(q + 0.5 * dt * k1q, k2q, aux)[0], float)
    k3q = qd + 0.5 * dt * k2v
    k3v = np.asarray(policy.act(q + 0.5 * dt * k2q, k3q, aux)[0], float)
    k4q = qd + dt * k3v
    k4v = np.asarray(policy.act(q + dt * k3q, k4q, aux)[0], float)
    q_next = q + dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    qd_next = qd + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return q_next, qd_next


@dataclass
class Trajectory:
    dt: float
    t: np.ndarray  # (N,)
    q: np.ndarray  # (N, d)
    qd: np.ndarray
    a: np.ndarray
    V: np.ndarray  # (N,), NaN for policies without energy diagnostics
    collision: bool = False
    collision_time: float | None = None
    goal_reached: bool = False
    goal_time: float | None = None
    timed_out: bool = False


def rollout(
    policy,
    env: Environment,
    q0,
    qd0,
    T: float,
    dt: float = 1e-2,
    method: str = "rk4",
    goal_tol: float = GOAL_TOL,
) -> Trajectory:
    """Integrate until the goal is reached, a collision occurs, or T elapses.

    A collision is an event, not an error: the trajectory records it and
    stops.  V is sampled from the policy at every step.
    """
    if dt <= 0.0 or T <= 0.0:
        raise ConfigError("rollout needs positive dt and horizon")
    q = np.asarray(q0, dtype=float).copy()
    qd = np.asarray(qd0, dtype=float).copy()
    aux = env.aux()
    n_steps = int(round(T / dt))
    ts, qs, qds, accs, vs = [], [], [], [], []
    traj = None
    for k in range(n_steps + 1):
        t = k * dt
        try:
            a, V = policy.act(q, qd, aux)
        except RmpTreeError as e:
            raise type(e)(f"t={t:.3f}: {e}") from e
        ts.append(t)
        qs.append(q.copy())
        qds.append(qd.copy())
        accs.append(np.asarray(a, float).copy())
        vs.append(float(V))
        if env.min_clearance(q) <= 0.0:
            traj = _finish(dt, ts, qs, qds, accs, vs, collision=True, collision_time=t)
            break
        if float(np.linalg.norm(env.effector(q) - env.goal)) <= goal_tol:
            traj = _finish(dt, ts, qs, qds, accs, vs, goal_reached=True, goal_time=t)
            break
        if k == n_steps:
            traj = _finish(dt, ts, qs, qds, accs, vs, timed_out=True)
            break
        q, qd = integrate_step(policy, q, qd, aux, dt, method)
        if not (np.isfinite(q).all() and np.isfinite(qd).all()):
            raise NumericError(f"state diverged at t={t:.3f}")
    return traj


def _finish(dt, ts, qs, qds, accs, vs, **events) -> Trajectory:
    return Trajectory(
        dt=dt,
        t=np.asarray(ts),
        q=np.stack(qs),
        qd=np.stack(qds),
        a=np.stack(accs),
        V=np.asarray(vs),
        **events,
    )


# -- environment sampling --------------------------------------------------------


@dataclass(frozen=True)
class EnvSampler:
    """Sampling ranges for random environments and initial states."""

    kind: str = "point2d"
    n_obstacles: int = 1
    bounds_lo: tuple = (-2.0, -2.0)
    bounds_hi: tuple = (2.0, 2.0)
    radius_range: tuple = (0.25, 0.5)
    clearance: float = 0.35  # min gap obstacle<->goal, obstacle<->start, obstacle<->obstacle
    start_goal_min_dist: float = 1.5
    start_speed: float = 0.4
    link_lengths: tuple | None = None  # planar_arm
    joint_limits_lo: tuple | None = None
    joint_limits_hi: tuple | None = None

    @property
    def aux_dim(self) -> int:
        return Environment.aux_dim(self.n_obstacles)

    def _box(self):
        return np.asarray(self.bounds_lo, float), np.asarray(self.bounds_hi, float)

    def _joint_limits(self):
        return (
            np.asarray(self.joint_limits_lo, float),
            np.asarray(self.joint_limits_hi, float),
        )


def sample_env(cfg: EnvSampler, rng: np.random.Generator) -> Environment:
    """Rejection-sample an environment consistent with the ranges."""
    lo, hi = cfg._box()
    if cfg.kind == "point2d":
        return _sample_env_2d(cfg, rng, lo, hi)
    if cfg.kind == "planar_arm":
        return _sample_env_arm(cfg, rng, lo, hi)
    raise ConfigError(f"unknown environment kind {cfg.kind!r}")


def _sample_env_2d(cfg, rng, lo, hi) -> Environment:
    for _ in range(REJECTION_CAP):
        goal = rng.uniform(lo + 0.3, hi - 0.3)
        obstacles = []
        ok = True
        for _ in range(cfg.n_obstacles):
            r = rng.uniform(*cfg.radius_range)
            c = rng.uniform(lo + r, hi - r)
            if np.linalg.norm(c - goal) - r < cfg.clearance:
                ok = False
                break
            if any(
                np.linalg.norm(c - ob.center) - r - ob.radius < cfg.clearance
                for ob in obstacles
            ):
                ok = False
                break
            obstacles.append(Obstacle(center=c, radius=r))
        if ok:
            return Environment(
                kind="point2d", obstacles=tuple(obstacles), goal=goal, bounds=(lo, hi)
            )
    raise ConfigError("sample_env: rejection sampling failed; ranges look infeasible")


def _sample_env_arm(cfg, rng, lo, hi) -> Environment:
    lengths = np.asarray(cfg.link_lengths, float)
    reach = float(lengths.sum())
    jlo, jhi = cfg._joint_limits()
    for _ in range(REJECTION_CAP):
        # goal in a reachable annulus in the upper half plane
        ang = rng.uniform(0.25, np.pi - 0.25)
        rad = rng.uniform(0.45 * reach, 0.9 * reach)
        goal = rad * np.array([np.cos(ang), np.sin(ang)])
        obstacles = []
        ok = True
        for _ in range(cfg.n_obstacles):
            r = rng.uniform(*cfg.radius_range)
            oang = rng.uniform(0.3, np.pi - 0.3)
            orad = rng.uniform(0.4 * reach, 0.85 * reach)
            c = orad * np.array([np.cos(oang), np.sin(oang)])
            if np.linalg.norm(c - goal) - r < cfg.clearance:
                ok = False
                break
            if any(
                np.linalg.norm(c - ob.center) - r - ob.radius < cfg.clearance
                for ob in obstacles
            ):
                ok = False
                break
            obstacles.append(Obstacle(center=c, radius=r))
        if ok:
            return Environment(
                kind="planar_arm",
                obstacles=tuple(obstacles),
                goal=goal,
                bounds=(lo, hi),
                link_lengths=lengths,
                joint_limits=(jlo, jhi),
            )
    raise ConfigError("sample_env: rejection sampling failed; ranges look infeasible")


def sample_start(cfg: EnvSampler, env: Environment, rng: np.random.Generator):
    """Initial (q0, qd0) clear of obstacles (and goal, so runs are nontrivial)."""
    if env.kind == "point2d":
        lo, hi = env.bounds
        for _ in range(REJECTION_CAP):
            q0 = rng.uniform(lo + 0.1, hi - 0.1)
            if env.min_clearance(q0) < cfg.clearance:
                continue
            if np.linalg.norm(q0 - env.goal) < cfg.start_goal_min_dist:
                continue
            qd0 = rng.uniform(-cfg.start_speed, cfg.start_speed, size=2)
            return q0, qd0
        raise ConfigError("sample_start: rejection sampling failed")
    jlo, jhi = env.joint_limits
    margin = 0.15 * (jhi - jlo)
    for _ in range(REJECTION_CAP):
        q0 = rng.uniform(jlo + margin, jhi - margin)
        if env.min_clearance(q0) < cfg.clearance:
            continue
        if np.linalg.norm(env.effector(q0) - env.goal) < cfg.start_goal_min_dist:
            continue
        qd0 = rng.uniform(-cfg.start_speed, cfg.start_speed, size=jlo.shape[0])
        return q0, qd0
    raise ConfigError("sample_start: rejection sampling failed")


# -- dataset generation -----------------------------------------------------------


@dataclass(frozen=True)
class DataGenConfig:
    env: EnvSampler
    envs: int
    traj_per_env: int
    points_per_traj: int
    seed: int
    dt: float = 1e-2
    timeout: float = 10.0
    method: str = "rk4"
    goal_tol: float = GOAL_TOL
    split: str = "train"


def _rollout_job(args):
    expert, env, q0, qd0, timeout, dt, method, goal_tol, e = args
    try:
        traj = rollout(expert, env, q0, qd0, timeout, dt, method, goal_tol)
    except RmpTreeError:
        return e, None, "error"
    if traj.collision:
        return e, None, "collision"
    return e, traj, None


@dataclass
class GenSummary:
    records: int = 0
    rollouts: int = 0
    skipped_collisions: int = 0
    skipped_errors: int = 0


def gen_dataset(
    expert, cfg: DataGenConfig, workers: int = 1
) -> tuple[Dataset, list[Environment], GenSummary]:
    """Run the expert in sampled environments and record equidistant points.

    Each trajectory contributes points_per_traj samples taken temporally
    equidistant over its realized duration.  Expert rollouts that collide
    or fail are skipped and counted in the summary.
    """
    if cfg.envs < 1 or cfg.traj_per_env < 1 or cfg.points_per_traj < 1:
        raise ConfigError("gen_dataset: counts must be >= 1")
    envs = [sample_env(cfg.env, np.random.default_rng([cfg.seed, 2, e])) for e in range(cfg.envs)]
    jobs = []
    for e, env in enumerate(envs):
        for j in range(cfg.traj_per_env):
            q0, qd0 = sample_start(cfg.env, env, np.random.default_rng([cfg.seed, 3, e, j]))
            jobs.append((e, env, q0, qd0))

    run_jobs = [
        (expert, env, q0, qd0, cfg.timeout, cfg.dt, cfg.method, cfg.goal_tol, e)
        for (e, env, q0, qd0) in jobs
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_rollout_job, run_jobs, chunksize=4))
    else:
        results = [_rollout_job(job) for job in run_jobs]

    summary = GenSummary(rollouts=len(jobs))
    parts = []
    traj_counter = 0
    for e, traj, why in results:
        if traj is None:
            if why == "collision":
                summary.skipped_collisions += 1
            else:
                summary.skipped_errors += 1
            continue
        n = traj.t.shape[0]
        # duplicates are kept when a rollout is shorter than the requested
        # point count, so record totals stay exactly envs*traj*points
        idx = np.round(np.linspace(0, n - 1, cfg.points_per_traj)).astype(int)
        aux = envs[e].aux()
        parts.append(
            Dataset(
                q=traj.q[idx],
                qd=traj.qd[idx],
                aux=np.tile(aux, (idx.shape[0], 1)),
                a_expert=traj.a[idx],
                env_id=np.full(idx.shape[0], e, dtype=int),
                traj_id=np.full(idx.shape[0], traj_counter, dtype=int),
                split=cfg.split,
            )
        )
        traj_counter += 1
    if not parts:
        raise ConfigError("gen_dataset: every expert rollout was skipped")
    ds = concat_datasets(parts, cfg.split)
    summary.records = len(ds)
    return ds, envs, summary


# -- metrics -------------------------------------------------------------------


@dataclass
class Metrics:
    time_to_goal: float
    conf_length: float
    end_eff_length: float
    goal_distance: float
    collided: bool


def eval_metrics(traj: Trajectory, env: Environment) -> Metrics:
    dq = np.diff(traj.q, axis=0)
    conf_length = float(np.linalg.norm(dq, axis=1).sum()) if len(traj.q) > 1 else 0.0
    if env.kind == "planar_arm":
        ee = np.stack([env.effector(q) for q in traj.q])
    else:
        ee = traj.q
    dee = np.diff(ee, axis=0)
    ee_length = float(np.linalg.norm(dee, axis=1).sum()) if len(ee) > 1 else 0.0
    goal_distance = float(np.linalg.norm(ee[-1] - env.goal))
    time_to_goal = traj.goal_time if traj.goal_reached else float(traj.t[-1])
    return Metrics(
        time_to_goal=float(time_to_goal),
        conf_length=conf_length,
        end_eff_length=ee_length,
        goal_distance=goal_distance,
        collided=traj.collision,
    )


def online_loss(
    learner,
    expert,
    test: Dataset,
    env_lookup,
    dt: float = 1e-2,
    timeout: float = 10.0,
    interval: float = 1.0,
    method: str = "rk4",
    goal_tol: float = GOAL_TOL,
) -> float:
    """Covariate-shift-sensitive loss: roll the learner out from the test
    initial states and compare its actions to the expert queried at the
    learner's own visited states, sampled at the given time interval.

    env_lookup maps an aux row back to an Environment (the encoding
    round-trips, so a callable built from the environment kind suffices).
    """
    losses = []
    for tid in np.unique(test.traj_id):
        rows = np.nonzero(test.traj_id == tid)[0]
        first = rows[0]
        env = env_lookup(test.aux[first])
        traj = rollout(
            learner, env, test.q[first], test.qd[first], timeout, dt, method, goal_tol
        )
        stride = max(1, int(round(interval / dt)))
        aux = env.aux()
        for k in range(0, traj.t.shape[0], stride):
            a_exp, _ = expert.act(traj.q[k], traj.qd[k], aux)
            losses.append(loss_mse(traj.a[k], a_exp))
    if not losses:
        raise ConfigError("online_loss: no samples")
    return float(np.mean(losses))
