"""Command-line entry point: data generation, training, evaluation,
rollouts, verification suites, and plot emission.

Every command is driven by a YAML experiment config with explicit seeds;
reports embed the config digest so results are reproducible from
(config, seed) alone.  Exit codes: 0 success, 1 domain failure (a
verification suite failed), 2 usage or configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import fixtures, serialize, verify
from .errors import ConfigError, RmpTreeError
from .learn import TrainConfig, TreePolicy, UnstructuredPolicy, train_bc
from .learn.training import OptState
from .sim import (
    DataGenConfig,
    Environment,
    EnvSampler,
    eval_metrics,
    gen_dataset,
    online_loss,
    rollout,
    sample_env,
    sample_start,
)
from .tree import TreeSpec

log = logging.getLogger("rmptree")


def _load_tree_ref(ref: str) -> TreeSpec:
    if ref.startswith("builtin:"):
        name = ref.split(":", 1)[1]
        if name == "negative-weight":
            return verify.negative_weight_tree()
        return fixtures.build_fixture(name)
    return serialize.load_tree(ref)


def _env_sampler(cfg: dict) -> EnvSampler:
    sampler = fixtures.env_sampler(cfg["task"])
    overrides = cfg.get("env", {}) or {}
    fields = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
    return replace(sampler, **fields)


def _expert_policy(cfg: dict):
    tree = _load_tree_ref(cfg["expert"]["tree"])
    return TreePolicy(tree).bind(np.zeros(tree.param_dim))


def _learner_policy(cfg: dict):
    pol = cfg["policy"]
    if pol.get("kind", "fusion") == "fusion":
        tree = _load_tree_ref(pol["tree"])
        return TreePolicy(tree), serialize.tree_hash(tree)
    ref_tree = _load_tree_ref(pol["match_params_of"])
    sampler = _env_sampler(cfg)
    dq = ref_tree.root_dim
    net = UnstructuredPolicy(
        in_dim=2 * dq + sampler.aux_dim,
        hidden=pol.get("hidden", [64]),
        out_dim=dq,
        activation=pol.get("activation", "tanh"),
    )
    tol = float(pol.get("tolerance", 0.2))
    ref_n = ref_tree.param_dim
    if abs(net.n_params - ref_n) > tol * ref_n:
        raise ConfigError(
            f"unstructured learner has {net.n_params} parameters; "
            f"must be within {tol:.0%} of the fusion learner's {ref_n}"
        )
    import hashlib
    import json

    digest = hashlib.sha256(
        json.dumps(
            {"kind": "unstructured", "in_dim": net.in_dim, "hidden": list(net.hidden),
             "out_dim": net.out_dim, "activation": net.activation},
            sort_keys=True,
        ).encode()
    ).hexdigest()[:16]
    return net, digest


def _data_cfg(cfg: dict, split: str) -> DataGenConfig:
    data = cfg["data"]
    counts = data[split]
    return DataGenConfig(
        env=_env_sampler(cfg),
        envs=int(counts["envs"]),
        traj_per_env=int(counts["traj_per_env"]),
        points_per_traj=int(counts["points_per_traj"]),
        seed=int(cfg["seed"]) + (0 if split == "train" else 1_000_003),
        dt=float(data.get("dt", 1e-2)),
        timeout=float(data.get("timeout", 10.0)),
        goal_tol=float(data.get("goal_tol", 0.05)),
        split=split,
    )


def _out_dir(cfg: dict, args) -> Path:
    out = Path(args.out) if args.out else Path(cfg.get("out", "runs/out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = serialize.load_config(args.config)
    out = _out_dir(cfg, args)
    expert = _expert_policy(cfg)
    summary = {"schema": 1, "config_digest": serialize.config_digest(cfg), "splits": {}}
    for split in ("train", "test"):
        ds, envs, gen = gen_dataset(expert, _data_cfg(cfg, split), workers=args.workers)
        serialize.save_dataset(ds, out / f"{split}.jsonl")
        summary["splits"][split] = {
            "records": gen.records,
            "rollouts": gen.rollouts,
            "skipped_collisions": gen.skipped_collisions,
            "skipped_errors": gen.skipped_errors,
            "env_digests": [
                serialize.config_digest({"aux": env.aux().tolist()}) for env in envs
            ],
        }
        log.info("%s: %d records (%d rollouts)", split, gen.records, gen.rollouts)
    (out / "data_summary.yaml").write_text(yaml.safe_dump(summary, sort_keys=False))
    print(f"wrote {out}/train.jsonl, {out}/test.jsonl")
    return 0


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        optimizer=t.get("optimizer", "rmsprop"),
        learning_rate=float(t.get("learning_rate", 1e-3)),
        minibatch=int(t.get("minibatch", 200)),
        iterations=int(t.get("iterations", 1000)),
        seed=int(cfg["seed"]),
        checkpoint_every=int(t.get("checkpoint_every", 0)),
    )


def cmd_train(args) -> int:
    cfg = serialize.load_config(args.config)
    out = _out_dir(cfg, args)
    policy, model_hash = _learner_policy(cfg)
    dataset = serialize.load_dataset(out / "train.jsonl", split="train")
    tcfg = _train_config(cfg)

    init = None
    opt_state: OptState | None = None
    start_it = 0
    if args.resume:
        ck = serialize.load_checkpoint(args.resume)
        if ck["tree_hash"] != model_hash:
            raise ConfigError(f"checkpoint {args.resume} belongs to a different model")
        init = ck["params"]
        opt_state = ck.get("opt")
        start_it = int(ck.get("iteration", 0))
        remaining = tcfg.iterations - start_it
        if remaining < 0:
            raise ConfigError("checkpoint is already past the configured iterations")
        tcfg = replace(tcfg, iterations=remaining)

    result = train_bc(
        policy, dataset, tcfg, init=init, opt_state=opt_state, start_iteration=start_it
    )
    serialize.save_checkpoint(
        out / "checkpoint.json", model_hash, result.params, opt=result.opt_state,
        iteration=start_it + tcfg.iterations,
        extra={"config_digest": serialize.config_digest(cfg)},
    )
    for it, params in result.checkpoints.items():
        serialize.save_checkpoint(out / f"ckpt_{it:06d}.json", model_hash, params, iteration=it)
    mode = "a" if args.resume else "w"
    with open(out / "curve.txt", mode) as fh:
        if not args.resume:
            fh.write("# iteration loss\n")
        for it, loss in result.curve:
            fh.write(f"{it} {loss!r}\n")
    final = result.curve[-1][1] if result.curve else float("nan")
    print(f"trained {tcfg.iterations} iterations, final minibatch loss {final:.3e}")
    return 0


def _rates(trajs) -> dict:
    n = max(len(trajs), 1)
    completed = sum(t.goal_reached for t in trajs)
    collided = sum(t.collision for t in trajs)
    timed_out = sum(t.timed_out for t in trajs)
    return {
        "rollouts": len(trajs),
        "completed": completed,
        "collided": collided,
        "timed_out": timed_out,
        "completion_rate": completed / n,
        "collision_rate": collided / n,
        "timeout_rate": timed_out / n,
    }


def _test_rollouts(policy, test_ds, sampler: EnvSampler, dt, timeout, goal_tol):
    trajs = []
    envs = []
    starts = []
    for tid in np.unique(test_ds.traj_id):
        first = int(np.nonzero(test_ds.traj_id == tid)[0][0])
        env = Environment.from_aux(
            sampler.kind,
            test_ds.aux[first],
            bounds=(np.asarray(sampler.bounds_lo), np.asarray(sampler.bounds_hi)),
            link_lengths=np.asarray(sampler.link_lengths) if sampler.link_lengths else None,
            joint_limits=(
                (np.asarray(sampler.joint_limits_lo), np.asarray(sampler.joint_limits_hi))
                if sampler.joint_limits_lo
                else None
            ),
        )
        traj = rollout(policy, env, test_ds.q[first], test_ds.qd[first], timeout, dt,
                       goal_tol=goal_tol)
        trajs.append(traj)
        envs.append(env)
        starts.append(first)
    return trajs, envs, starts


def cmd_eval(args) -> int:
    cfg = serialize.load_config(args.config)
    out = _out_dir(cfg, args)
    policy, model_hash = _learner_policy(cfg)
    ck = serialize.load_checkpoint(args.model)
    if ck["tree_hash"] != model_hash:
        raise ConfigError(f"checkpoint {args.model} belongs to a different model")
    params = ck["params"]
    bound = policy.bind(params)
    expert = _expert_policy(cfg)
    sampler = _env_sampler(cfg)
    test = serialize.load_dataset(out / "test.jsonl", split="test")
    data = cfg["data"]
    dt = float(data.get("dt", 1e-2))
    timeout = float(data.get("timeout", 10.0))
    goal_tol = float(cfg.get("eval", {}).get("goal_tol", data.get("goal_tol", 0.05)))

    cache = policy.precompute(test)
    pred = policy.predict(cache, slice(None), params)
    batch_loss = float(np.mean((pred - test.a_expert) ** 2))

    def env_lookup(aux):
        return Environment.from_aux(
            sampler.kind, aux,
            bounds=(np.asarray(sampler.bounds_lo), np.asarray(sampler.bounds_hi)),
            link_lengths=np.asarray(sampler.link_lengths) if sampler.link_lengths else None,
            joint_limits=(
                (np.asarray(sampler.joint_limits_lo), np.asarray(sampler.joint_limits_hi))
                if sampler.joint_limits_lo
                else None
            ),
        )

    onl = online_loss(
        bound, expert, test, env_lookup, dt=dt, timeout=timeout,
        interval=float(cfg.get("eval", {}).get("online_interval", 1.0)), goal_tol=goal_tol,
    )
    trajs, envs, starts = _test_rollouts(bound, test, sampler, dt, timeout, goal_tol)
    report = {
        "schema": 1,
        "config_digest": serialize.config_digest(cfg),
        "model_iteration": int(ck.get("iteration", 0)),
        "batch_loss": batch_loss,
        "online_loss": onl,
        **_rates(trajs),
    }
    if sampler.kind == "planar_arm":
        ratios = {"time": [], "conf_length": [], "end_eff_length": [], "goal_distance": []}
        for traj, env, first in zip(trajs, envs, starts):
            m_l = eval_metrics(traj, env)
            t_e = rollout(expert, env, test.q[first], test.qd[first], timeout, dt,
                          goal_tol=goal_tol)
            m_e = eval_metrics(t_e, env)
            ratios["time"].append(m_l.time_to_goal / max(m_e.time_to_goal, 1e-9))
            ratios["conf_length"].append(m_l.conf_length / max(m_e.conf_length, 1e-9))
            ratios["end_eff_length"].append(m_l.end_eff_length / max(m_e.end_eff_length, 1e-9))
            ratios["goal_distance"].append(m_l.goal_distance / max(m_e.goal_distance, 1e-9))
        report["metric_ratios"] = {
            k: {"mean": float(np.mean(v)), "std": float(np.std(v))} for k, v in ratios.items()
        }
    path = out / (args.report or "report.yaml")
    path.write_text(yaml.safe_dump(report, sort_keys=False))
    print(
        f"batch-loss {batch_loss:.3e}  online-loss {onl:.3e}  "
        f"completion {report['completion_rate']:.0%}  collisions {report['collided']}"
    )
    return 0


def cmd_rollout(args) -> int:
    cfg = serialize.load_config(args.config)
    out = _out_dir(cfg, args)
    sampler = _env_sampler(cfg)
    seed = int(cfg["seed"]) if args.seed is None else args.seed
    env = sample_env(sampler, np.random.default_rng([seed, 2, args.env_index]))
    q0, qd0 = sample_start(
        sampler, env, np.random.default_rng([seed, 3, args.env_index, args.traj_index])
    )
    if args.model:
        policy, model_hash = _learner_policy(cfg)
        ck = serialize.load_checkpoint(args.model)
        if ck["tree_hash"] != model_hash:
            raise ConfigError(f"checkpoint {args.model} belongs to a different model")
        bound = policy.bind(ck["params"])
    else:
        bound = _expert_policy(cfg)
    dt = args.dt or float(cfg["data"].get("dt", 1e-2))
    timeout = float(cfg["data"].get("timeout", 10.0))
    traj = rollout(bound, env, q0, qd0, timeout, dt, method=args.method)
    path = out / (args.traj_out or "trajectory.csv")
    serialize.save_trajectory(traj, path, env=env)
    status = "goal" if traj.goal_reached else ("collision" if traj.collision else "timeout")
    print(f"wrote {path} ({status} at t={traj.t[-1]:.2f}s)")
    return 0


def cmd_verify(args) -> int:
    tree = _load_tree_ref(args.tree) if args.tree else None
    report = verify.run_suite(args.suite, seed=args.seed or 0, tree=tree, workers=args.workers)
    for check in report.checks:
        marker = "PASS" if check.passed else "FAIL"
        print(f"[{marker}] {check.name}: {check.detail}")
    if not report.passed:
        if report.counterexample is not None:
            print("counterexample:")
            print(yaml.safe_dump(report.counterexample, sort_keys=False).rstrip())
        return 1
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "rmptree"
    import matplotlib.pyplot as plt

    out = Path(args.out)
    if args.curve:
        rows = []
        for line in Path(args.curve).read_text().splitlines():
            if line.startswith("#") or not line.strip():
                continue
            it, loss = line.split()
            rows.append((int(it), float(loss)))
        if not rows:
            raise ConfigError(f"{args.curve}: empty learning-curve file")
        arr = np.asarray(rows)
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.semilogy(arr[:, 0], arr[:, 1], lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("minibatch loss")
        fig.tight_layout()
        fig.savefig(out, metadata={"Date": None})
        print(f"wrote {out}")
        return 0

    if not args.traj:
        raise ConfigError("plot needs --traj file(s) or --curve")
    loaded = [serialize.load_trajectory(p) for p in args.traj]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    for traj, env in loaded:
        if env is not None and env.kind == "planar_arm":
            pts = np.stack([env.effector(qk) for qk in traj.q])
        else:
            pts = traj.q
        ax1.plot(pts[:, 0], pts[:, 1], lw=1.2)
        ax1.plot(pts[0, 0], pts[0, 1], "ko", ms=5)
    env = loaded[0][1]
    if env is not None:
        for ob in env.obstacles:
            ax1.add_patch(plt.Circle(ob.center, ob.radius, color="tab:red", alpha=0.35))
        ax1.plot(env.goal[0], env.goal[1], "s", color="tab:orange", ms=9)
    ax1.set_aspect("equal")
    ax1.set_title("trajectory")
    for traj, _ in loaded:
        if np.isfinite(traj.V).all():
            ax2.plot(traj.t, traj.V, lw=1.2)
    ax2.set_xlabel("t [s]")
    ax2.set_ylabel("root energy")
    ax2.set_title("V along rollout")
    fig.tight_layout()
    fig.savefig(out, metadata={"Date": None})
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmptree", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment config (YAML)")
        sp.add_argument("--out", help="output directory (defaults to config 'out')")

    sp = sub.add_parser("gen-data", help="generate train/test datasets with the expert")
    common(sp)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="behavior-clone the expert")
    common(sp)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="batch/online losses, rates, and metrics")
    common(sp)
    sp.add_argument("--model", required=True, help="checkpoint file")
    sp.add_argument("--report", help="report filename (default report.yaml)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("rollout", help="roll out the expert or a trained model")
    common(sp)
    sp.add_argument("--model", help="checkpoint file (default: expert)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--env-index", type=int, default=0)
    sp.add_argument("--traj-index", type=int, default=0)
    sp.add_argument("--dt", type=float)
    sp.add_argument("--method", default="rk4", choices=("euler", "rk4"))
    sp.add_argument("--traj-out", help="trajectory filename (default trajectory.csv)")
    sp.set_defaults(fn=cmd_rollout)

    sp = sub.add_parser("verify", help="run a property suite")
    sp.add_argument("--suite", required=True, choices=verify.SUITES)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--tree", help="tree to verify (path or builtin:NAME)")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("plot", help="render trajectory/curve files to vector graphics")
    sp.add_argument("--traj", nargs="*", help="trajectory csv file(s)")
    sp.add_argument("--curve", help="learning-curve file")
    sp.add_argument("--out", required=True, help="output svg/pdf path")
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("RMPTREE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 2
    except RmpTreeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
