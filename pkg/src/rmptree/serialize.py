"""Human-readable serialization: trees, checkpoints, datasets, trajectories.

Trees and experiment configs are YAML documents with an explicit schema
version; datasets are line-delimited JSON records; trajectories are
tabular text.  Floats round-trip exactly (shortest-repr decimal), so
reloading a checkpoint reproduces training bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import yaml

from . import gds, taskmaps, weights
from .errors import ConfigError
from .learn.data import Dataset
from .learn.training import OptState
from .sim import Environment, Trajectory
from .taskmaps import AuxRef, TaskMap
from .tree import TreeSpec, make_tree
from .weights import CoordGate, MlpArch, RadialGate, WeightFn

SCHEMA_VERSION = 1


def _floats(arr) -> list:
    return np.asarray(arr, dtype=float).tolist()


# -- aux-or-literal values -------------------------------------------------------


def _dump_value(v):
    if isinstance(v, AuxRef):
        out = {"aux": v.offset}
        if v.length != 1:
            out["len"] = v.length
        return out
    if isinstance(v, np.ndarray):
        return _floats(v)
    return float(v)


def _load_value(d, vector: bool):
    if isinstance(d, dict):
        return AuxRef(offset=int(d["aux"]), length=int(d.get("len", 1)))
    if vector:
        return np.asarray(d, dtype=float)
    return float(d)


# -- task maps -------------------------------------------------------------------


def map_to_dict(m: TaskMap) -> dict:
    if isinstance(m, taskmaps.IdentityMap):
        return {"kind": "identity", "dim": m.dim}
    if isinstance(m, taskmaps.GoalOffsetMap):
        return {"kind": "goal_offset", "goal": _dump_value(m.goal)}
    if isinstance(m, taskmaps.AffineMap):
        return {"kind": "affine", "A": _floats(m.A), "b": _floats(m.b)}
    if isinstance(m, taskmaps.DistanceMap):
        return {
            "kind": "distance_to_point",
            "center": _dump_value(m.center),
            "radius": _dump_value(m.radius),
        }
    if isinstance(m, taskmaps.JointLimitMap):
        return {
            "kind": "joint_limit_1d",
            "dim": m.dim,
            "joint": m.joint,
            "limit": m.limit,
            "side": m.side,
        }
    if isinstance(m, taskmaps.PlanarFkMap):
        return {
            "kind": "planar_fk",
            "lengths": _floats(m.lengths),
            "link": m.link,
            "fraction": m.fraction,
        }
    if isinstance(m, taskmaps.ComposedMap):
        return {"kind": "compose", "outer": map_to_dict(m.outer), "inner": map_to_dict(m.inner)}
    raise ConfigError(f"cannot serialize map kind {type(m).__name__}")


def map_from_dict(d: dict) -> TaskMap:
    kind = d["kind"]
    if kind == "identity":
        return taskmaps.identity(int(d["dim"]))
    if kind == "goal_offset":
        return taskmaps.goal_offset(_load_value(d["goal"], vector=True))
    if kind == "affine":
        return taskmaps.affine(np.asarray(d["A"], float), np.asarray(d["b"], float))
    if kind == "distance_to_point":
        return taskmaps.distance_to_point(
            _load_value(d["center"], vector=True), _load_value(d["radius"], vector=False)
        )
    if kind == "joint_limit_1d":
        return taskmaps.joint_limit_1d(int(d["dim"]), int(d["joint"]), float(d["limit"]), d["side"])
    if kind == "planar_fk":
        return taskmaps.planar_fk(
            np.asarray(d["lengths"], float), int(d["link"]), float(d["fraction"])
        )
    if kind == "compose":
        return taskmaps.compose(map_from_dict(d["outer"]), map_from_dict(d["inner"]))
    raise ConfigError(f"unknown map kind {kind!r}")


# -- weight functions -------------------------------------------------------------


def weight_to_dict(w: WeightFn) -> dict:
    if w.kind == "constant":
        return {"kind": "constant", "value": w.value}
    if w.kind == "analytic":
        form = w.form
        if isinstance(form, RadialGate):
            out = {
                "kind": "analytic",
                "form": "radial_gate",
                "base": form.base,
                "amp": form.amp,
                "offset": form.offset,
                "length_scale": form.length_scale,
                "point": _dump_value(form.point),
            }
            if form.radius is not None:
                out["radius"] = _dump_value(form.radius)
            return out
        if isinstance(form, CoordGate):
            return {
                "kind": "analytic",
                "form": "coord_gate",
                "base": form.base,
                "amp": form.amp,
                "threshold": form.threshold,
                "length_scale": form.length_scale,
                "index": form.index,
            }
        raise ConfigError(f"cannot serialize analytic form {type(form).__name__}")
    if w.kind == "mlp":
        out = {"kind": "mlp", "hidden": list(w.arch.hidden), "activation": w.arch.activation}
        if w.share is not None:
            out["share"] = w.share
        return out
    raise ConfigError(f"cannot serialize weight kind {w.kind!r}")


def weight_from_dict(d: dict, in_dim: int) -> WeightFn:
    kind = d["kind"]
    if kind == "constant":
        return weights.constant_weight(float(d["value"]), in_dim=0)
    if kind == "analytic":
        if d["form"] == "radial_gate":
            form = RadialGate(
                base=float(d["base"]),
                amp=float(d["amp"]),
                offset=float(d["offset"]),
                length_scale=float(d["length_scale"]),
                point=_load_value(d["point"], vector=True),
                radius=_load_value(d["radius"], vector=False) if "radius" in d else None,
            )
        elif d["form"] == "coord_gate":
            form = CoordGate(
                base=float(d["base"]),
                amp=float(d["amp"]),
                threshold=float(d["threshold"]),
                length_scale=float(d["length_scale"]),
                index=int(d["index"]),
            )
        else:
            raise ConfigError(f"unknown analytic form {d['form']!r}")
        return weights.analytic_weight(form, in_dim=in_dim)
    if kind == "mlp":
        return weights.mlp_weight(
            in_dim, d["hidden"], d.get("activation", "tanh"), share=d.get("share")
        )
    raise ConfigError(f"unknown weight kind {kind!r}")


# -- leaves -----------------------------------------------------------------------


def leaf_to_dict(spec: gds.GdsSpec) -> dict:
    return {"kind": spec.leaf_kind, "dim": spec.dim, "gains": spec.gains()}


def leaf_from_dict(d: dict) -> gds.GdsSpec:
    kind = d["kind"]
    gains = dict(d.get("gains", {}))
    if kind == "attractor":
        return gds.attractor_leaf(int(d["dim"]), gains)
    if kind == "obstacle":
        return gds.obstacle_leaf(gains)
    if kind == "jointlimit":
        return gds.jointlimit_leaf(gains)
    if kind == "damper":
        return gds.damper_leaf(int(d["dim"]), gains["b"], gains.get("epsilon", gds.METRIC_FLOOR))
    if kind == "identity_metric":
        return gds.identity_metric_leaf(int(d["dim"]), gains["eps"])
    raise ConfigError(f"unknown leaf kind {kind!r}")


# -- trees ------------------------------------------------------------------------


def tree_to_dict(tree: TreeSpec) -> dict:
    edges = []
    for node in tree.order:
        for child in tree.children.get(node, ()):
            e = tree.edges[child]
            edges.append(
                {
                    "parent": node,
                    "child": child,
                    "map": map_to_dict(e.map),
                    "weight": weight_to_dict(e.weight),
                }
            )
    return {
        "schema": SCHEMA_VERSION,
        "kind": "tree",
        "root": tree.root,
        "root_dim": tree.root_dim,
        "aux_dim": tree.aux_dim,
        "edges": edges,
        "leaves": {leaf: leaf_to_dict(spec) for leaf, spec in sorted(tree.leaves.items())},
    }


def tree_from_dict(d: dict) -> TreeSpec:
    if d.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported tree schema {d.get('schema')!r}")
    aux_dim = int(d["aux_dim"])
    dims = {d["root"]: int(d["root_dim"])}
    rows = []
    for e in d["edges"]:
        parent = e["parent"]
        if parent not in dims:
            raise ConfigError(f"edge parent {parent!r} appears before its own edge")
        m = map_from_dict(e["map"])
        dims[e["child"]] = m.out_dim
        w = weight_from_dict(e["weight"], in_dim=dims[parent] + aux_dim)
        rows.append((parent, e["child"], m, w))
    leaves = {name: leaf_from_dict(spec) for name, spec in d["leaves"].items()}
    return make_tree(d["root"], int(d["root_dim"]), aux_dim, rows, leaves)


def save_tree(tree: TreeSpec, path) -> None:
    Path(path).write_text(yaml.safe_dump(tree_to_dict(tree), sort_keys=False))


def load_tree(path) -> TreeSpec:
    return tree_from_dict(yaml.safe_load(Path(path).read_text()))


def tree_hash(tree: TreeSpec) -> str:
    payload = json.dumps(tree_to_dict(tree), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(
    path, tree_or_policy_hash: str, params: np.ndarray, opt: OptState | None = None,
    iteration: int = 0, extra: dict | None = None,
) -> None:
    doc = {
        "schema": SCHEMA_VERSION,
        "kind": "checkpoint",
        "tree_hash": tree_or_policy_hash,
        "iteration": iteration,
        "params": _floats(params),
    }
    if opt is not None:
        doc["opt"] = {
            "kind": opt.kind,
            "v": _floats(opt.v),
            "m": _floats(opt.m) if opt.m is not None else None,
            "t": opt.t,
        }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != SCHEMA_VERSION or doc.get("kind") != "checkpoint":
        raise ConfigError(f"{path}: not a checkpoint file")
    doc["params"] = np.asarray(doc["params"], dtype=float)
    if doc.get("opt"):
        o = doc["opt"]
        doc["opt"] = OptState(
            kind=o["kind"],
            params=doc["params"].copy(),
            v=np.asarray(o["v"], dtype=float),
            m=np.asarray(o["m"], dtype=float) if o.get("m") is not None else None,
            t=int(o["t"]),
        )
    return doc


# -- datasets ------------------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        for r in range(len(ds)):
            fh.write(
                json.dumps(
                    {
                        "q": _floats(ds.q[r]),
                        "qd": _floats(ds.qd[r]),
                        "aux": _floats(ds.aux[r]),
                        "a": _floats(ds.a_expert[r]),
                        "env": int(ds.env_id[r]),
                        "traj": int(ds.traj_id[r]),
                    }
                )
            )
            fh.write("\n")


def load_dataset(path, split: str = "train") -> Dataset:
    q, qd, aux, a, env, traj = [], [], [], [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            q.append(rec["q"])
            qd.append(rec["qd"])
            aux.append(rec["aux"])
            a.append(rec["a"])
            env.append(rec["env"])
            traj.append(rec["traj"])
    if not q:
        raise ConfigError(f"{path}: empty dataset file")
    return Dataset(
        q=np.asarray(q, float),
        qd=np.asarray(qd, float),
        aux=np.asarray(aux, float),
        a_expert=np.asarray(a, float),
        env_id=np.asarray(env, int),
        traj_id=np.asarray(traj, int),
        split=split,
    )


# -- trajectories -----------------------------------------------------------------------


def save_trajectory(traj: Trajectory, path, env: Environment | None = None) -> None:
    d = traj.q.shape[1]
    cols = (
        ["t"]
        + [f"q{i}" for i in range(d)]
        + [f"qd{i}" for i in range(d)]
        + [f"a{i}" for i in range(d)]
        + ["V"]
    )
    with open(path, "w") as fh:
        fh.write(f"# dt={traj.dt!r}\n")
        if env is not None:
            fh.write(f"# kind={env.kind}\n")
            fh.write("# aux=" + ",".join(repr(float(v)) for v in env.aux()) + "\n")
            lo, hi = env.bounds
            fh.write("# bounds=" + ",".join(repr(float(v)) for v in [*lo, *hi]) + "\n")
            if env.link_lengths is not None:
                fh.write("# links=" + ",".join(repr(float(v)) for v in env.link_lengths) + "\n")
        fh.write(f"# collision={int(traj.collision)} collision_time={traj.collision_time!r}\n")
        fh.write(f"# goal_reached={int(traj.goal_reached)} goal_time={traj.goal_time!r}\n")
        fh.write(f"# timed_out={int(traj.timed_out)}\n")
        fh.write(",".join(cols) + "\n")
        for k in range(traj.t.shape[0]):
            row = [traj.t[k], *traj.q[k], *traj.qd[k], *traj.a[k], traj.V[k]]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_trajectory(path) -> tuple[Trajectory, Environment | None]:
    meta: dict[str, str] = {}
    rows = []
    header = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if "=" in token:
                        k, v = token.split("=", 1)
                        meta[k] = v
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append([float(x) for x in line.split(",")])
    if header is None or not rows:
        raise ConfigError(f"{path}: empty trajectory file")
    arr = np.asarray(rows, float)
    d = (arr.shape[1] - 2) // 3

    def _opt(key):
        v = meta.get(key, "None")
        return None if v == "None" else float(v)

    env = None
    if "aux" in meta and "kind" in meta:
        aux = np.asarray([float(v) for v in meta["aux"].split(",")])
        if "bounds" in meta:
            b = np.asarray([float(v) for v in meta["bounds"].split(",")])
            bounds = (b[: b.shape[0] // 2], b[b.shape[0] // 2 :])
        else:
            bounds = (aux.min() * np.ones(2) - 1.0, aux.max() * np.ones(2) + 1.0)
        links = None
        if "links" in meta:
            links = np.asarray([float(v) for v in meta["links"].split(",")])
        env = Environment.from_aux(meta["kind"], aux, bounds=bounds, link_lengths=links)
    traj = Trajectory(
        dt=float(meta.get("dt", "0.01")),
        t=arr[:, 0],
        q=arr[:, 1 : 1 + d],
        qd=arr[:, 1 + d : 1 + 2 * d],
        a=arr[:, 1 + 2 * d : 1 + 3 * d],
        V=arr[:, 1 + 3 * d],
        collision=meta.get("collision") == "1",
        collision_time=_opt("collision_time"),
        goal_reached=meta.get("goal_reached") == "1",
        goal_time=_opt("goal_time"),
        timed_out=meta.get("timed_out") == "1",
    )
    return traj, env


# -- configs --------------------------------------------------------------------------


def load_config(path) -> dict:
    doc = yaml.safe_load(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    if doc.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported config schema {doc.get('schema')!r}")
    return doc


def config_digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]
