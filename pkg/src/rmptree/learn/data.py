"""Behavior-cloning datasets: (state, aux, expert action) records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericError


@dataclass
class Dataset:
    """Columnar record store; one row per demonstrated state-action pair."""

    q: np.ndarray  # (N, dq)
    qd: np.ndarray  # (N, dq)
    aux: np.ndarray  # (N, da)
    a_expert: np.ndarray  # (N, dq)
    env_id: np.ndarray  # (N,)
    traj_id: np.ndarray  # (N,)
    split: str = "train"

    def __post_init__(self):
        n = self.q.shape[0]
        for name in ("qd", "aux", "a_expert", "env_id", "traj_id"):
            if getattr(self, name).shape[0] != n:
                raise ConfigError(f"dataset column {name!r} has wrong length")
        if self.qd.shape != self.q.shape or self.a_expert.shape != self.q.shape:
            raise ConfigError("dataset q/qd/a_expert columns disagree on dimension")
        if not (
            np.isfinite(self.q).all()
            and np.isfinite(self.qd).all()
            and np.isfinite(self.aux).all()
            and np.isfinite(self.a_expert).all()
        ):
            raise NumericError("dataset contains non-finite entries")

    def __len__(self) -> int:
        return self.q.shape[0]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            q=self.q[idx],
            qd=self.qd[idx],
            aux=self.aux[idx],
            a_expert=self.a_expert[idx],
            env_id=self.env_id[idx],
            traj_id=self.traj_id[idx],
            split=self.split,
        )


def concat_datasets(parts: list[Dataset], split: str) -> Dataset:
    if not parts:
        raise ConfigError("cannot concatenate zero datasets")
    return Dataset(
        q=np.concatenate([p.q for p in parts]),
        qd=np.concatenate([p.qd for p in parts]),
        aux=np.concatenate([p.aux for p in parts]),
        a_expert=np.concatenate([p.a_expert for p in parts]),
        env_id=np.concatenate([p.env_id for p in parts]),
        traj_id=np.concatenate([p.traj_id for p in parts]),
        split=split,
    )
