"""Trajectory storage, M-step transition tuples and running observation stats."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1
SIGMA_FLOOR = 1e-6
OFFLINE = "offline"
ONLINE = "online"


class DatasetError(ValueError):
    pass


@dataclass
class Trajectory:
    """One episode: states s_0..s_T, actions a_0..a_{T-1}, fault context per state."""

    states: np.ndarray  # (T+1, state_dim)
    actions: np.ndarray  # (T, action_dim) or (T+1, action_dim)
    contexts: np.ndarray | None = None  # (T+1, 4)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.actions = np.asarray(self.actions, dtype=float).reshape(-1, self._action_dim())
        if self.contexts is not None:
            self.contexts = np.atleast_2d(np.asarray(self.contexts, dtype=float))
            if len(self.contexts) != len(self.states):
                raise DatasetError("need one context row per state")
        n_s, n_a = len(self.states), len(self.actions)
        if n_a not in (n_s, n_s - 1):
            raise DatasetError(f"{n_a} actions for {n_s} states")

    def _action_dim(self) -> int:
        a = np.asarray(self.actions)
        return a.shape[-1] if a.ndim > 1 else 1

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class MultiStepDataset:
    """Stacked M-step tuples.

    ``states[k]`` holds s_t..s_{t+M}, ``actions[k]`` a_t..a_{t+M-1} and
    ``contexts[k]`` the fault context at s_t.  ``episode`` and ``start`` record
    where each tuple came from so whole episodes can be reassembled.
    """

    states: np.ndarray  # (K, M+1, sd)
    actions: np.ndarray  # (K, M, ad)
    contexts: np.ndarray  # (K, 4)
    provenance: np.ndarray  # (K,) of str
    episode: np.ndarray = None  # (K,) int
    start: np.ndarray = None  # (K,) int

    def __post_init__(self):
        K = len(self.states)
        if self.episode is None:
            self.episode = np.full(K, -1, dtype=int)
        if self.start is None:
            self.start = np.full(K, -1, dtype=int)
        self.provenance = np.asarray(self.provenance, dtype=object)
        if self.states.ndim != 3 or self.actions.ndim != 3:
            raise DatasetError("states and actions must be (K, steps, dim) arrays")
        if self.actions.shape[1] != self.states.shape[1] - 1:
            raise DatasetError("every tuple needs exactly M+1 states and M actions")
        if self.horizon < 1:
            raise DatasetError("horizon M must be at least 1")
        lengths = {len(self.actions), len(self.contexts), len(self.provenance), len(self.episode), len(self.start)}
        if lengths != {K}:
            raise DatasetError("inconsistent tuple counts")

    @property
    def horizon(self) -> int:
        return self.states.shape[1] - 1

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[2]

    def __len__(self) -> int:
        return len(self.states)

    def subset(self, idx) -> "MultiStepDataset":
        idx = np.asarray(idx, dtype=int)
        return MultiStepDataset(
            self.states[idx], self.actions[idx], self.contexts[idx],
            self.provenance[idx], self.episode[idx], self.start[idx],
        )

    @classmethod
    def empty(cls, horizon: int, state_dim: int, action_dim: int, n_ctx: int = 4) -> "MultiStepDataset":
        return cls(
            np.zeros((0, horizon + 1, state_dim)), np.zeros((0, horizon, action_dim)),
            np.zeros((0, n_ctx)), np.zeros(0, dtype=object),
            np.zeros(0, dtype=int), np.zeros(0, dtype=int),
        )

    def episodes(self) -> list[Trajectory]:
        """Reassemble the source episodes from stride-1 tuples."""
        out = []
        for ep in np.unique(self.episode):
            if ep < 0:
                raise DatasetError("tuples carry no episode ids")
            rows = np.flatnonzero(self.episode == ep)
            rows = rows[np.argsort(self.start[rows], kind="stable")]
            starts = self.start[rows]
            if np.any(np.diff(starts) != 1) or starts[0] != 0:
                raise DatasetError(f"episode {ep} is not a contiguous stride-1 run")
            M = self.horizon
            states = np.concatenate([self.states[rows, 0], self.states[rows[-1], 1:]])
            actions = np.concatenate([self.actions[rows, 0], self.actions[rows[-1], 1:]])
            ctx0 = self.contexts[rows]
            # later contexts only differ in the time-since-fault column
            dt = ctx0[1, 3] - ctx0[0, 3] if len(ctx0) > 1 else 0.0
            tail = np.repeat(ctx0[-1:], M, axis=0)
            tail[:, 3] = ctx0[-1, 3] + dt * np.arange(1, M + 1)
            out.append(Trajectory(states, actions, np.concatenate([ctx0, tail])))
        return out


def make_multistep(traj: Trajectory, M: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray | None]]:
    if M < 1:
        raise DatasetError("horizon M must be at least 1")
    n = len(traj) - M
    if n <= 0:
        return []
    ctx = traj.contexts
    return [
        (traj.states[t : t + M + 1], traj.actions[t : t + M], None if ctx is None else ctx[t])
        for t in range(n)
    ]


def build_dataset(
    trajectories: Sequence[Trajectory], M: int, provenance: str, first_episode: int = 0
) -> MultiStepDataset:
    """Stack the M-step tuples of many episodes into one dataset."""
    S, A, C, E, T = [], [], [], [], []
    for i, traj in enumerate(trajectories):
        n = len(traj) - M
        if n <= 0:
            continue
        idx = np.arange(n)[:, None] + np.arange(M + 1)[None, :]
        S.append(traj.states[idx])
        A.append(traj.actions[idx[:, :M]])
        ctx = traj.contexts if traj.contexts is not None else np.zeros((len(traj), 4))
        C.append(ctx[:n])
        E.append(np.full(n, first_episode + i))
        T.append(np.arange(n))
    if not S:
        sd = trajectories[0].states.shape[1] if trajectories else 0
        ad = trajectories[0].actions.shape[1] if trajectories else 0
        return MultiStepDataset.empty(M, sd, ad)
    K = sum(len(s) for s in S)
    return MultiStepDataset(
        np.concatenate(S), np.concatenate(A), np.concatenate(C),
        np.full(K, provenance, dtype=object), np.concatenate(E), np.concatenate(T),
    )


def concat(parts: Sequence[MultiStepDataset]) -> MultiStepDataset:
    parts = [p for p in parts if len(p)]
    if not parts:
        raise DatasetError("nothing to concatenate")
    dims = {(p.horizon, p.state_dim, p.action_dim) for p in parts}
    if len(dims) != 1:
        raise DatasetError(f"incompatible datasets: {dims}")
    return MultiStepDataset(
        np.concatenate([p.states for p in parts]),
        np.concatenate([p.actions for p in parts]),
        np.concatenate([p.contexts for p in parts]),
        np.concatenate([p.provenance for p in parts]),
        np.concatenate([p.episode for p in parts]),
        np.concatenate([p.start for p in parts]),
    )


def mix(
    online: MultiStepDataset, offline: MultiStepDataset, offline_frac: float, seed: int
) -> MultiStepDataset:
    """All online tuples plus a seeded random ``offline_frac`` of the offline ones, shuffled."""
    if not 0.0 <= offline_frac <= 1.0:
        raise DatasetError("offline_frac must lie in [0, 1]")
    if len(online) and len(offline) and online.state_dim != offline.state_dim:
        raise DatasetError("online and offline state dimensions differ")
    rng = np.random.default_rng(seed)
    n_off = int(round(offline_frac * len(offline)))
    picked = offline.subset(np.sort(rng.choice(len(offline), size=n_off, replace=False)))
    combined = concat([online, picked]) if len(online) or n_off else online
    return combined.subset(rng.permutation(len(combined)))


# -- persistence -----------------------------------------------------------


def save_jsonl(ds: MultiStepDataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "schema": "mbpars.multistep",
            "version": SCHEMA_VERSION,
            "horizon": ds.horizon,
            "state_dim": ds.state_dim,
            "action_dim": ds.action_dim,
            "count": len(ds),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for k in range(len(ds)):
            row = {
                "states": ds.states[k].tolist(),
                "actions": ds.actions[k].tolist(),
                "context": ds.contexts[k].tolist(),
                "provenance": str(ds.provenance[k]),
                "episode": int(ds.episode[k]),
                "start": int(ds.start[k]),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_jsonl(path) -> MultiStepDataset:
    with Path(path).open(encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != "mbpars.multistep":
            raise DatasetError(f"{path} is not a multistep dataset")
        if header.get("version") != SCHEMA_VERSION:
            raise DatasetError(f"unsupported dataset version {header.get('version')}")
        rows = [json.loads(line) for line in fh if line.strip()]
    M, sd, ad = header["horizon"], header["state_dim"], header["action_dim"]
    if not rows:
        return MultiStepDataset.empty(M, sd, ad)
    return MultiStepDataset(
        np.array([r["states"] for r in rows], dtype=float).reshape(-1, M + 1, sd),
        np.array([r["actions"] for r in rows], dtype=float).reshape(-1, M, ad),
        np.array([r["context"] for r in rows], dtype=float),
        np.array([r["provenance"] for r in rows], dtype=object),
        np.array([r["episode"] for r in rows], dtype=int),
        np.array([r["start"] for r in rows], dtype=int),
    )


def save_csv(ds: MultiStepDataset, path) -> None:
    """Flat export: one row per tuple with the first transition spelled out."""
    sd, ad = ds.state_dim, ds.action_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["episode", "start", "provenance"]
            + [f"s{i}" for i in range(sd)]
            + [f"a{j}" for j in range(ad)]
            + [f"ctx{c}" for c in range(ds.contexts.shape[1])]
            + [f"next_s{i}" for i in range(sd)]
        )
        for k in range(len(ds)):
            w.writerow(
                [int(ds.episode[k]), int(ds.start[k]), ds.provenance[k]]
                + [repr(float(x)) for x in ds.states[k, 0]]
                + [repr(float(x)) for x in ds.actions[k, 0]]
                + [repr(float(x)) for x in ds.contexts[k]]
                + [repr(float(x)) for x in ds.states[k, 1]]
            )


# -- running observation statistics ---------------------------------------


@dataclass
class RunningStats:
    """Streaming mean / population variance (Welford, Chan et al. merge)."""

    dim: int
    count: int = 0
    mean: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)
    floor: float = SIGMA_FLOOR

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    def copy(self) -> "RunningStats":
        return RunningStats(self.dim, self.count, self.mean.copy(), self.m2.copy(), self.floor)

    @property
    def var(self) -> np.ndarray:
        if self.count == 0:
            return np.ones(self.dim)
        return self.m2 / self.count

    @property
    def std(self) -> np.ndarray:
        if self.count == 0:
            return np.ones(self.dim)
        return np.maximum(np.sqrt(self.var), self.floor)

    def push(self, obs) -> None:
        """Single-observation Welford update (in place)."""
        x = np.asarray(obs, dtype=float)
        if x.shape != (self.dim,):
            raise DatasetError(f"observation shape {x.shape} != ({self.dim},)")
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    def merge(self, other: "RunningStats") -> "RunningStats":
        """Pairwise combination of two partial statistics (returns a new object)."""
        if other.dim != self.dim:
            raise DatasetError("cannot merge statistics of different dimension")
        if other.count == 0:
            return self.copy()
        if self.count == 0:
            return other.copy()
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        return RunningStats(self.dim, n, mean, m2, self.floor)

    @classmethod
    def from_batch(cls, obs, floor: float = SIGMA_FLOOR) -> "RunningStats":
        """Two-pass statistics of a block of observations (rows)."""
        x = np.asarray(obs, dtype=float)
        x = x.reshape(-1, x.shape[-1])
        if len(x) == 0:
            return cls(x.shape[-1], floor=floor)
        mean = x.mean(axis=0)
        m2 = ((x - mean) ** 2).sum(axis=0)
        return cls(x.shape[1], len(x), mean, m2, floor)

    def normalize(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=float) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"dim": self.dim, "count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunningStats":
        return cls(d["dim"], d["count"], np.array(d["mean"], dtype=float), np.array(d["m2"], dtype=float))


def stats_update(stats: RunningStats, obs) -> RunningStats:
    out = stats.copy()
    out.push(obs)
    return out


def normalize(stats: RunningStats, obs) -> np.ndarray:
    return stats.normalize(obs)


def reduce_stats(parts: Iterable[RunningStats], dim: int) -> RunningStats:
    """Deterministic pairwise tree reduction in the given order."""
    level = list(parts)
    if not level:
        return RunningStats(dim)
    while len(level) > 1:
        nxt = [level[i].merge(level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]
