"""Rule-based under-voltage load shedding, noisy offline data and behaviour cloning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import OFFLINE, MultiStepDataset, RunningStats, build_dataset
from .gridsim import ACTION_HIGH, ACTION_LOW, GridModel, Task
from .neuralnet import BCLoss, RecurrentPolicyNet, train
from .pars import GroundTruth, RolloutBatch, rollout_batch
from .reward import RewardParams

_TOL = 1e-9


@dataclass(frozen=True)
class UvlsRule:
    trigger: float = 0.90
    dwell: float = 0.33
    shed_step: float = 0.05
    dt: float = 0.1

    def __post_init__(self):
        if not 0 < self.shed_step <= -ACTION_LOW:
            raise ValueError("shed step must lie in (0, 0.2]")
        if self.dwell < self.dt - _TOL:
            raise ValueError("dwell must cover at least one control step")


def uvls_action(rule: UvlsRule, voltages, counters) -> tuple[np.ndarray, np.ndarray]:
    """Shed ``shed_step`` on every bus whose voltage stayed below the trigger for the dwell time.

    ``voltages`` are the controlled-bus voltages, ``counters`` the number of
    consecutive steps each has spent below the trigger.  Works on single
    episodes or batches.
    """
    v = np.asarray(voltages, dtype=float)
    below = v < rule.trigger
    counters = np.where(below, np.asarray(counters) + 1, 0)
    fire = counters * rule.dt >= rule.dwell - _TOL
    return np.where(fire, -rule.shed_step, 0.0), counters


class UvlsController:
    """Batched UVLS with optional clipped Gaussian action noise."""

    def __init__(self, rule: UvlsRule, grid: GridModel, noise_std: float = 0.0, rng=None):
        if noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        self.rule = rule
        self.idx = list(grid.controlled)
        self.noise_std = noise_std
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.counters = None

    def reset(self, B: int) -> None:
        self.counters = np.zeros((B, len(self.idx)), dtype=int)

    def act(self, obs: np.ndarray) -> np.ndarray:
        a, self.counters = uvls_action(self.rule, obs[:, self.idx], self.counters)
        if self.noise_std > 0:
            a = np.clip(a + self.rng.normal(0.0, self.noise_std, a.shape), ACTION_LOW, ACTION_HIGH)
        return a


def run_uvls(grid: GridModel, tasks: Sequence[Task], rule: UvlsRule = UvlsRule(), noise_std: float = 0.0,
             seed: int = 0, reward_params: RewardParams = RewardParams()) -> RolloutBatch:
    ctrl = UvlsController(rule, grid, noise_std, np.random.default_rng(seed))
    return rollout_batch(GroundTruth(grid), list(tasks), ctrl, reward_params, collect=True)


def generate_offline(
    grid: GridModel,
    tasks: Sequence[Task],
    episodes_per_task: int = 20,
    noise_std: float = 0.03,
    M: int = 5,
    seed: int = 0,
    rule: UvlsRule = UvlsRule(),
) -> MultiStepDataset:
    """Noisy UVLS episodes on the ground truth, cut into M-step tuples."""
    episodes = [t for t in tasks for _ in range(episodes_per_task)]
    res = run_uvls(grid, episodes, rule, noise_std, seed)
    return build_dataset(res.trajectories(), M, OFFLINE)


def offline_samples(ds: MultiStepDataset) -> int:
    """Ground-truth control steps behind a dataset of stride-1 episodes."""
    return int(sum(len(tr.actions) for tr in ds.episodes()))


def bc_sequences(ds: MultiStepDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-episode observation and action sequences, (E, T, obs_dim) and (E, T, n_controlled)."""
    xs, ys = [], []
    for tr in ds.episodes():
        T = len(tr.actions)
        xs.append(np.concatenate([tr.states[:T], tr.contexts[:T]], axis=1))
        ys.append(tr.actions[:T])
    if len({len(x) for x in xs}) != 1:
        raise ValueError("behaviour cloning expects equal-length episodes")
    return np.stack(xs), np.stack(ys)


def observation_stats(ds: MultiStepDataset) -> RunningStats:
    xs, _ = bc_sequences(ds)
    return RunningStats.from_batch(xs.reshape(-1, xs.shape[-1]))


def imitate(
    policy_net: RecurrentPolicyNet,
    offline: MultiStepDataset,
    epochs: int,
    seed: int,
    stats: RunningStats | None = None,
    lr: float = 3e-3,
    batch_size: int = 16,
    optimizer: str = "adam",
    truncation: int = 20,
):
    """Behaviour cloning of the recorded actions through the recurrent policy.

    Observations are normalised with ``stats`` (identity when None) so that
    the cloned weights act on the same inputs the policy sees during search.
    Returns the trained network and its loss history.
    """
    xs, ys = bc_sequences(offline)
    if stats is not None:
        xs = stats.normalize(xs)
    mask = np.ones(xs.shape[:2])
    return train(policy_net, (xs, ys, mask), epochs, batch_size, lr, seed, BCLoss(truncation), optimizer=optimizer)


def constant_schedule_search(
    grid: GridModel,
    task: Task,
    fractions: Sequence[float] = tuple(np.round(np.arange(0.01, 0.201, 0.01), 2)),
    max_steps: int = 40,
) -> tuple[float, float, int] | None:
    """Cheapest passing schedule that sheds a constant fraction on every controlled bus
    for ``n`` steps right after fault clearance.

    Returns (total shed p.u., fraction, n) or None if nothing passes.
    """
    k0 = int(np.ceil(task.t_pf / grid.dt - 1e-6))
    combos = [(f, n) for f in fractions for n in range(1, max_steps + 1)]
    acts = np.zeros((len(combos), grid.n_steps, grid.n_controlled))
    for i, (f, n) in enumerate(combos):
        acts[i, k0 : k0 + n] = -f

    class _Replay:
        def reset(self, B):
            self.k = 0

        def act(self, obs):
            a = acts[:, self.k]
            self.k += 1
            return a

    res = rollout_batch(GroundTruth(grid), [task] * len(combos), _Replay())
    ok = np.flatnonzero(res.passed)
    if len(ok) == 0:
        return None
    best = ok[np.argmin(res.shed_total[ok])]
    f, n = combos[best]
    return float(res.shed_total[best]), float(f), int(n)


def uvls_shed(grid: GridModel, tasks: Sequence[Task], rule: UvlsRule = UvlsRule()) -> tuple[np.ndarray, np.ndarray]:
    res = run_uvls(grid, tasks, rule)
    return res.shed_total, res.passed

