"""Parallel augmented random search over a recurrent load-shedding policy.

Each iteration samples N standard-normal directions in parameter space,
evaluates ``theta +/- nu * delta`` with batched rollouts on the active
backend (the learned surrogate or the ground-truth grid), keeps the b best
directions ranked by ``max(r+, r-)`` and moves ``theta`` along the reward
differences scaled by their spread.

Rollouts are grouped into fixed chunks of directions.  The chunk layout does
not depend on the number of worker processes, and chunk results (rewards and
observation statistics) are reduced in chunk order, so a run is bit-for-bit
identical whether it uses one worker or many.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gridsim
from .datasets import ONLINE, MultiStepDataset, RunningStats, Trajectory, build_dataset, concat, reduce_stats
from .gridsim import GridModel, Task, TaskArrays
from .neuralnet import BatchedPolicy, RecurrentPolicyNet, TrainingDiverged, flatten
from .reward import RewardParams, shed_amounts, step_reward
from .surrogate import SurrogateModel, retrain, validation_loss

log = logging.getLogger(__name__)

SIGMA_B_FLOOR = 1e-8
REPORT_COLUMNS = (
    "iteration", "wall_seconds", "mean_eval_reward", "ground_truth_samples",
    "alpha", "nu", "surrogate_val_loss",
)


@dataclass
class ParsConfig:
    N: int = 16
    b: int = 8
    m: int = 2
    # desk-scale step size and exploration noise, shared by every configuration
    alpha: float = 0.02
    nu: float = 0.05
    epsilon: float = 0.9999
    H: int = 150
    p_tasks: int = 3
    UF: int = 5
    gamma: float = 1.0
    seed: int = 0
    hidden: int = 32
    chunk_size: int = 4
    workers: int = 1
    retrain_epochs: int = 2
    online_cap: int = 0
    checkpoint_every: int = 25
    patience: int = 0

    def __post_init__(self):
        if not 1 <= self.b <= self.N:
            raise ValueError("need 1 <= b <= N")
        if self.m < 1 or self.p_tasks < 1:
            raise ValueError("m and p_tasks must be at least 1")
        if self.alpha <= 0 or self.nu <= 0:
            raise ValueError("alpha and nu must be positive")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.H < 0 or self.UF < 1 or self.chunk_size < 1 or self.workers < 1:
            raise ValueError("H >= 0, UF >= 1, chunk_size >= 1 and workers >= 1 required")

    @classmethod
    def table_defaults(cls, use_imitation: bool, **overrides) -> "ParsConfig":
        """Step size, noise and decay as tabulated for large-grid runs with and without a warm start."""
        base = dict(alpha=0.05, nu=0.1, epsilon=0.9999) if use_imitation else dict(alpha=1.0, nu=2.0, epsilon=0.9985)
        base.update(overrides)
        return cls(**base)


# -- rollout backends ----------------------------------------------------------


@dataclass
class BatchState:
    k: int
    V: np.ndarray  # (B, n_buses)
    P: np.ndarray  # (B, n_controlled)
    s_stall: np.ndarray | None
    tasks: TaskArrays


class GroundTruth:
    """The synthetic grid; counts every simulated control step."""

    kind = "ground_truth"

    def __init__(self, grid: GridModel):
        self.grid = grid
        self.samples = 0

    def reset(self, tasks: Sequence[Task]) -> BatchState:
        ta = TaskArrays.from_tasks(self.grid, tasks)
        B = len(tasks)
        return BatchState(
            0, gridsim.initial_voltage(self.grid, ta), np.ones((B, self.grid.n_controlled)),
            np.zeros((B, self.grid.n_buses)), ta,
        )

    def step(self, st: BatchState, action: np.ndarray, p_eps: float = 1e-3) -> BatchState:
        P = gridsim.apply_shedding(st.P, action, p_eps)
        V, s = gridsim.advance(self.grid, st.k, st.s_stall, P, st.tasks)
        self.samples += len(P)
        return BatchState(st.k + 1, V, P, s, st.tasks)


class Surrogate:
    """Rollouts on the learned model; predicted states are clipped to physical bounds."""

    kind = "surrogate"

    def __init__(self, grid: GridModel, model: SurrogateModel):
        if model.n_voltage != grid.n_buses or model.n_controlled != grid.n_controlled:
            raise ValueError("surrogate does not match the grid layout")
        self.grid = grid
        self.model = model
        self.samples = 0

    def reset(self, tasks: Sequence[Task]) -> BatchState:
        ta = TaskArrays.from_tasks(self.grid, tasks)
        B = len(tasks)
        V = gridsim.initial_voltage(self.grid, ta)
        return BatchState(0, V, np.ones((B, self.grid.n_controlled)), None, ta)

    def step(self, st: BatchState, action: np.ndarray, p_eps: float = 1e-3) -> BatchState:
        s = np.concatenate([st.V, st.P], axis=1)
        ctx = gridsim.fault_context(self.grid, st.tasks, st.k)
        nxt = self.model.next_state(s, action, ctx)
        n = self.grid.n_buses
        return BatchState(st.k + 1, nxt[:, :n], nxt[:, n:], None, st.tasks)


def make_backend(kind: str, grid: GridModel, model: SurrogateModel | None = None):
    if kind == GroundTruth.kind:
        return GroundTruth(grid)
    if kind == Surrogate.kind:
        if model is None:
            raise ValueError("surrogate backend needs a model")
        return Surrogate(grid, model)
    raise ValueError(f"unknown backend {kind!r}")


# -- controllers -----------------------------------------------------------------


class PolicyController:
    """Runs one parameter vector per episode on normalised observations."""

    def __init__(self, template: RecurrentPolicyNet, flat_params: np.ndarray, stats: RunningStats):
        self.policy = BatchedPolicy(template, flat_params)
        self.stats = stats

    def reset(self, B: int) -> None:
        if B != self.policy.B:
            raise ValueError(f"controller holds {self.policy.B} policies, episode batch is {B}")
        self.policy.reset()

    def act(self, obs: np.ndarray) -> np.ndarray:
        return self.policy.step(self.stats.normalize(obs))


@dataclass
class RolloutBatch:
    returns: np.ndarray  # (B,)
    shed_total: np.ndarray  # (B,)
    observations: np.ndarray  # (B, T, obs_dim) as fed to the controller
    v_recovery: np.ndarray  # (B,) min voltage at fault clearance + 4 s
    samples: int
    states: np.ndarray | None = None  # (B, T+1, state_dim)
    actions: np.ndarray | None = None  # (B, T, n_controlled)
    contexts: np.ndarray | None = None  # (B, T+1, 4)

    @property
    def passed(self) -> np.ndarray:
        return self.v_recovery >= 0.95

    def trajectories(self) -> list[Trajectory]:
        if self.states is None:
            raise ValueError("rollout was run without collect=True")
        return [Trajectory(s, a, c) for s, a, c in zip(self.states, self.actions, self.contexts)]


def rollout_batch(
    backend,
    tasks: Sequence[Task],
    controller,
    reward_params: RewardParams = RewardParams(),
    gamma: float = 1.0,
    collect: bool = False,
) -> RolloutBatch:
    """Run one full episode per task in lock-step."""
    grid = backend.grid
    B = len(tasks)
    T = grid.n_steps
    start_samples = backend.samples
    st = backend.reset(tasks)
    controller.reset(B)
    L_c = grid.L[list(grid.controlled)]
    ls = st.tasks.load_scale
    t_pf = st.tasks.t_pf
    rec_idx = np.array([gridsim.recovery_index(grid, t) for t in t_pf])
    v_rec = np.full(B, np.nan)
    returns = np.zeros(B)
    shed_total = np.zeros(B)
    obs_all = np.zeros((B, T, grid.obs_dim))
    if collect:
        states = np.zeros((B, T + 1, grid.state_dim))
        actions = np.zeros((B, T, grid.n_controlled))
        contexts = np.zeros((B, T + 1, 4))
    for k in range(T):
        ctx = gridsim.fault_context(grid, st.tasks, k)
        obs = np.concatenate([st.V, st.P, ctx], axis=1)
        obs_all[:, k] = obs
        a = gridsim.check_action(grid, controller.act(obs))
        shed, invalid = shed_amounts(st.P, a, L_c, ls, reward_params.p_eps)
        if collect:
            states[:, k] = obs[:, : grid.state_dim]
            contexts[:, k] = ctx
            actions[:, k] = a
        st = backend.step(st, a, reward_params.p_eps)
        t_next = round((k + 1) * grid.dt, 10)
        r = step_reward(st.V, shed, invalid, t_next, t_pf, reward_params)
        returns += gamma**k * r
        shed_total += shed.sum(axis=1)
        hit = rec_idx == k + 1
        v_rec = np.where(hit, st.V.min(axis=1), v_rec)
    if collect:
        states[:, T] = np.concatenate([st.V, st.P], axis=1)
        contexts[:, T] = gridsim.fault_context(grid, st.tasks, T)
    out = RolloutBatch(returns, shed_total, obs_all, v_rec, backend.samples - start_samples)
    if collect:
        out.states, out.actions, out.contexts = states, actions, contexts
    return out


def rollout(policy_params, backend, task: Task, stats: RunningStats, template: RecurrentPolicyNet,
            reward_params: RewardParams = RewardParams(), gamma: float = 1.0):
    """Single episode; returns (return, visited observations, total shed)."""
    ctrl = PolicyController(template, np.asarray(policy_params)[None], stats)
    res = rollout_batch(backend, [task], ctrl, reward_params, gamma)
    return float(res.returns[0]), res.observations[0], float(res.shed_total[0])


# -- ARS primitives -------------------------------------------------------------


def sample_directions(dim: int, N: int, seed) -> np.ndarray:
    if N < 1:
        raise ValueError("N must be at least 1")
    return np.random.default_rng(seed).standard_normal((N, dim))


def evaluate_direction(
    theta, delta, sign: int, nu: float, backend, tasks: Sequence[Task], m: int,
    template: RecurrentPolicyNet, stats: RunningStats,
    reward_params: RewardParams = RewardParams(), gamma: float = 1.0,
) -> float:
    """Mean return of ``theta + sign * nu * delta`` over ``m`` rollouts of each task."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    params = np.asarray(theta) + sign * nu * np.asarray(delta)
    episodes = [t for t in tasks for _ in range(m)]
    ctrl = PolicyController(template, np.tile(params, (len(episodes), 1)), stats)
    return float(rollout_batch(backend, episodes, ctrl, reward_params, gamma).returns.mean())


def select_top(r_plus, r_minus, b: int) -> np.ndarray:
    """Indices of the b directions with the largest max(r+, r-); ties go to the lower index."""
    score = np.maximum(r_plus, r_minus)
    return np.argsort(-score, kind="stable")[:b]


def update_theta(theta, deltas, r_plus, r_minus, alpha: float, b: int) -> np.ndarray:
    r_plus = np.asarray(r_plus, dtype=float)
    r_minus = np.asarray(r_minus, dtype=float)
    deltas = np.asarray(deltas, dtype=float).reshape(len(r_plus), -1)
    top = select_top(r_plus, r_minus, b)
    # correctly rounded sums make the result independent of summation order
    kept = np.concatenate([r_plus[top], r_minus[top]]).tolist()
    mean = math.fsum(kept) / len(kept)
    sigma_b = max(math.sqrt(math.fsum((r - mean) * (r - mean) for r in kept) / len(kept)), SIGMA_B_FLOOR)
    weighted = (r_plus[top] - r_minus[top])[:, None] * deltas[top]
    step = np.array([math.fsum(col) for col in weighted.T])
    theta = np.asarray(theta, dtype=float)
    return theta + alpha / (b * sigma_b) * step.reshape(theta.shape)


def decay(alpha: float, nu: float, epsilon: float) -> tuple[float, float]:
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    return alpha * epsilon, nu * epsilon


# -- parallel direction evaluation ------------------------------------------------


@dataclass
class ChunkJob:
    grid: GridModel
    model: SurrogateModel | None
    backend: str
    template: RecurrentPolicyNet
    theta: np.ndarray
    deltas: np.ndarray  # (n, D)
    tasks: list[list[Task]]  # per direction
    nu: float
    m: int
    stats: RunningStats
    reward_params: RewardParams
    gamma: float


@dataclass
class ChunkResult:
    r_plus: np.ndarray
    r_minus: np.ndarray
    stats: RunningStats
    samples: int


def run_chunk(job: ChunkJob) -> ChunkResult:
    backend = make_backend(job.backend, job.grid, job.model)
    n = len(job.deltas)
    params, episodes = [], []
    for i in range(n):
        for sign in (1, -1):
            p = job.theta + sign * job.nu * job.deltas[i]
            for task in job.tasks[i]:
                for _ in range(job.m):
                    params.append(p)
                    episodes.append(task)
    ctrl = PolicyController(job.template, np.array(params), job.stats)
    res = rollout_batch(backend, episodes, ctrl, job.reward_params, job.gamma)
    per = res.returns.reshape(n, 2, -1).mean(axis=2)
    obs_stats = RunningStats.from_batch(res.observations.reshape(-1, res.observations.shape[-1]))
    return ChunkResult(per[:, 0], per[:, 1], obs_stats, res.samples)


def evaluate_directions(jobs: Sequence[ChunkJob], workers: int = 1, pool=None) -> list[ChunkResult]:
    if pool is not None:
        return list(pool.map(run_chunk, jobs))
    if workers <= 1:
        return [run_chunk(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(run_chunk, jobs))


# -- trainer ---------------------------------------------------------------------


@dataclass
class IterationReport:
    iteration: int
    wall_seconds: float
    mean_eval_reward: float
    ground_truth_samples: int
    alpha: float
    nu: float
    surrogate_val_loss: float = float("nan")
    retrained: bool = False
    surrogate_diverged: bool = False

    def row(self) -> list[str]:
        return [
            str(self.iteration), f"{self.wall_seconds:.3f}", repr(float(self.mean_eval_reward)),
            str(self.ground_truth_samples), repr(float(self.alpha)), repr(float(self.nu)),
            repr(float(self.surrogate_val_loss)),
        ]


def write_reports(reports: Sequence[IterationReport], path, header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def read_reports(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        r["iteration"] = int(r["iteration"])
        r["ground_truth_samples"] = int(r["ground_truth_samples"])
        for key in ("wall_seconds", "mean_eval_reward", "alpha", "nu", "surrogate_val_loss"):
            r[key] = float(r[key])
    return rows


@dataclass
class TrainerState:
    theta: np.ndarray
    stats: RunningStats
    alpha: float
    nu: float
    iteration: int = 0
    gt_samples: int = 0
    model: SurrogateModel | None = None
    online: MultiStepDataset | None = None
    val_loss: float = float("nan")
    n_online_episodes: int = 0
    history: list[float] = field(default_factory=list)


class ParsTrainer:
    """Algorithm loop: direction search on the active backend, ground-truth evaluation,
    online data collection and periodic surrogate retraining."""

    def __init__(
        self,
        grid: GridModel,
        train_tasks: Sequence[Task],
        config: ParsConfig,
        theta0: np.ndarray | None = None,
        stats: RunningStats | None = None,
        model: SurrogateModel | None = None,
        offline: MultiStepDataset | None = None,
        reward_params: RewardParams = RewardParams(),
        offline_samples: int = 0,
        wall_offset: float = 0.0,
    ):
        self.grid = grid
        self.tasks = list(train_tasks)
        self.cfg = config
        self.reward_params = reward_params
        self.template = RecurrentPolicyNet(grid.obs_dim, config.hidden, grid.n_controlled, seed=config.seed)
        self.backend_kind = Surrogate.kind if model is not None else GroundTruth.kind
        self.offline = offline
        self.wall_offset = wall_offset
        if self.backend_kind == Surrogate.kind and offline is None:
            raise ValueError("model-based training needs the offline dataset for retraining")
        theta = flatten(self.template) if theta0 is None else np.asarray(theta0, dtype=float).copy()
        if theta.size != self.template.n_params:
            raise ValueError(f"theta has {theta.size} entries, policy needs {self.template.n_params}")
        self.state = TrainerState(
            theta=theta,
            stats=stats.copy() if stats is not None else RunningStats(grid.obs_dim),
            alpha=config.alpha,
            nu=config.nu,
            gt_samples=int(offline_samples),
            model=model,
            online=None,
        )
        if model is not None and offline is not None and len(offline):
            self.state.val_loss = validation_loss(model, offline)
        self._t0 = None
        self._pool = None

    # -- pieces of one iteration --------------------------------------------------

    def _evaluate(self, theta: np.ndarray) -> tuple[float, RolloutBatch]:
        backend = GroundTruth(self.grid)
        ctrl = PolicyController(self.template, np.tile(theta, (len(self.tasks), 1)), self.state.stats)
        res = rollout_batch(backend, self.tasks, ctrl, self.reward_params, self.cfg.gamma, collect=True)
        return float(res.returns.mean()), res

    def _record_online(self, res: RolloutBatch) -> None:
        st = self.state
        ds = build_dataset(res.trajectories(), self.state.model.horizon if st.model else 5, ONLINE,
                           first_episode=st.n_online_episodes)
        st.n_online_episodes += len(self.tasks)
        st.online = ds if st.online is None else concat([st.online, ds])
        cap = self.cfg.online_cap
        if cap and len(st.online) > cap:
            st.online = st.online.subset(np.arange(len(st.online) - cap, len(st.online)))

    def _jobs(self, k: int, deltas: np.ndarray) -> list[ChunkJob]:
        cfg, st = self.cfg, self.state
        rng = np.random.default_rng([cfg.seed, k, 1])
        n_pick = min(cfg.p_tasks, len(self.tasks))
        picks = [[self.tasks[j] for j in rng.choice(len(self.tasks), n_pick, replace=False)] for _ in range(cfg.N)]
        jobs = []
        for lo in range(0, cfg.N, cfg.chunk_size):
            hi = min(cfg.N, lo + cfg.chunk_size)
            jobs.append(ChunkJob(
                self.grid, st.model if self.backend_kind == Surrogate.kind else None, self.backend_kind,
                self.template, st.theta, deltas[lo:hi], picks[lo:hi], st.nu, cfg.m, st.stats,
                self.reward_params, cfg.gamma,
            ))
        return jobs

    def _wall(self) -> float:
        return self.wall_offset + (time.perf_counter() - self._t0)

    def start(self) -> IterationReport:
        """Evaluate theta_0 and return the iteration-0 report row."""
        self._t0 = time.perf_counter()
        st = self.state
        mean_r, res = self._evaluate(st.theta)
        st.gt_samples += res.samples
        if self.backend_kind == Surrogate.kind:
            self._record_online(res)
        st.stats = st.stats.merge(RunningStats.from_batch(res.observations.reshape(-1, self.grid.obs_dim)))
        st.history.append(mean_r)
        return IterationReport(0, self._wall(), mean_r, st.gt_samples, st.alpha, st.nu, st.val_loss)

    def run_iteration(self) -> IterationReport:
        cfg, st = self.cfg, self.state
        k = st.iteration + 1
        deltas = sample_directions(st.theta.size, cfg.N, [cfg.seed, k, 0])
        results = evaluate_directions(self._jobs(k, deltas), cfg.workers, self._pool)
        r_plus = np.concatenate([r.r_plus for r in results])
        r_minus = np.concatenate([r.r_minus for r in results])
        st.gt_samples += sum(r.samples for r in results)
        st.theta = update_theta(st.theta, deltas, r_plus, r_minus, st.alpha, cfg.b)

        mean_r, res = self._evaluate(st.theta)
        st.gt_samples += res.samples
        parts = [r.stats for r in results]
        parts.append(RunningStats.from_batch(res.observations.reshape(-1, self.grid.obs_dim)))

        retrained = diverged = False
        if self.backend_kind == Surrogate.kind:
            self._record_online(res)
            if k % cfg.UF == 0:
                try:
                    st.model, rep = retrain(st.model, st.online, self.offline, seed=cfg.seed * 100003 + k,
                                            epochs=cfg.retrain_epochs)
                    retrained = not rep.skipped
                    if rep.val_loss:
                        st.val_loss = min(rep.val_loss)
                except TrainingDiverged:
                    diverged = True
        st.alpha, st.nu = decay(st.alpha, st.nu, cfg.epsilon)
        st.stats = st.stats.merge(reduce_stats(parts, self.grid.obs_dim))
        st.iteration = k
        st.history.append(mean_r)
        return IterationReport(k, self._wall(), mean_r, st.gt_samples, st.alpha, st.nu, st.val_loss,
                               retrained, diverged)

    def plateaued(self) -> bool:
        p = self.cfg.patience
        h = self.state.history
        if p <= 0 or len(h) <= p:
            return False
        return max(h[-p:]) <= max(h[:-p])

    def run(self, callback: Callable[[IterationReport, "ParsTrainer"], None] | None = None) -> list[IterationReport]:
        reports = [self.start()]
        if callback:
            callback(reports[-1], self)
        pool = ProcessPoolExecutor(max_workers=self.cfg.workers) if self.cfg.workers > 1 else None
        self._pool = pool
        try:
            for _ in range(self.cfg.H):
                reports.append(self.run_iteration())
                if callback:
                    callback(reports[-1], self)
                if self.plateaued():
                    log.info("eval reward plateaued at iteration %d", self.state.iteration)
                    break
        finally:
            self._pool = None
            if pool is not None:
                pool.shutdown()
        return reports


# -- policy checkpoints -------------------------------------------------------------


def save_policy(path, theta, stats: RunningStats, template: RecurrentPolicyNet, **metadata) -> None:
    blob = {
        "format": "mbpars.policy",
        "version": 1,
        "layout": template.layout(),
        "theta": np.asarray(theta).tolist(),
        "stats": stats.to_dict(),
        "metadata": metadata,
    }
    Path(path).write_text(json.dumps(blob), encoding="utf-8")


def load_policy(path) -> tuple[np.ndarray, RunningStats, RecurrentPolicyNet, dict]:
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    if blob.get("format") != "mbpars.policy" or blob.get("version") != 1:
        raise ValueError(f"{path} is not a policy checkpoint")
    lay = blob["layout"]
    template = RecurrentPolicyNet(lay["n_in"], lay["n_hidden"], lay["n_out"])
    theta = np.array(blob["theta"], dtype=float)
    if theta.size != template.n_params:
        raise ValueError("policy checkpoint has the wrong parameter count")
    return theta, RunningStats.from_dict(blob["stats"]), template, blob.get("metadata", {})


def config_dict(cfg: ParsConfig) -> dict:
    return asdict(cfg)


PARS_KEYS = tuple(f.name for f in fields(ParsConfig))
