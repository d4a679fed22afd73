"""Synthetic fault-induced delayed voltage recovery (FIDVR) grid.

A small ring network where each bus carries a motor-like load that can
stall.  Stalled load depresses the voltage of neighbouring buses through a
non-negative coupling matrix; low voltage stalls more load, high voltage lets
it recover.  This hysteresis produces the delayed post-fault recovery that
load shedding is meant to fix.

The module is the ground-truth simulator for the rest of the package.  All
dynamics are vectorised over a leading batch axis so that many episodes can
be advanced in lock-step by the rollout engine; the single-episode API
(`reset`, `step`, `observe`) is a thin wrapper over the batched core.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse.csgraph import shortest_path

ACTION_LOW = -0.2
ACTION_HIGH = 0.0
V_MAX = 1.2
V_FAULT_FLOOR = 0.05
N_FAULT_FEATURES = 4
_TOL = 1e-9


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    n_buses: int = 6
    controlled: tuple[int, ...] = (1, 3, 5)
    w1: float = 0.25
    w2: float = 0.10
    coupling: tuple[tuple[float, ...], ...] | None = None
    base_voltage: float | tuple[float, ...] = 1.0
    # stall-prone motor load sits on the controlled buses
    base_load: float | tuple[float, ...] | None = None
    controlled_load: float = 1.0
    other_load: float = 0.2
    # static load-flow sensitivity: heavier loading lowers the steady voltage
    load_drop: float = 0.1
    v_stall: float = 0.70
    v_rec: float = 0.85
    beta: float = 8.0
    lam: float = 6.0
    fault_depth: float = 0.9
    fault_decay: float = 1.5
    stall_seed: float = 0.8
    dt: float = 0.1
    n_sub: int = 5
    t_end: float = 8.0


@dataclass(frozen=True, eq=False)
class GridModel:
    n_buses: int
    controlled: tuple[int, ...]
    W: np.ndarray
    V0: np.ndarray
    L: np.ndarray
    v_stall: float
    v_rec: float
    beta: float
    lam: float
    fault_depth: float
    fault_decay: float
    stall_seed: float
    hops: np.ndarray
    load_drop: float = 0.0
    dt: float = 0.1
    n_sub: int = 5
    t_end: float = 8.0

    @property
    def n_controlled(self) -> int:
        return len(self.controlled)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def h(self) -> float:
        return self.dt / self.n_sub

    @property
    def state_dim(self) -> int:
        return self.n_buses + self.n_controlled

    @property
    def obs_dim(self) -> int:
        return self.n_buses + self.n_controlled + N_FAULT_FEATURES

    def validate(self) -> None:
        W = self.W
        if W.shape != (self.n_buses, self.n_buses):
            raise GridError(f"coupling shape {W.shape} != ({self.n_buses}, {self.n_buses})")
        if not np.array_equal(W, W.T):
            raise GridError("coupling matrix must be symmetric")
        if np.any(np.diag(W) != 0.0):
            raise GridError("coupling matrix must have a zero diagonal")
        if np.any(W < 0):
            raise GridError("coupling entries must be non-negative")
        if not self.controlled:
            raise GridError("controlled bus set is empty")
        if len(set(self.controlled)) != len(self.controlled):
            raise GridError("controlled buses must be distinct")
        if any(not 0 <= c < self.n_buses for c in self.controlled):
            raise GridError("controlled bus index out of range")
        if np.any(self.V0 < 0.95) or np.any(self.V0 > 1.05):
            raise GridError("base voltages must lie in [0.95, 1.05]")
        if not 0.0 <= self.v_stall < self.v_rec < 0.95:
            raise GridError("need 0 <= v_stall < v_rec < 0.95")
        if not 0.0 <= self.stall_seed <= 1.0:
            raise GridError("stall seed must lie in [0, 1]")
        if self.load_drop < 0:
            raise GridError("load_drop must be non-negative")


def ring_coupling(n_buses: int, w1: float, w2: float) -> np.ndarray:
    W = np.zeros((n_buses, n_buses))
    for i in range(n_buses):
        j = (i + 1) % n_buses
        if j != i:
            W[i, j] = W[j, i] = w1
        # second neighbours only exist as distinct buses on rings of 5+
        if n_buses >= 5:
            j = (i + 2) % n_buses
            W[i, j] = W[j, i] = w2
    return W


def _hops(W: np.ndarray) -> np.ndarray:
    adjacency = (W > 0).astype(float)
    d = shortest_path(adjacency, method="D", unweighted=True, directed=False)
    # disconnected pairs get a large finite distance so exp(-hops/kappa) -> 0
    d[~np.isfinite(d)] = 1e6
    return d


def _per_bus(value, n: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()
    if arr.shape != (n,):
        raise GridError(f"{name} must be scalar or length {n}")
    return arr


def build_grid(config: GridConfig | None = None) -> GridModel:
    config = config or GridConfig()
    n = config.n_buses
    if config.coupling is not None:
        W = np.array(config.coupling, dtype=float)
    else:
        W = ring_coupling(n, config.w1, config.w2)
    if config.base_load is None:
        L = np.full(n, config.other_load)
        L[list(config.controlled)] = config.controlled_load
    else:
        L = _per_bus(config.base_load, n, "base_load")
    # hop distances follow the topology; a decoupled ring still has ring hops
    topology = W if config.coupling is not None else ring_coupling(n, 1.0, 0.0)
    grid = GridModel(
        n_buses=n,
        controlled=tuple(int(c) for c in config.controlled),
        W=W,
        V0=_per_bus(config.base_voltage, n, "base_voltage"),
        L=L,
        v_stall=config.v_stall,
        v_rec=config.v_rec,
        beta=config.beta,
        lam=config.lam,
        fault_depth=config.fault_depth,
        fault_decay=config.fault_decay,
        stall_seed=config.stall_seed,
        hops=_hops(topology),
        load_drop=config.load_drop,
        dt=config.dt,
        n_sub=config.n_sub,
        t_end=config.t_end,
    )
    grid.validate()
    for arr in (grid.W, grid.V0, grid.L, grid.hops):
        arr.setflags(write=False)
    return grid


@dataclass(frozen=True)
class Task:
    load_scale: float
    fault_bus: int
    fault_start: float = 1.0
    fault_duration: float = 0.1

    def __post_init__(self):
        if not 0.5 <= self.load_scale <= 1.5:
            raise GridError(f"load_scale {self.load_scale} outside [0.5, 1.5]")
        if self.fault_start <= 0 or self.fault_duration <= 0:
            raise GridError("fault_start and fault_duration must be positive")

    @property
    def t_pf(self) -> float:
        """Time of fault clearance."""
        return self.fault_start + self.fault_duration


@dataclass(frozen=True, eq=False)
class EnvState:
    k: int
    V: np.ndarray
    s_stall: np.ndarray
    P: np.ndarray
    task: Task
    dt: float = 0.1

    @property
    def t(self) -> float:
        return round(self.k * self.dt, 10)

    def state_vec(self) -> np.ndarray:
        return np.concatenate([self.V, self.P])


def default_task_sets() -> tuple[list[Task], list[Task]]:
    train_scales = (1.0, 1.15, 0.85)
    train = [Task(s, b) for s in train_scales for b in (0, 2, 4)]
    test = [Task(s, b) for s in train_scales + (0.92,) for b in range(6)]
    return train, test


# -- batched core ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TaskArrays:
    """Per-episode task parameters laid out for the batched core."""

    load_scale: np.ndarray  # (B, 1)
    proximity: np.ndarray  # (B, n) exp(-hops(i, fault_bus) / kappa)
    fault_on: np.ndarray  # (B,) first faulted substep index
    fault_off: np.ndarray  # (B,) first cleared substep index
    context_static: np.ndarray  # (B, 3) fault_bus_norm, start, duration
    fault_start: np.ndarray  # (B,)
    t_pf: np.ndarray  # (B,)

    @classmethod
    def from_tasks(cls, grid: GridModel, tasks: Sequence[Task]) -> "TaskArrays":
        for task in tasks:
            if not 0 <= task.fault_bus < grid.n_buses:
                raise GridError(f"fault bus {task.fault_bus} out of range")
        h = grid.h
        fb = np.array([t.fault_bus for t in tasks], dtype=int)
        start = np.array([t.fault_start for t in tasks], dtype=float)
        dur = np.array([t.fault_duration for t in tasks], dtype=float)
        return cls(
            load_scale=np.array([[t.load_scale] for t in tasks], dtype=float),
            proximity=np.exp(-grid.hops[fb] / grid.fault_decay),
            fault_on=np.ceil(start / h - _TOL).astype(int),
            fault_off=np.ceil((start + dur) / h - _TOL).astype(int),
            context_static=np.stack([fb / grid.n_buses, start, dur], axis=1),
            fault_start=start,
            t_pf=start + dur,
        )


def coupling_drop(grid: GridModel, stall: np.ndarray, load: np.ndarray) -> np.ndarray:
    """Voltage depression sum_j W_ij * stall_j * load_j, row-wise.

    Uses an elementwise product and a last-axis reduction rather than a BLAS
    matmul so each episode's result is independent of batch size.
    """
    return (grid.W * (stall * load)[..., None, :]).sum(axis=-1)


def steady_voltage(grid: GridModel, load: np.ndarray) -> np.ndarray:
    """Voltage without stall: V0 at base loading, lower for heavier load."""
    return grid.V0 - grid.load_drop * (load - grid.L)


def initial_voltage(grid: GridModel, tasks: "TaskArrays") -> np.ndarray:
    load = np.ones((len(tasks.load_scale), grid.n_buses)) * grid.L * tasks.load_scale
    return np.clip(steady_voltage(grid, load), 0.0, V_MAX)


def full_load(grid: GridModel, P: np.ndarray) -> np.ndarray:
    """Expand remaining fractions on controlled buses to every bus."""
    out = np.ones(P.shape[:-1] + (grid.n_buses,))
    out[..., list(grid.controlled)] = P
    return out


def check_action(grid: GridModel, action: np.ndarray) -> np.ndarray:
    action = np.asarray(action, dtype=float)
    if action.shape[-1] != grid.n_controlled:
        raise GridError(f"action has {action.shape[-1]} components, expected {grid.n_controlled}")
    if np.any(~np.isfinite(action)) or np.any(action < ACTION_LOW - _TOL) or np.any(action > ACTION_HIGH + _TOL):
        raise GridError("action outside [-0.2, 0]")
    return np.clip(action, ACTION_LOW, ACTION_HIGH)


def apply_shedding(P: np.ndarray, action: np.ndarray, p_eps: float = 1e-3) -> np.ndarray:
    """Load update at step entry; shedding an (almost) empty bus is a no-op."""
    effective = np.where(P < p_eps, 0.0, action)
    return np.clip(P * (1.0 + effective), 0.0, 1.0)


def advance(
    grid: GridModel,
    k: int,
    s_stall: np.ndarray,
    P: np.ndarray,
    tasks: TaskArrays,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate one control step from step index ``k``; P is already updated.

    Returns the voltage at the last substep and the new stall levels.
    """
    h = grid.h
    load = full_load(grid, P) * grid.L * tasks.load_scale
    s = s_stall.copy()
    V = None
    for sub in range(grid.n_sub):
        j = k * grid.n_sub + sub
        inject = tasks.fault_on == j
        if np.any(inject):
            seeded = np.maximum(s, grid.stall_seed * tasks.proximity)
            s = np.where(inject[:, None], seeded, s)
        V = np.clip(steady_voltage(grid, load) - coupling_drop(grid, s, load), 0.0, V_MAX)
        faulted = (tasks.fault_on <= j) & (j < tasks.fault_off)
        if np.any(faulted):
            dipped = np.maximum(V_FAULT_FLOOR, V - grid.fault_depth * tasks.proximity)
            V = np.where(faulted[:, None], dipped, V)
        grow = grid.beta * (1.0 - s) * np.maximum(grid.v_stall - V, 0.0)
        decay = grid.lam * s * np.maximum(V - grid.v_rec, 0.0)
        s = np.clip(s + h * (grow - decay), 0.0, 1.0)
    return V, s


def fault_context(grid: GridModel, tasks: TaskArrays, k: int) -> np.ndarray:
    t = round(k * grid.dt, 10)
    rel = (t - tasks.fault_start)[:, None]
    return np.concatenate([tasks.context_static, rel], axis=1)


# -- single-episode API ----------------------------------------------------


def reset(grid: GridModel, task: Task) -> EnvState:
    if not 0 <= task.fault_bus < grid.n_buses:
        raise GridError(f"fault bus {task.fault_bus} out of range")
    return EnvState(
        k=0,
        V=initial_voltage(grid, TaskArrays.from_tasks(grid, [task]))[0],
        s_stall=np.zeros(grid.n_buses),
        P=np.ones(grid.n_controlled),
        task=task,
        dt=grid.dt,
    )


def step(state: EnvState, action, grid: GridModel) -> EnvState:
    if state.k >= grid.n_steps:
        raise GridError("cannot step a terminal state")
    action = check_action(grid, action)
    P = apply_shedding(state.P, action)
    tasks = TaskArrays.from_tasks(grid, [state.task])
    V, s = advance(grid, state.k, state.s_stall[None], P[None], tasks)
    return replace(state, k=state.k + 1, V=V[0], s_stall=s[0], P=P)


def is_terminal(state: EnvState, grid: GridModel) -> bool:
    return state.k >= grid.n_steps


def observe(state: EnvState, grid: GridModel | None = None) -> np.ndarray:
    n = len(state.V) if grid is None else grid.n_buses
    task = state.task
    return np.concatenate(
        [
            state.V,
            state.P,
            [task.fault_bus / n, task.fault_start, task.fault_duration, state.t - task.fault_start],
        ]
    )


def observation_length(n_monitored: int, n_controlled: int) -> int:
    return n_monitored + n_controlled + N_FAULT_FEATURES


def recovery_index(grid: GridModel, t_pf: float) -> int:
    """Step index of the state sampled at fault clearance + 4 s."""
    return int(np.ceil((t_pf + 4.0) / grid.dt - 1e-6))


def simulate(grid: GridModel, task: Task, actions: Iterable) -> list[EnvState]:
    """Run a full episode with a fixed action sequence; returns all states."""
    state = reset(grid, task)
    states = [state]
    for a in actions:
        if is_terminal(state, grid):
            break
        state = step(state, a, grid)
        states.append(state)
    return states


def meets_recovery(grid: GridModel, states: Sequence[EnvState], threshold: float = 0.95) -> bool:
    idx = recovery_index(grid, states[0].task.t_pf)
    return bool(np.min(states[idx].V) >= threshold)


@dataclass
class TrajectoryLog:
    """Per-step record used for CSV export of a ground-truth episode."""

    grid: GridModel
    rows: list[list[float]] = field(default_factory=list)

    def add(self, state: EnvState, action: np.ndarray | None, reward: float | None) -> None:
        nc = self.grid.n_controlled
        a = np.full(nc, np.nan) if action is None else np.asarray(action, dtype=float)
        r = np.nan if reward is None else float(reward)
        self.rows.append([state.t, *state.V, *state.P, *a, r])

    def header(self) -> list[str]:
        n, c = self.grid.n_buses, self.grid.n_controlled
        return (
            ["t"]
            + [f"V_{i}" for i in range(n)]
            + [f"P_{j}" for j in range(c)]
            + [f"a_{j}" for j in range(c)]
            + ["reward"]
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for row in self.rows:
                writer.writerow([f"{x:.10g}" for x in row])
