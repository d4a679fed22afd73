"""Shaped per-step reward for emergency load shedding.

Voltages are scored against a staged recovery envelope after fault
clearance (0.7 / 0.8 / 0.9 / 0.95 p.u.).  Four seconds after clearance the
episode is judged: a voltage far below 0.95 p.u. costs ``-R`` per step, a
voltage just inside the dead band below 0.95 p.u. costs a smoothly decaying
exponential penalty, and anything else falls back to the weighted sum of
envelope deviations, shed load and invalid actions.

All functions accept batched arrays (leading axis = episodes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RECOVERY_LEVEL = 0.95
JUDGE_DELAY = 4.0
# (elapsed time since clearance at which the bracket ends, threshold)
ENVELOPE = ((0.33, 0.7), (0.5, 0.8), (1.5, 0.9), (np.inf, 0.95))
_TOL = 1e-9


@dataclass(frozen=True)
class RewardParams:
    R: float = 1000.0
    c1: float = 2.0
    c2: float = 8.0
    c3: float = 3.0
    d: float = 0.05
    tau: float = 200.0
    p_eps: float = 1e-3

    def __post_init__(self):
        for name in ("R", "c1", "c2", "c3", "d", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"reward parameter {name} must be positive")
        if not 0 < self.d < RECOVERY_LEVEL:
            raise ValueError("dead band must lie inside (0, 0.95)")

    @property
    def jump(self) -> float:
        """Gap between the soft penalty limit at 0.95 p.u. and zero reward."""
        return self.R * np.exp(-self.d * self.tau)


def envelope_threshold(elapsed):
    elapsed = np.asarray(elapsed, dtype=float)
    out = np.full(elapsed.shape, ENVELOPE[-1][1])
    for end, level in reversed(ENVELOPE[:-1]):
        out = np.where(elapsed < end - _TOL, level, out)
    return out


def delta_v(v, t, t_pf):
    """Deviation below the recovery envelope, ``min(v - threshold(t), 0)``.

    Only defined after fault clearance; raises for ``t <= t_pf``.
    """
    elapsed = np.asarray(t, dtype=float) - np.asarray(t_pf, dtype=float)
    if np.any(elapsed <= _TOL):
        raise ValueError("delta_v is only defined after fault clearance")
    out = np.minimum(np.asarray(v, dtype=float) - envelope_threshold(elapsed), 0.0)
    return out if out.ndim else float(out)


def _deviation_sum(V: np.ndarray, t: float, t_pf: np.ndarray) -> np.ndarray:
    elapsed = t - t_pf
    thr = envelope_threshold(elapsed)[..., None]
    dev = np.minimum(V - thr, 0.0).sum(axis=-1)
    return np.where(elapsed > _TOL, dev, 0.0)


def step_reward(V, shed, invalid_count, t, t_pf, params: RewardParams = RewardParams()):
    """Reward for one control step.

    ``V`` holds bus voltages after the step, ``shed`` the per-unit load
    removed on each controlled bus during the step, and ``t`` the time at the
    end of the step.  Batched inputs give one reward per episode.
    """
    V = np.asarray(V, dtype=float)
    shed = np.asarray(shed, dtype=float)
    invalid = np.asarray(invalid_count, dtype=float)
    t_pf = np.asarray(t_pf, dtype=float)
    floor = RECOVERY_LEVEL - params.d

    shaped = (
        params.c1 * _deviation_sum(V, t, t_pf)
        - params.c2 * shed.sum(axis=-1)
        - params.c3 * invalid
    )
    v_min = V.min(axis=-1)
    judged = (t - t_pf) > JUDGE_DELAY + _TOL
    # clamp the exponent argument so the unused branch never overflows
    soft = -params.R * np.exp(-np.maximum(v_min - floor, 0.0) * params.tau)
    out = np.where(
        judged & (v_min < floor),
        -params.R,
        np.where(judged & (v_min < RECOVERY_LEVEL), soft, shaped),
    )
    return out if out.ndim else float(out)


def shed_amounts(P_before, action, L_controlled, load_scale, p_eps: float = 1e-3):
    """Per-unit load removed by ``action`` and the invalid-action count.

    Shedding commanded on a bus whose remaining load is below ``p_eps`` is
    invalid and has no effect.
    """
    P_before = np.asarray(P_before, dtype=float)
    action = np.asarray(action, dtype=float)
    empty = P_before < p_eps
    commanded = action < -p_eps
    invalid = (empty & commanded).sum(axis=-1)
    frac = np.where(empty, 0.0, -action)
    shed = P_before * frac * L_controlled * np.asarray(load_scale, dtype=float)
    return shed, invalid


def episode_return(rewards, gamma: float = 1.0):
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    rewards = np.asarray(rewards, dtype=float)
    if rewards.shape[-1] == 0:
        return 0.0
    discount = gamma ** np.arange(rewards.shape[-1])
    out = (rewards * discount).sum(axis=-1)
    return out if out.ndim else float(out)
