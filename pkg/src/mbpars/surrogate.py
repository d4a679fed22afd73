"""Learned delta-state dynamics model and its multi-step training loss.

The model predicts ``s_{t+1} - s_t`` from the state ``[V, P]``, the action and
the four fault-context scalars.  The context enters the network in an
expanded encoding (one-hot fault bus, the share of the control step that
overlaps the fault window, and their product) because a faulted step is a
sharp, location-dependent event that a ReLU network fits poorly from the raw
scalars alone.  Its output layer is a sigmoid mapped affinely onto
``[-delta_max, +delta_max]`` per predicted dimension, so a single prediction
can never move a state by more than ``delta_max``.

By default only the voltage change is learned: the remaining-load fractions
are the controller's own bookkeeping and follow the shedding rule exactly.
With ``exact_load=False`` the network predicts the full state delta.

Training minimises the M-step loss: starting from the recorded ``s_t`` the
model is unrolled on its own predictions for M steps and the squared error
against the recorded states is averaged over tuples and steps.  Gradients
flow through the whole recursive chain.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import MultiStepDataset, Trajectory, mix
from .gridsim import ACTION_LOW, V_MAX, apply_shedding
from .neuralnet import DenseNet, SigmoidAffine, TrainingDiverged, evaluate_loss, from_checkpoint, to_checkpoint, train

log = logging.getLogger(__name__)

RETRAIN_OFFLINE_FRAC = 0.25
RETRAIN_GUARD = 1.10


@dataclass(eq=False)
class SurrogateModel:
    net: DenseNet
    n_voltage: int
    n_controlled: int
    horizon: int = 5
    dt: float = 0.1
    in_shift: np.ndarray = None
    in_scale: np.ndarray = None
    meta: dict = field(default_factory=dict)
    exact_load: bool = True
    p_eps: float = 1e-3

    def __post_init__(self):
        n_in = self.net.sizes[0]
        if self.in_shift is None:
            self.in_shift = np.zeros(n_in)
        if self.in_scale is None:
            self.in_scale = np.ones(n_in)
        if self.net.sizes[-1] != self.n_learned:
            raise ValueError(f"network output must have {self.n_learned} entries")
        if n_in != self.state_dim + self.n_controlled + context_width(self.n_voltage):
            raise ValueError("network input must be state + action + encoded context")

    @property
    def state_dim(self) -> int:
        return self.n_voltage + self.n_controlled

    @property
    def n_learned(self) -> int:
        """Number of state dimensions whose change the network predicts."""
        return self.n_voltage if self.exact_load else self.state_dim

    @property
    def delta_max(self) -> np.ndarray:
        learned = np.asarray(self.net.head.scale, dtype=float)
        if not self.exact_load:
            return learned
        return np.concatenate([learned, np.full(self.n_controlled, -ACTION_LOW)])

    def copy(self) -> "SurrogateModel":
        return SurrogateModel(
            self.net.copy(), self.n_voltage, self.n_controlled, self.horizon, self.dt,
            self.in_shift.copy(), self.in_scale.copy(), dict(self.meta), self.exact_load, self.p_eps,
        )

    def load_delta(self, states, actions) -> np.ndarray:
        P = states[..., self.n_voltage :]
        return apply_shedding(P, actions, self.p_eps) - P

    def combine(self, learned, states, actions) -> np.ndarray:
        """Full state delta from the network output."""
        if not self.exact_load:
            return learned
        return np.concatenate([learned, self.load_delta(states, actions)], axis=-1)

    def features(self, states, actions, ctx) -> np.ndarray:
        x = raw_features(states, actions, ctx, self.n_voltage, self.dt)
        return (x - self.in_shift) / self.in_scale

    def predict_delta(self, states, actions, ctx) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        ctx = np.asarray(ctx, dtype=float)
        if states.shape[-1] != self.state_dim:
            raise ValueError(f"state dimension {states.shape[-1]} != {self.state_dim}")
        if actions.shape[-1] != self.n_controlled:
            raise ValueError(f"action dimension {actions.shape[-1]} != {self.n_controlled}")
        if ctx.shape[-1] != 4:
            raise ValueError("fault context must have 4 entries")
        return self.combine(self.net(self.features(states, actions, ctx)), states, actions)

    def clip_state(self, states) -> np.ndarray:
        nv = self.n_voltage
        out = np.array(states, dtype=float, copy=True)
        out[..., :nv] = np.clip(out[..., :nv], 0.0, V_MAX)
        out[..., nv:] = np.clip(out[..., nv:], 0.0, 1.0)
        return out

    def next_state(self, states, actions, ctx, clip: bool = True) -> np.ndarray:
        nxt = np.asarray(states, dtype=float) + self.predict_delta(states, actions, ctx)
        return self.clip_state(nxt) if clip else nxt


def context_width(n_buses: int) -> int:
    return 4 + 2 * n_buses + 1


def encode_context(ctx, n_buses: int, dt: float) -> np.ndarray:
    """Expand [fault_bus/n, start, duration, t - start] into network features.

    Appends the one-hot fault bus, the fraction of the step [t, t + dt] spent
    inside the fault window and the one-hot scaled by that fraction.
    """
    ctx = np.asarray(ctx, dtype=float)
    bus = np.rint(ctx[..., 0] * n_buses).astype(int)
    onehot = (bus[..., None] == np.arange(n_buses)).astype(float)
    t0 = ctx[..., 3]
    overlap = np.clip(np.minimum(t0 + dt, ctx[..., 2]) - np.maximum(t0, 0.0), 0.0, dt) / dt
    return np.concatenate([ctx, onehot, overlap[..., None], onehot * overlap[..., None]], axis=-1)


def raw_features(states, actions, ctx, n_buses: int, dt: float) -> np.ndarray:
    return np.concatenate([states, actions, encode_context(ctx, n_buses, dt)], axis=-1)


def build_surrogate(
    n_voltage: int,
    n_controlled: int,
    hidden: Sequence[int] = (128, 64, 64),
    delta_max_v: float = 1.0,
    delta_max_p: float = 0.25,
    horizon: int = 5,
    dt: float = 0.1,
    seed: int = 0,
    data: MultiStepDataset | None = None,
    exact_load: bool = True,
) -> SurrogateModel:
    """Fresh surrogate; with ``data`` the input standardisation is fitted to it."""
    sd = n_voltage + n_controlled
    n_in = sd + n_controlled + context_width(n_voltage)
    scale = (delta_max_v,) * n_voltage + (() if exact_load else (delta_max_p,) * n_controlled)
    net = DenseNet([n_in, *hidden, len(scale)], SigmoidAffine(tuple(float(s) for s in scale)), seed=seed)
    model = SurrogateModel(net, n_voltage, n_controlled, horizon, dt, exact_load=exact_load)
    if data is not None and len(data):
        x = raw_features(data.states[:, 0], data.actions[:, 0], data.contexts, n_voltage, dt)
        std = x.std(axis=0)
        model.in_shift = x.mean(axis=0)
        model.in_scale = np.where(std > 1e-8, std, 1.0)
    return model


def _contexts(ctx: np.ndarray, tau: int, dt: float) -> np.ndarray:
    out = ctx.copy()
    out[:, 3] = ctx[:, 3] + tau * dt
    return out


def rollout_predictions(model, states0, actions, ctx, dt: float | None = None) -> np.ndarray:
    """Open-loop unroll from ``states0`` (K, sd) over actions (K, M, ad); no clipping."""
    dt = model.dt if dt is None else dt
    s = np.asarray(states0, dtype=float)
    preds = []
    for tau in range(actions.shape[1]):
        s = s + model.predict_delta(s, actions[:, tau], _contexts(ctx, tau, dt))
        preds.append(s)
    return np.stack(preds, axis=1)


def multistep_loss(model, batch) -> float:
    """Mean over tuples and steps of the squared L2 prediction error.

    ``batch`` is a MultiStepDataset or a (states, actions, contexts) tuple;
    any object with ``predict_delta`` works as the model.
    """
    states, actions, ctx = _unpack(batch)
    M = actions.shape[1]
    if states.shape[1] != M + 1:
        raise ValueError("tuple horizon mismatch")
    preds = rollout_predictions(model, states[:, 0], actions, ctx, getattr(model, "dt", 0.1))
    err = states[:, 1:] - preds
    return float(np.sum(err * err) / (len(states) * M))


def _unpack(batch):
    if isinstance(batch, MultiStepDataset):
        return batch.states, batch.actions, batch.contexts
    return batch


class MultiStepLoss:
    """Loss object for ``neuralnet.train``: recursive M-step error and its gradient."""

    def __init__(self, model: SurrogateModel):
        self.model = model

    def __call__(self, net: DenseNet, batch):
        states, actions, ctx = batch
        m = self.model
        K, M = actions.shape[0], actions.shape[1]
        # exactly tracked load fractions carry no parameter dependence, so
        # only the learned leading state dimensions need a backward pass
        n = m.n_learned
        norm = 1.0 / (K * M)
        s = states[:, 0]
        caches = []
        preds = []
        for tau in range(M):
            a = actions[:, tau]
            x = m.features(s, a, _contexts(ctx, tau, m.dt))
            out, cache = net.forward_cache(x)
            caches.append(cache)
            s = s + m.combine(out, s, a)
            preds.append(s)
        loss = 0.0
        grads = [np.zeros_like(p) for p in net.params]
        g_s = np.zeros((K, n))
        for tau in reversed(range(M)):
            err = states[:, tau + 1] - preds[tau]
            loss += float(np.sum(err * err))
            g_s = g_s - 2.0 * err[:, :n] * norm
            step_grads, g_x = net.backward(caches[tau], g_s)
            for acc, g in zip(grads, step_grads):
                acc += g
            # predicted input state feeds back: identity path plus network path
            g_s = g_s + g_x[:, :n] / m.in_scale[:n]
        return loss * norm, grads


def single_step_loss(model, states, actions, next_states, ctx) -> float:
    pred = model.predict_delta(states, actions, ctx)
    err = next_states - states - pred
    return float(np.sum(err * err) / len(states))


def _as_arrays(ds: MultiStepDataset):
    return (ds.states, ds.actions, ds.contexts)


@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    skipped: bool = False
    reverted: bool = False

    @property
    def final_val(self) -> float:
        return self.val_loss[-1] if self.val_loss else float("nan")


def train_offline(
    model: SurrogateModel,
    offline: MultiStepDataset,
    epochs: int,
    seed: int,
    lr: float = 1e-3,
    batch_size: int = 128,
    optimizer: str = "adam",
    lr_decay: float = 1.0,
    callback=None,
) -> tuple[SurrogateModel, TrainReport]:
    if len(offline) == 0:
        raise ValueError("offline dataset is empty")
    if offline.horizon != model.horizon:
        raise ValueError(f"dataset horizon {offline.horizon} != model horizon {model.horizon}")
    model = model.copy()
    net, hist = train(
        model.net, _as_arrays(offline), epochs, batch_size, lr, seed,
        MultiStepLoss(model), optimizer=optimizer, lr_decay=lr_decay, callback=callback,
    )
    model.net = net
    return model, TrainReport(hist["train"], hist["val"])


def retrain(
    model: SurrogateModel,
    online: MultiStepDataset,
    offline: MultiStepDataset,
    seed: int,
    epochs: int = 2,
    lr: float = 5e-4,
    batch_size: int = 128,
    optimizer: str = "adam",
) -> tuple[SurrogateModel, TrainReport]:
    """Continue training on all online tuples plus 25 % of the offline ones.

    Keeps the weights with the lowest held-out loss on the combined set, so
    the validation loss never rises above its pre-retrain value.
    """
    if len(online) == 0:
        log.warning("retrain skipped: online dataset is empty")
        return model, TrainReport([], [], skipped=True)
    combined = mix(online, offline, RETRAIN_OFFLINE_FRAC, seed)
    model = model.copy()
    try:
        net, hist = train(
            model.net, _as_arrays(combined), epochs, batch_size, lr, seed,
            MultiStepLoss(model), optimizer=optimizer, restore_best=True,
        )
    except TrainingDiverged:
        log.warning("retrain diverged; keeping previous surrogate")
        return model, TrainReport([], [], reverted=True)
    before = hist["val"][0]
    best = min(hist["val"])
    model.net = net
    report = TrainReport(hist["train"], hist["val"])
    report.reverted = best > before * RETRAIN_GUARD
    return model, report


def validation_loss(model: SurrogateModel, ds: MultiStepDataset) -> float:
    return evaluate_loss(model.net, _as_arrays(ds), MultiStepLoss(model))


def horizon_error(model, trajectories: Sequence[Trajectory], horizons: Sequence[int]) -> list[dict]:
    """Open-loop rollout error at each horizon.

    For every start index with enough remaining steps, the model is unrolled
    on the recorded actions; the table reports the per-dimension RMS error and
    the mean L2 error norm over all starts.
    """
    rows = []
    for h in horizons:
        errs = []
        for traj in trajectories:
            T = len(traj.states)
            n = T - h
            if n <= 0:
                continue
            starts = np.arange(n)
            acts = np.stack([traj.actions[starts + j] for j in range(h)], axis=1)
            ctx = traj.contexts[starts] if traj.contexts is not None else np.zeros((n, 4))
            preds = rollout_predictions(model, traj.states[starts], acts, ctx, getattr(model, "dt", 0.1))
            errs.append(preds[:, -1] - traj.states[starts + h])
        e = np.concatenate(errs) if errs else np.zeros((0, 1))
        rows.append(
            {
                "horizon": int(h),
                "per_dim": np.sqrt(np.mean(e * e, axis=0)) if len(e) else np.zeros(e.shape[1]),
                "aggregate": float(np.mean(np.linalg.norm(e, axis=1))) if len(e) else 0.0,
            }
        )
    return rows


def write_horizon_csv(rows: list[dict], path) -> None:
    dims = len(rows[0]["per_dim"]) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["horizon"] + [f"err_{i}" for i in range(dims)] + ["aggregate"])
        for r in rows:
            w.writerow([r["horizon"], *(f"{x:.10g}" for x in r["per_dim"]), f"{r['aggregate']:.10g}"])


def save_surrogate(model: SurrogateModel, path) -> None:
    blob = to_checkpoint(
        model.net,
        n_voltage=model.n_voltage,
        n_controlled=model.n_controlled,
        horizon=model.horizon,
        dt=model.dt,
        delta_max=model.delta_max.tolist(),
        in_shift=model.in_shift.tolist(),
        in_scale=model.in_scale.tolist(),
        exact_load=model.exact_load,
        p_eps=model.p_eps,
        state_layout=[f"V_{i}" for i in range(model.n_voltage)] + [f"P_{j}" for j in range(model.n_controlled)],
        **model.meta,
    )
    Path(path).write_text(json.dumps(blob), encoding="utf-8")


def load_surrogate(path) -> SurrogateModel:
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    net = from_checkpoint(blob)
    md = blob["metadata"]
    extra = {k: v for k, v in md.items() if k not in {
        "n_voltage", "n_controlled", "horizon", "dt", "delta_max", "in_shift", "in_scale", "state_layout",
        "exact_load", "p_eps"}}
    return SurrogateModel(
        net, md["n_voltage"], md["n_controlled"], md["horizon"], md["dt"],
        np.array(md["in_shift"], dtype=float), np.array(md["in_scale"], dtype=float), extra,
        bool(md.get("exact_load", False)), float(md.get("p_eps", 1e-3)),
    )
