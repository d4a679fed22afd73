"""Small numpy networks with hand-written reverse-mode gradients.

Two architectures are provided:

* ``DenseNet``: ReLU multilayer perceptron with a configurable output head.
* ``RecurrentPolicyNet``: one LSTM cell followed by a dense head.

Every network exposes its parameters as a list of arrays and can be viewed
as one flat vector (``flatten`` / ``unflatten``), which is what the random
search optimiser perturbs.  ``train`` runs seeded mini-batch gradient
descent against any loss object implementing ``__call__(net, batch) ->
(loss, grads)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _sigmoid(z):
    # split form avoids overflow warnings for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- output heads ------------------------------------------------------------


@dataclass(frozen=True)
class Identity:
    def forward(self, z):
        return z

    def backward(self, z, g):
        return g

    def describe(self) -> dict:
        return {"type": "identity"}


@dataclass(frozen=True)
class SigmoidAffine:
    """Sigmoid output mapped to the signed interval [-scale, +scale]."""

    scale: tuple[float, ...]

    def forward(self, z):
        return (2.0 * _sigmoid(z) - 1.0) * np.asarray(self.scale)

    def backward(self, z, g):
        s = _sigmoid(z)
        return g * 2.0 * s * (1.0 - s) * np.asarray(self.scale)

    def describe(self) -> dict:
        return {"type": "sigmoid_affine", "scale": list(self.scale)}


@dataclass(frozen=True)
class CenteredSquash:
    """Maps R onto [low, high] with a zero pre-activation giving ``high``.

    ``y = high - (high - low) * tanh(z**2)``; with the action interval
    [-0.2, 0] an all-zero network commands no shedding.
    """

    low: float = -0.2
    high: float = 0.0

    def forward(self, z):
        return self.high - (self.high - self.low) * np.tanh(z * z)

    def backward(self, z, g):
        th = np.tanh(z * z)
        return -g * (self.high - self.low) * (1.0 - th * th) * 2.0 * z

    def describe(self) -> dict:
        return {"type": "centered_squash", "low": self.low, "high": self.high}


def head_from_dict(d: dict):
    kind = d["type"]
    if kind == "identity":
        return Identity()
    if kind == "sigmoid_affine":
        return SigmoidAffine(tuple(d["scale"]))
    if kind == "centered_squash":
        return CenteredSquash(d["low"], d["high"])
    raise ValueError(f"unknown output head {kind!r}")


# -- dense network -----------------------------------------------------------


class DenseNet:
    """ReLU MLP; ``sizes`` lists every layer width including input and output."""

    kind = "dense"

    def __init__(self, sizes: Sequence[int], head=None, seed: int = 0, params=None):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.head = head or Identity()
        if params is None:
            rng = np.random.default_rng(seed)
            params = []
            for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
                params.append(_uniform(rng, n_in, (n_in, n_out)))
                params.append(_uniform(rng, n_in, (n_out,)))
        self.params = [np.asarray(p, dtype=float) for p in params]
        for p, shape in zip(self.params, self.param_shapes()):
            if p.shape != shape:
                raise ValueError(f"parameter shape {p.shape} != {shape}")

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            shapes += [(n_in, n_out), (n_out,)]
        return shapes

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def copy(self) -> "DenseNet":
        return DenseNet(self.sizes, self.head, params=[p.copy() for p in self.params])

    def forward(self, x, hidden=None):
        y, _ = self.forward_cache(x)
        return y, hidden

    def __call__(self, x):
        return self.forward_cache(x)[0]

    def forward_cache(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input dimension {x.shape[-1]} != {self.sizes[0]}")
        acts = [x]
        pre = []
        h = x
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            pre.append(z)
            h = np.maximum(z, 0.0) if i < n_layers - 1 else z
            acts.append(h)
        y = self.head.forward(pre[-1])
        return y, (acts, pre)

    def backward(self, cache, g_out):
        """Gradients w.r.t. parameters and input given dL/dy."""
        acts, pre = cache
        n_layers = len(self.sizes) - 1
        grads = [None] * len(self.params)
        g = self.head.backward(pre[-1], g_out)
        for i in reversed(range(n_layers)):
            a = acts[i]
            grads[2 * i] = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            grads[2 * i + 1] = g.reshape(-1, g.shape[-1]).sum(axis=0)
            g = g @ self.params[2 * i].T
            if i > 0:
                g = g * (pre[i - 1] > 0)
        return grads, g

    def layout(self) -> dict:
        return {"sizes": list(self.sizes), "head": self.head.describe()}


# -- recurrent policy ----------------------------------------------------------


class RecurrentPolicyNet:
    """LSTM cell (gate order input, forget, output, candidate) plus dense head."""

    kind = "lstm"

    def __init__(self, n_in: int, n_hidden: int = 32, n_out: int = 1, head=None, seed: int = 0, params=None):
        self.n_in, self.n_hidden, self.n_out = int(n_in), int(n_hidden), int(n_out)
        self.head = head or CenteredSquash()
        if params is None:
            rng = np.random.default_rng(seed)
            fan = self.n_in + self.n_hidden
            params = [
                _uniform(rng, fan, (self.n_in, 4 * self.n_hidden)),
                _uniform(rng, fan, (self.n_hidden, 4 * self.n_hidden)),
                _uniform(rng, fan, (4 * self.n_hidden,)),
                _uniform(rng, self.n_hidden, (self.n_hidden, self.n_out)),
                _uniform(rng, self.n_hidden, (self.n_out,)),
            ]
        self.params = [np.asarray(p, dtype=float) for p in params]
        for p, shape in zip(self.params, self.param_shapes()):
            if p.shape != shape:
                raise ValueError(f"parameter shape {p.shape} != {shape}")

    def param_shapes(self) -> list[tuple[int, ...]]:
        H = self.n_hidden
        return [(self.n_in, 4 * H), (H, 4 * H), (4 * H,), (H, self.n_out), (self.n_out,)]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes())

    def copy(self) -> "RecurrentPolicyNet":
        return RecurrentPolicyNet(self.n_in, self.n_hidden, self.n_out, self.head, params=[p.copy() for p in self.params])

    def initial_state(self, batch: int | None = None):
        shape = (self.n_hidden,) if batch is None else (batch, self.n_hidden)
        return np.zeros(shape), np.zeros(shape)

    def forward(self, x, hidden=None):
        """One time step; ``hidden`` is ``(h, c)`` or None at episode start."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input dimension {x.shape[-1]} != {self.n_in}")
        if hidden is None:
            hidden = self.initial_state(None if x.ndim == 1 else x.shape[0])
        h, c = hidden
        Wx, Wh, b, Wo, bo = self.params
        z = x @ Wx + h @ Wh + b
        H = self.n_hidden
        i = _sigmoid(z[..., :H])
        f = _sigmoid(z[..., H : 2 * H])
        o = _sigmoid(z[..., 2 * H : 3 * H])
        g = np.tanh(z[..., 3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        y = self.head.forward(h @ Wo + bo)
        return y, (h, c)

    def forward_sequence(self, xs):
        """Unroll over (B, T, n_in); returns outputs (B, T, n_out) and a cache."""
        xs = np.asarray(xs, dtype=float)
        B, T, _ = xs.shape
        H = self.n_hidden
        Wx, Wh, b, Wo, bo = self.params
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        hs = np.zeros((B, T + 1, H))
        cs = np.zeros((B, T + 1, H))
        gates = np.zeros((B, T, 4 * H))
        zx = xs @ Wx + b
        for t in range(T):
            z = zx[:, t] + h @ Wh
            act = np.concatenate(
                [_sigmoid(z[:, : 3 * H]), np.tanh(z[:, 3 * H :])], axis=1
            )
            gates[:, t] = act
            i, f, o, g = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
            c = f * c + i * g
            h = o * np.tanh(c)
            hs[:, t + 1] = h
            cs[:, t + 1] = c
        zo = hs[:, 1:] @ Wo + bo
        return self.head.forward(zo), (xs, hs, cs, gates, zo)

    def backward_sequence(self, cache, g_out, truncation: int | None = None):
        """BPTT; with ``truncation`` the hidden-state gradient is cut every k steps."""
        xs, hs, cs, gates, zo = cache
        B, T, _ = xs.shape
        H = self.n_hidden
        Wx, Wh, b, Wo, bo = self.params
        gzo = self.head.backward(zo, g_out)
        gWo = hs[:, 1:].reshape(-1, H).T @ gzo.reshape(-1, self.n_out)
        gbo = gzo.reshape(-1, self.n_out).sum(axis=0)
        gh_out = gzo @ Wo.T  # (B, T, H)
        gz_all = np.zeros((B, T, 4 * H))
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in reversed(range(T)):
            if truncation and (t + 1) % truncation == 0:
                dh = np.zeros((B, H))
                dc = np.zeros((B, H))
            act = gates[:, t]
            i, f, o, g = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
            c = cs[:, t + 1]
            c_prev = cs[:, t]
            tc = np.tanh(c)
            dh = dh + gh_out[:, t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            gz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1
            )
            gz_all[:, t] = gz
            dh = gz @ Wh.T
            dc = dc * f
        gWx = xs.reshape(-1, self.n_in).T @ gz_all.reshape(-1, 4 * H)
        gWh = hs[:, :-1].reshape(-1, H).T @ gz_all.reshape(-1, 4 * H)
        gb = gz_all.reshape(-1, 4 * H).sum(axis=0)
        return [gWx, gWh, gb, gWo, gbo]

    def layout(self) -> dict:
        return {
            "n_in": self.n_in,
            "n_hidden": self.n_hidden,
            "n_out": self.n_out,
            "head": self.head.describe(),
        }


class BatchedPolicy:
    """Many parameter vectors of one recurrent architecture, stepped together.

    Row ``k`` of ``flat_params`` drives episode ``k``; used for perturbed
    rollouts where every episode runs a different policy.
    """

    def __init__(self, template: RecurrentPolicyNet, flat_params: np.ndarray):
        flat_params = np.atleast_2d(flat_params)
        if flat_params.shape[1] != template.n_params:
            raise ValueError(f"expected {template.n_params} parameters, got {flat_params.shape[1]}")
        self.template = template
        self.B = len(flat_params)
        self.params = []
        offset = 0
        for shape in template.param_shapes():
            n = int(np.prod(shape))
            self.params.append(flat_params[:, offset : offset + n].reshape((self.B,) + shape))
            offset += n
        self.h, self.c = template.initial_state(self.B)

    def reset(self) -> None:
        self.h, self.c = self.template.initial_state(self.B)

    def step(self, x):
        Wx, Wh, b, Wo, bo = self.params
        H = self.template.n_hidden
        z = np.einsum("bi,big->bg", x, Wx) + np.einsum("bh,bhg->bg", self.h, Wh) + b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        o = _sigmoid(z[:, 2 * H : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        self.c = f * self.c + i * g
        self.h = o * np.tanh(self.c)
        return self.template.head.forward(np.einsum("bh,bho->bo", self.h, Wo) + bo)


# -- flat parameter view -------------------------------------------------------


def flatten(net) -> np.ndarray:
    return np.concatenate([p.ravel() for p in net.params])


def unflatten(net, flat) -> object:
    """New network of the same architecture holding the parameters in ``flat``."""
    flat = np.asarray(flat, dtype=float)
    if flat.ndim != 1 or flat.size != net.n_params:
        raise ValueError(f"expected {net.n_params} parameters, got shape {flat.shape}")
    params = []
    offset = 0
    for shape in net.param_shapes():
        n = int(np.prod(shape))
        params.append(flat[offset : offset + n].reshape(shape).copy())
        offset += n
    out = net.copy()
    out.params = params
    return out


def flatten_grads(grads: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


# -- losses --------------------------------------------------------------------


class MSELoss:
    """Mean squared error of a dense net on (inputs, targets)."""

    def __call__(self, net: DenseNet, batch):
        x, y = batch
        pred, cache = net.forward_cache(x)
        diff = pred - y
        n = diff.size
        loss = float(np.sum(diff * diff) / n)
        grads, _ = net.backward(cache, 2.0 * diff / n)
        return loss, grads


class BCLoss:
    """Behaviour-cloning MSE of a recurrent policy over whole episodes.

    ``batch`` is (observations (B, T, n_in), actions (B, T, n_out), mask (B, T)).
    """

    def __init__(self, truncation: int | None = 20):
        self.truncation = truncation

    def __call__(self, net: RecurrentPolicyNet, batch):
        xs, ys, mask = batch
        pred, cache = net.forward_sequence(xs)
        m = mask[..., None]
        n = max(float(mask.sum()) * ys.shape[-1], 1.0)
        diff = (pred - ys) * m
        loss = float(np.sum(diff * diff) / n)
        grads = net.backward_sequence(cache, 2.0 * diff / n, self.truncation)
        return loss, grads


def grad(net, batch, loss_spec) -> np.ndarray:
    loss, grads = loss_spec(net, batch)
    flat = flatten_grads(grads)
    if not np.isfinite(loss) or not np.all(np.isfinite(flat)):
        raise TrainingDiverged("non-finite loss or gradient")
    return flat


# -- training ------------------------------------------------------------------


def _take(data, idx):
    return tuple(np.asarray(a)[idx] for a in data)


def _n_items(data) -> int:
    return len(data[0])


class _Adam:
    def __init__(self, n: int, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def evaluate_loss(net, data, loss_spec, batch_size: int = 1024) -> float:
    n = _n_items(data)
    if n == 0:
        return float("nan")
    total = 0.0
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(n, lo + batch_size))
        loss, _ = loss_spec(net, _take(data, idx))
        total += loss * len(idx)
    return total / n


def train(
    net,
    data,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    loss_spec,
    optimizer: str = "sgd",
    val_frac: float = 0.1,
    restore_best: bool = False,
    val_data=None,
    lr_decay: float = 1.0,
    callback: Callable[[int, float, float], None] | None = None,
):
    """Seeded mini-batch gradient descent.

    ``data`` is a tuple of arrays sharing their leading dimension.  Unless
    ``val_data`` is given, a seeded ``val_frac`` slice is held out.  Returns
    the trained copy of ``net`` and a history with per-epoch ``train`` and
    ``val`` losses (index 0 is the loss before any update).  The learning
    rate is multiplied by ``lr_decay`` after every epoch.
    """
    n = _n_items(data)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    if val_data is None:
        perm = rng.permutation(n)
        n_val = int(round(val_frac * n)) if n > 1 else 0
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        val_data = _take(data, np.sort(val_idx))
        train_data = _take(data, np.sort(train_idx))
    else:
        train_data = data
    net = net.copy()
    theta = flatten(net)
    opt = _Adam(theta.size, lr) if optimizer == "adam" else None
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")

    def val_loss():
        return evaluate_loss(net, val_data, loss_spec) if _n_items(val_data) else float("nan")

    history = {"train": [evaluate_loss(net, train_data, loss_spec)], "val": [val_loss()]}
    best = (history["val"][0], theta.copy())
    n_train = _n_items(train_data)
    rate = lr
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_train)
        running = 0.0
        for lo in range(0, n_train, batch_size):
            idx = order[lo : lo + batch_size]
            loss, grads = loss_spec(net, _take(train_data, idx))
            g = flatten_grads(grads)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} (lr={lr})")
            theta = theta - (opt.step(g) if opt else rate * g)
            net.params = unflatten(net, theta).params
            running += loss * len(idx)
        rate *= lr_decay
        if opt:
            opt.lr = rate
        history["train"].append(running / n_train)
        history["val"].append(val_loss())
        if not np.isfinite(history["train"][-1]):
            raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
        if callback:
            callback(epoch, history["train"][-1], history["val"][-1])
        if history["val"][-1] < best[0]:
            best = (history["val"][-1], theta.copy())
    if restore_best and np.isfinite(best[0]):
        net.params = unflatten(net, best[1]).params
    return net, history


# -- checkpoints -----------------------------------------------------------------


def to_checkpoint(net, **metadata) -> dict:
    return {
        "format": "mbpars.net",
        "version": CHECKPOINT_VERSION,
        "kind": net.kind,
        "layout": net.layout(),
        "params": flatten(net).tolist(),
        "metadata": metadata,
    }


def from_checkpoint(blob: dict):
    if blob.get("format") != "mbpars.net":
        raise ValueError("not a network checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    layout = blob["layout"]
    head = head_from_dict(layout["head"])
    if blob["kind"] == "dense":
        template = DenseNet(layout["sizes"], head)
    elif blob["kind"] == "lstm":
        template = RecurrentPolicyNet(layout["n_in"], layout["n_hidden"], layout["n_out"], head)
    else:
        raise ValueError(f"unknown network kind {blob['kind']!r}")
    return unflatten(template, np.array(blob["params"], dtype=float))


def save_checkpoint(net, path, **metadata) -> None:
    Path(path).write_text(json.dumps(to_checkpoint(net, **metadata)), encoding="utf-8")


def load_checkpoint(path):
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    return from_checkpoint(blob), blob.get("metadata", {})
