import numpy as np
import pytest

from mbpars import gridsim
from mbpars.datasets import OFFLINE, ONLINE, MultiStepDataset, Trajectory
from mbpars.gridsim import Task
from mbpars.neuralnet import flatten, unflatten
from mbpars.surrogate import (
    MultiStepLoss, build_surrogate, context_width, encode_context, horizon_error, load_surrogate,
    multistep_loss, retrain, save_surrogate, single_step_loss, train_offline, write_horizon_csv,
)


class ConstantModel:
    """Predicts the same delta everywhere."""

    dt = 0.1

    def __init__(self, value):
        self.value = value

    def predict_delta(self, states, actions, ctx):
        return np.full(np.shape(states), self.value, dtype=float)


class OracleModel:
    """Replays the true deltas of a known linear system s' = s + c * a."""

    dt = 0.1

    def __init__(self, c):
        self.c = c

    def predict_delta(self, states, actions, ctx):
        return self.c * actions


def random_batch(rng, K, M, nv=6, nc=3):
    states = np.concatenate(
        [rng.uniform(0.6, 1.1, size=(K, M + 1, nv)), rng.uniform(0.5, 1.0, size=(K, M + 1, nc))], axis=2
    )
    actions = rng.uniform(-0.2, 0.0, size=(K, M, nc))
    ctx = np.column_stack([
        rng.integers(0, nv, K) / nv, np.ones(K), np.full(K, 0.1), rng.uniform(-1.0, 6.0, K),
    ])
    return states, actions, ctx


def small_model(seed=0, exact_load=True):
    return build_surrogate(6, 3, hidden=(8,), seed=seed, exact_load=exact_load)


def test_hand_case_two_steps():
    states = np.array([[[0.0], [1.0], [3.0]]])
    actions = np.zeros((1, 2, 1))
    assert multistep_loss(ConstantModel(1.0), (states, actions, np.zeros((1, 4)))) == 0.5


def test_oracle_model_has_zero_loss():
    rng = np.random.default_rng(0)
    s0 = rng.normal(size=(20, 2))
    actions = rng.normal(size=(20, 4, 2))
    states = np.concatenate([s0[:, None], s0[:, None] + 0.3 * np.cumsum(actions, axis=1)], axis=1)
    assert multistep_loss(OracleModel(0.3), (states, actions, np.zeros((20, 4)))) == pytest.approx(0.0, abs=1e-28)


def test_single_step_reduction():
    rng = np.random.default_rng(1)
    m = small_model()
    states, actions, ctx = random_batch(rng, 50, 1)
    want = single_step_loss(m, states[:, 0], actions[:, 0], states[:, 1], ctx)
    assert multistep_loss(m, (states, actions, ctx)) == pytest.approx(want, rel=1e-12)


def test_horizon_mismatch_rejected():
    rng = np.random.default_rng(1)
    states, actions, ctx = random_batch(rng, 4, 3)
    with pytest.raises(ValueError):
        multistep_loss(small_model(), (states[:, :3], actions, ctx))


@pytest.mark.parametrize("exact_load", [True, False])
def test_deltas_are_bounded(exact_load):
    m = small_model(exact_load=exact_load)
    m.net.params = [p * 100 for p in m.net.params]
    states, actions, ctx = random_batch(np.random.default_rng(2), 200, 1)
    d = m.predict_delta(states[:, 0], actions[:, 0], ctx)
    assert np.all(np.abs(d) <= m.delta_max)


def test_exact_load_follows_shedding_rule():
    m = small_model()
    states, actions, ctx = random_batch(np.random.default_rng(3), 30, 1)
    states[0, 0, 6] = 0.0
    nxt = m.next_state(states[:, 0], actions[:, 0], ctx)
    np.testing.assert_array_equal(nxt[:, 6:], gridsim.apply_shedding(states[:, 0, 6:], actions[:, 0]))


def test_dimension_mismatch_rejected():
    m = small_model()
    with pytest.raises(ValueError):
        m.predict_delta(np.zeros((1, 8)), np.zeros((1, 3)), np.zeros((1, 4)))
    with pytest.raises(ValueError):
        m.predict_delta(np.zeros((1, 9)), np.zeros((1, 2)), np.zeros((1, 4)))


def test_next_state_clips_to_physical_bounds():
    m = small_model()
    m.net.params = [np.zeros_like(p) for p in m.net.params]
    m.net.params[-1] = np.full_like(m.net.params[-1], 50.0)
    s = np.concatenate([np.full(6, 1.19), np.ones(3)])[None]
    nxt = m.next_state(s, np.zeros((1, 3)), np.zeros((1, 4)))
    np.testing.assert_allclose(nxt[0, :6], gridsim.V_MAX)
    assert np.all(m.next_state(s, np.zeros((1, 3)), np.zeros((1, 4)), clip=False)[0, :6] > gridsim.V_MAX)


def test_context_encoding():
    dt = 0.1
    ctx = np.array([
        [2 / 6, 1.0, 0.1, -0.5],   # well before the fault
        [2 / 6, 1.0, 0.1, 0.0],    # step covers the whole fault
        [2 / 6, 1.0, 0.1, -0.05],  # half the step inside the fault
        [5 / 6, 1.0, 0.1, 0.3],    # after clearance
    ])
    enc = encode_context(ctx, 6, dt)
    assert enc.shape == (4, context_width(6)) == (4, 17)
    np.testing.assert_array_equal(enc[:, :4], ctx)
    np.testing.assert_array_equal(enc[:, 4:10].argmax(axis=1), [2, 2, 2, 5])
    np.testing.assert_allclose(enc[:, 10], [0.0, 1.0, 0.5, 0.0], atol=1e-12)
    np.testing.assert_allclose(enc[2, 11:], [0, 0, 0.5, 0, 0, 0], atol=1e-12)


@pytest.mark.parametrize("exact_load", [True, False])
def test_multistep_gradient_matches_finite_differences(exact_load):
    rng = np.random.default_rng(4)
    m = small_model(seed=5, exact_load=exact_load)
    m.net.params = [p * 3 for p in m.net.params]
    batch = random_batch(rng, 3, 4)
    loss = MultiStepLoss(m)
    theta = flatten(m.net)
    _, grads = loss(m.net, batch)
    analytic = np.concatenate([g.ravel() for g in grads])
    fd = np.zeros_like(theta)
    h = 1e-6
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (loss(unflatten(m.net, theta + e), batch)[0] - loss(unflatten(m.net, theta - e), batch)[0]) / (2 * h)
    err = np.linalg.norm(analytic - fd) / (np.linalg.norm(analytic) + np.linalg.norm(fd))
    assert err < 1e-4


def test_loss_object_agrees_with_multistep_loss():
    m = small_model(seed=6)
    batch = random_batch(np.random.default_rng(5), 10, 5)
    assert MultiStepLoss(m)(m.net, batch)[0] == pytest.approx(multistep_loss(m, batch), rel=1e-12)


def _linear_dataset(n, seed, prov=OFFLINE, M=5):
    rng = np.random.default_rng(seed)
    states, actions, ctx = random_batch(rng, n, M)
    states[:, :, :6] = states[:, :1, :6] + 0.01 * np.arange(M + 1)[None, :, None]
    for tau in range(M):
        states[:, tau + 1, 6:] = gridsim.apply_shedding(states[:, tau, 6:], actions[:, tau])
    return MultiStepDataset(states, actions, ctx, np.full(n, prov, dtype=object))


def test_zero_epochs_leave_model_unchanged():
    ds = _linear_dataset(64, 0)
    m = build_surrogate(6, 3, hidden=(8,), data=ds)
    out, _ = train_offline(m, ds, 0, seed=0)
    np.testing.assert_array_equal(flatten(out.net), flatten(m.net))


def test_offline_training_reduces_loss_and_is_seeded():
    ds = _linear_dataset(256, 1)
    m = build_surrogate(6, 3, hidden=(16,), data=ds, seed=1)
    a, rep = train_offline(m, ds, 20, seed=3, lr=3e-3, batch_size=32)
    b, _ = train_offline(m, ds, 20, seed=3, lr=3e-3, batch_size=32)
    np.testing.assert_array_equal(flatten(a.net), flatten(b.net))
    assert rep.val_loss[-1] < rep.val_loss[0]
    assert len(rep.train_loss) == 21  # initial loss plus one entry per epoch


def test_training_rejects_horizon_mismatch():
    ds = _linear_dataset(16, 0, M=3)
    with pytest.raises(ValueError):
        train_offline(small_model(), ds, 1, seed=0)


def test_retrain_skips_empty_online_set():
    ds = _linear_dataset(32, 0)
    m = small_model()
    empty = MultiStepDataset(np.zeros((0, 6, 9)), np.zeros((0, 5, 3)), np.zeros((0, 4)), np.zeros(0, dtype=object))
    out, rep = retrain(m, empty, ds, seed=0)
    assert rep.skipped and out is m


def test_retrain_respects_validation_guard():
    off = _linear_dataset(200, 0)
    on = _linear_dataset(60, 1, ONLINE)
    m, _ = train_offline(build_surrogate(6, 3, hidden=(16,), data=off, seed=0), off, 5, seed=0, lr=3e-3)
    _, rep = retrain(m, on, off, seed=2, epochs=3)
    assert not rep.skipped
    assert min(rep.val_loss) <= rep.val_loss[0] * 1.10


def _traj(grid):
    task = Task(1.0, 2)
    acts = np.random.default_rng(0).uniform(-0.2, 0.0, size=(12, 3))
    states = gridsim.simulate(grid, task, acts)
    return Trajectory(
        np.array([np.concatenate([s.V, s.P]) for s in states]), acts,
        np.array([gridsim.fault_context(grid, gridsim.TaskArrays.from_tasks(grid, [task]), k)[0] for k in range(13)]),
    )


class ReplayModel:
    """Perfect model of one recorded trajectory, keyed by its time column."""

    dt = 0.1

    def __init__(self, traj):
        self.traj = traj

    def predict_delta(self, states, actions, ctx):
        k = np.rint((ctx[:, 3] + 1.0) / self.dt).astype(int)
        return self.traj.states[k + 1] - self.traj.states[k]


def test_horizon_error_table(tmp_path):
    grid = gridsim.build_grid()
    traj = _traj(grid)
    rows = horizon_error(ReplayModel(traj), [traj], [1, 3, 5])
    assert [r["horizon"] for r in rows] == [1, 3, 5]
    for r in rows:
        assert r["aggregate"] == pytest.approx(0.0, abs=1e-12)
        assert len(r["per_dim"]) == 9
    write_horizon_csv(rows, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("horizon,err_0")


def test_checkpoint_round_trip(tmp_path):
    for exact in (True, False):
        m = small_model(seed=7, exact_load=exact)
        m.in_shift = np.arange(29, dtype=float)
        save_surrogate(m, tmp_path / "s.json")
        back = load_surrogate(tmp_path / "s.json")
        np.testing.assert_array_equal(flatten(back.net), flatten(m.net))
        np.testing.assert_array_equal(back.in_shift, m.in_shift)
        assert back.exact_load is exact and back.horizon == 5
        states, actions, ctx = random_batch(np.random.default_rng(0), 5, 1)
        np.testing.assert_array_equal(
            back.predict_delta(states[:, 0], actions[:, 0], ctx), m.predict_delta(states[:, 0], actions[:, 0], ctx)
        )
