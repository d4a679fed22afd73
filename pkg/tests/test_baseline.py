import numpy as np
import pytest

from mbpars import baseline, gridsim
from mbpars.baseline import UvlsController, UvlsRule, uvls_action
from mbpars.gridsim import Task
from mbpars.neuralnet import RecurrentPolicyNet, flatten


@pytest.fixture(scope="module")
def grid():
    return gridsim.build_grid()


@pytest.fixture(scope="module")
def offline(grid):
    train, _ = gridsim.default_task_sets()
    return baseline.generate_offline(grid, train)


def test_healthy_voltage_sheds_nothing():
    a, c = uvls_action(UvlsRule(), [0.95, 1.0, 0.9], [3, 0, 5])
    np.testing.assert_array_equal(a, 0.0)
    np.testing.assert_array_equal(c, 0)


def test_dwell_then_shed():
    rule = UvlsRule()
    c = np.zeros(1, dtype=int)
    fired = []
    for _ in range(5):
        a, c = uvls_action(rule, [0.85], c)
        fired.append(float(a[0]))
    assert fired == [0.0, 0.0, 0.0, -0.05, -0.05]


def test_dwell_resets_on_recovery():
    rule = UvlsRule()
    c = np.zeros(1, dtype=int)
    for v in (0.85, 0.85, 0.85, 0.92, 0.85, 0.85, 0.85):
        a, c = uvls_action(rule, [v], c)
        assert a[0] == 0.0


def test_rule_validation():
    with pytest.raises(ValueError):
        UvlsRule(shed_step=0.3)
    with pytest.raises(ValueError):
        UvlsRule(dwell=0.01)


def test_uvls_is_deterministic(grid):
    tasks = [Task(1.0, 0), Task(1.15, 3)]
    a, b = baseline.run_uvls(grid, tasks), baseline.run_uvls(grid, tasks)
    np.testing.assert_array_equal(a.actions, b.actions)


def test_offline_tuple_count(offline):
    assert len(offline) == 9 * 20 * 76 == 13680
    assert baseline.offline_samples(offline) == 9 * 20 * 80


def test_offline_actions_are_in_bounds(offline):
    assert np.all((offline.actions >= -0.2) & (offline.actions <= 0.0))


def test_noise_free_data_replays_uvls(grid):
    tasks = [Task(1.0, 2), Task(0.85, 4)]
    ds = baseline.generate_offline(grid, tasks, episodes_per_task=1, noise_std=0.0)
    replay = baseline.run_uvls(grid, tasks)
    for tr, acts in zip(ds.episodes(), replay.actions):
        np.testing.assert_array_equal(tr.actions, acts)


def test_noise_is_clipped_to_bounds(grid):
    ctrl = UvlsController(UvlsRule(), grid, noise_std=1.0, rng=np.random.default_rng(0))
    ctrl.reset(50)
    a = ctrl.act(np.full((50, grid.obs_dim), 0.5))
    assert np.all((a >= -0.2) & (a <= 0.0))


def test_bc_sequences_shape(offline, grid):
    xs, ys = baseline.bc_sequences(offline)
    assert xs.shape == (180, 80, grid.obs_dim) and ys.shape == (180, 80, 3)


def test_zero_epochs_return_initialisation(offline):
    net = RecurrentPolicyNet(13, 8, 3, seed=0)
    out, _ = baseline.imitate(net, offline, 0, seed=0)
    np.testing.assert_array_equal(flatten(out), flatten(net))


def test_cloned_policy_fits_demonstrations(offline, grid):
    stats = baseline.observation_stats(offline)
    net = RecurrentPolicyNet(grid.obs_dim, 32, 3, seed=0)
    _, hist = baseline.imitate(net, offline, 40, seed=0, stats=stats)
    assert hist["val"][-1] < 1e-3


def test_uvls_leaves_headroom(grid):
    train, _ = gridsim.default_task_sets()
    shed, passed = baseline.uvls_shed(grid, train)
    assert passed.all()
    better = []
    for task, s in zip(train, shed):
        found = baseline.constant_schedule_search(grid, task)
        better.append(found is not None and found[0] < s)
    assert any(better)
