import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbpars import gridsim
from mbpars.gridsim import GridConfig, GridError, Task, build_grid


@pytest.fixture(scope="module")
def grid():
    return build_grid()


def zero_actions(grid, n=None):
    return np.zeros((n or grid.n_steps, grid.n_controlled))


def test_ring_has_two_first_and_two_second_neighbours():
    W = gridsim.ring_coupling(6, 0.3, 0.1)
    for row in W:
        assert np.sum(row == 0.3) == 2
        assert np.sum(row == 0.1) == 2
        assert np.sum(row != 0) == 4


def test_default_grid_invariants(grid):
    assert np.array_equal(grid.W, grid.W.T)
    assert np.all(np.diag(grid.W) == 0) and np.all(grid.W >= 0)
    assert np.all((grid.V0 >= 0.95) & (grid.V0 <= 1.05))
    assert 0 <= grid.v_stall < grid.v_rec < 0.95
    assert set(grid.controlled) <= set(range(grid.n_buses))
    assert grid.controlled == (1, 3, 5)
    assert grid.n_steps == 80


def test_rejects_asymmetric_coupling():
    W = np.zeros((3, 3))
    W[0, 1] = 0.1
    with pytest.raises(GridError):
        build_grid(GridConfig(n_buses=3, controlled=(1,), coupling=tuple(map(tuple, W))))


def test_rejects_empty_controlled_set():
    with pytest.raises(GridError):
        build_grid(GridConfig(controlled=()))


def test_rejects_out_of_range_fault_bus(grid):
    with pytest.raises(GridError):
        gridsim.reset(grid, Task(1.0, 6))


@pytest.mark.parametrize("kwargs", [dict(load_scale=0.4, fault_bus=0), dict(load_scale=1.0, fault_bus=0, fault_start=0.0),
                                    dict(load_scale=1.0, fault_bus=0, fault_duration=-0.1)])
def test_rejects_invalid_tasks(kwargs):
    with pytest.raises(GridError):
        Task(**kwargs)


def test_decoupled_network_holds_base_voltage():
    grid = build_grid(GridConfig(w1=0.0, w2=0.0))
    states = gridsim.simulate(grid, Task(1.0, 0), zero_actions(grid))
    # outside the fault window only the (zero) coupling term can move V
    for s in states:
        in_fault = 1.0 <= s.t - 1e-9 and s.t <= 1.1 + 1e-9
        if not in_fault:
            np.testing.assert_allclose(s.V, grid.V0, atol=1e-12)


def test_reset_at_base_loading(grid):
    s = gridsim.reset(grid, Task(1.0, 2))
    np.testing.assert_array_equal(s.P, np.ones(3))
    np.testing.assert_allclose(s.V, grid.V0, atol=1e-15)
    assert np.all(s.s_stall == 0) and s.t == 0.0


def test_reset_voltage_follows_loading(grid):
    heavy = gridsim.reset(grid, Task(1.15, 0)).V
    light = gridsim.reset(grid, Task(0.85, 0)).V
    assert np.all(heavy < grid.V0) and np.all(light > grid.V0)
    flat = build_grid(GridConfig(load_drop=0.0))
    np.testing.assert_array_equal(gridsim.reset(flat, Task(1.15, 0)).V, flat.V0)


def test_reset_is_deterministic(grid):
    a, b = gridsim.reset(grid, Task(1.15, 4)), gridsim.reset(grid, Task(1.15, 4))
    for f in ("V", "P", "s_stall"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_zero_action_keeps_load(grid):
    s = gridsim.step(gridsim.reset(grid, Task(1.0, 0)), np.zeros(3), grid)
    np.testing.assert_array_equal(s.P, np.ones(3))


def test_max_shed_removes_twenty_percent(grid):
    s = gridsim.step(gridsim.reset(grid, Task(1.0, 0)), np.full(3, -0.2), grid)
    np.testing.assert_allclose(s.P, 0.8, rtol=0, atol=1e-15)


def test_prefault_voltage_is_flat(grid):
    task = Task(1.0, 0)
    s = gridsim.reset(grid, task)
    for _ in range(9):
        s = gridsim.step(s, np.zeros(3), grid)
        np.testing.assert_allclose(s.V, grid.V0, atol=1e-15)
        assert np.all(s.s_stall == 0)


def test_action_bounds_enforced(grid):
    s = gridsim.reset(grid, Task(1.0, 0))
    for bad in (np.full(3, 0.1), np.full(3, -0.3), np.array([0.0, np.nan, 0.0]), np.zeros(2)):
        with pytest.raises(GridError):
            gridsim.step(s, bad, grid)


def test_terminal_state_cannot_step(grid):
    states = gridsim.simulate(grid, Task(1.0, 0), zero_actions(grid))
    assert len(states) == 81 and gridsim.is_terminal(states[-1], grid)
    with pytest.raises(GridError):
        gridsim.step(states[-1], np.zeros(3), grid)


def test_zero_shed_fails_recovery_on_default_fault(grid):
    states = gridsim.simulate(grid, Task(1.0, 0), zero_actions(grid))
    idx = gridsim.recovery_index(grid, 1.1)
    assert idx == 51
    assert states[idx].V.min() < 0.95
    assert not gridsim.meets_recovery(grid, states)


def test_fault_depresses_voltage_and_seeds_stall(grid):
    states = gridsim.simulate(grid, Task(1.0, 2), zero_actions(grid, 12))
    during = states[11]
    assert during.s_stall[2] >= grid.stall_seed - 1e-12
    assert during.V.min() < 0.7


def test_observation_layout(grid):
    s = gridsim.reset(grid, Task(1.0, 3))
    obs = gridsim.observe(s, grid)
    assert obs.shape == (13,)
    assert obs[-1] == -1.0
    np.testing.assert_allclose(obs[-4:-1], [0.5, 1.0, 0.1])
    assert gridsim.observation_length(142, 34) == 180


def test_default_task_sets():
    train, test = gridsim.default_task_sets()
    assert len(train) == 9 and len(test) == 24
    scenarios = {(t.load_scale, t.fault_bus) for t in test}
    assert all((t.load_scale, t.fault_bus) in scenarios for t in train)
    assert all(t.fault_duration == 0.1 for t in train + test)


def test_batched_core_matches_single_episode(grid):
    tasks = [Task(1.15, 0), Task(0.85, 3), Task(1.0, 5)]
    rng = np.random.default_rng(1)
    acts = rng.uniform(-0.2, 0.0, size=(len(tasks), grid.n_steps, 3))
    ta = gridsim.TaskArrays.from_tasks(grid, tasks)
    P = np.ones((3, 3))
    s = np.zeros((3, grid.n_buses))
    for k in range(grid.n_steps):
        P = gridsim.apply_shedding(P, acts[:, k])
        V, s = gridsim.advance(grid, k, s, P, ta)
    for i, task in enumerate(tasks):
        last = gridsim.simulate(grid, task, acts[i])[-1]
        np.testing.assert_array_equal(last.V, V[i])
        np.testing.assert_array_equal(last.P, P[i])


@settings(max_examples=25, deadline=None)
@given(
    scale=st.sampled_from([0.85, 1.0, 1.15]),
    bus=st.integers(0, 5),
    seed=st.integers(0, 10_000),
)
def test_state_invariants_hold_under_random_actions(scale, bus, seed):
    grid = build_grid()
    acts = np.random.default_rng(seed).uniform(-0.2, 0.0, size=(grid.n_steps, 3))
    states = gridsim.simulate(grid, Task(scale, bus), acts)
    P = np.array([s.P for s in states])
    assert np.all(np.diff(P, axis=0) <= 0)
    for s in states:
        assert np.all((s.V >= 0) & (s.V <= gridsim.V_MAX))
        assert np.all((s.s_stall >= 0) & (s.s_stall <= 1))
        assert np.all((s.P >= 0) & (s.P <= 1))


def test_trajectory_log_csv(grid, tmp_path):
    states = gridsim.simulate(grid, Task(1.0, 0), zero_actions(grid, 3))
    log = gridsim.TrajectoryLog(grid)
    for s in states[:-1]:
        log.add(s, np.zeros(3), 0.0)
    log.add(states[-1], None, None)
    path = tmp_path / "traj.csv"
    log.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:2] == ["t", "V_0"]
    assert len(lines) == 5
