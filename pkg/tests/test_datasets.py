import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mbpars.datasets import (
    OFFLINE, ONLINE, DatasetError, MultiStepDataset, RunningStats, Trajectory, build_dataset,
    concat, load_jsonl, make_multistep, mix, normalize, reduce_stats, save_csv, save_jsonl, stats_update,
)


def random_traj(rng, T=80, sd=9, ad=3):
    ctx = np.zeros((T + 1, 4))
    ctx[:, 3] = np.round(np.arange(T + 1) * 0.1 - 1.0, 10)
    return Trajectory(rng.normal(size=(T + 1, sd)), rng.uniform(-0.2, 0, size=(T, ad)), ctx)


def random_dataset(n, seed, prov=OFFLINE, M=5):
    rng = np.random.default_rng(seed)
    return MultiStepDataset(
        rng.normal(size=(n, M + 1, 2)), rng.normal(size=(n, M, 1)), rng.normal(size=(n, 4)),
        np.full(n, prov, dtype=object),
    )


def test_window_count():
    traj = random_traj(np.random.default_rng(0))
    assert len(make_multistep(traj, 5)) == 76
    assert len(build_dataset([traj], 5, OFFLINE)) == 76


def test_single_step_tuples_are_triples():
    traj = random_traj(np.random.default_rng(0), T=4)
    for t, (s, a, c) in enumerate(make_multistep(traj, 1)):
        np.testing.assert_array_equal(s, traj.states[t : t + 2])
        np.testing.assert_array_equal(a, traj.actions[t : t + 1])
        np.testing.assert_array_equal(c, traj.contexts[t])


def test_build_dataset_matches_make_multistep():
    traj = random_traj(np.random.default_rng(3), T=12)
    ds = build_dataset([traj], 5, OFFLINE)
    assert ds.horizon == 5
    for k, (s, a, c) in enumerate(make_multistep(traj, 5)):
        np.testing.assert_array_equal(ds.states[k], s)
        np.testing.assert_array_equal(ds.actions[k], a)
        np.testing.assert_array_equal(ds.contexts[k], c)


def test_episodes_round_trip():
    rng = np.random.default_rng(2)
    trajs = [random_traj(rng) for _ in range(3)]
    back = build_dataset(trajs, 5, OFFLINE).episodes()
    for a, b in zip(trajs, back):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_allclose(a.contexts, b.contexts, atol=1e-12)


def test_rejects_bad_horizon_and_shapes():
    with pytest.raises(DatasetError):
        make_multistep(random_traj(np.random.default_rng(0), T=3), 0)
    with pytest.raises(DatasetError):
        Trajectory(np.zeros((5, 2)), np.zeros((2, 1)))


def test_mix_sizes():
    off, on = random_dataset(400, 0), random_dataset(100, 1, ONLINE)
    assert len(mix(on, off, 0.25, seed=0)) == 200
    only_online = mix(on, off, 0.0, seed=0)
    assert len(only_online) == 100 and set(only_online.provenance) == {ONLINE}
    both = mix(on, off, 1.0, seed=0)
    assert len(both) == 500
    assert sorted(map(tuple, both.contexts.round(12))) == sorted(
        map(tuple, concat([on, off]).contexts.round(12))
    )


def test_mix_is_seeded():
    off, on = random_dataset(400, 0), random_dataset(100, 1, ONLINE)
    a, b = mix(on, off, 0.25, seed=7), mix(on, off, 0.25, seed=7)
    np.testing.assert_array_equal(a.states, b.states)
    with pytest.raises(DatasetError):
        mix(on, off, 1.5, seed=0)


def test_jsonl_round_trip_is_exact(tmp_path):
    ds = build_dataset([random_traj(np.random.default_rng(4), T=10)], 5, OFFLINE)
    save_jsonl(ds, tmp_path / "d.jsonl")
    back = load_jsonl(tmp_path / "d.jsonl")
    for f in ("states", "actions", "contexts", "episode", "start"):
        np.testing.assert_array_equal(getattr(ds, f), getattr(back, f))
    assert list(back.provenance) == list(ds.provenance)
    save_csv(ds, tmp_path / "d.csv")
    assert len((tmp_path / "d.csv").read_text().splitlines()) == len(ds) + 1


def test_load_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"schema": "other"}\n')
    with pytest.raises(DatasetError):
        load_jsonl(p)


# -- running statistics -------------------------------------------------------


def test_hand_stream():
    s = RunningStats(1)
    for x in (1.0, 2.0, 3.0):
        s = stats_update(s, [x])
    assert s.mean[0] == pytest.approx(2.0, abs=1e-15)
    assert s.std[0] == pytest.approx(math.sqrt(2 / 3), rel=1e-15)
    assert normalize(s, [3.0])[0] == pytest.approx(1.224744871391589, rel=1e-12)


def test_empty_stats_normalize_is_identity():
    x = np.array([0.3, -2.0, 5.0])
    np.testing.assert_array_equal(RunningStats(3).normalize(x), x)


def test_constant_stream_is_floored():
    s = RunningStats(2)
    for _ in range(5):
        s.push([1.5, -1.0])
    assert np.all(s.std == s.floor)
    np.testing.assert_array_equal(s.normalize(s.mean), 0.0)


def test_push_rejects_wrong_dimension():
    with pytest.raises(DatasetError):
        RunningStats(2).push([1.0])


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 40), st.integers(1, 4)),
               elements=st.floats(-1e3, 1e3, allow_nan=False)),
    st.integers(1, 5),
)
def test_merge_matches_batch(x, n_parts):
    parts = [RunningStats.from_batch(p) if len(p) else RunningStats(x.shape[1]) for p in np.array_split(x, n_parts)]
    merged = reduce_stats(parts, x.shape[1])
    assert merged.count == len(x)
    np.testing.assert_allclose(merged.mean, x.mean(axis=0), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(merged.var, x.var(axis=0), rtol=1e-8, atol=1e-7)


def _batch_stats(chunk):
    return RunningStats.from_batch(chunk)


def test_parallel_reduction_is_bitwise_sequential():
    rng = np.random.default_rng(5)
    chunks = [rng.normal(size=(rng.integers(5, 50), 13)) for _ in range(9)]
    serial = reduce_stats([_batch_stats(c) for c in chunks], 13)
    with ProcessPoolExecutor(2) as pool:
        parallel = reduce_stats(list(pool.map(_batch_stats, chunks)), 13)
    assert parallel.count == serial.count
    np.testing.assert_array_equal(parallel.mean, serial.mean)
    np.testing.assert_array_equal(parallel.m2, serial.m2)


def test_stats_dict_round_trip():
    s = RunningStats.from_batch(np.random.default_rng(0).normal(size=(10, 3)))
    back = RunningStats.from_dict(s.to_dict())
    np.testing.assert_array_equal(back.mean, s.mean)
    np.testing.assert_array_equal(back.m2, s.m2)
