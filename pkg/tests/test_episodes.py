import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from etta import MixRatioSchedule, apportion_counts, sample_task_mts, sample_task_ts


def test_apportion_one_hot():
    assert apportion_counts([1, 0, 0], 60).tolist() == [60, 0, 0]


def test_apportion_thirds_tie_break():
    # quotas 3.33 each, one leftover seat goes to the lowest index
    assert apportion_counts([1 / 3, 1 / 3, 1 / 3], 10).tolist() == [4, 3, 3]


def test_apportion_halves_quarters():
    assert apportion_counts([0.5, 0.25, 0.25], 60).tolist() == [30, 15, 15]


def test_apportion_rejects_negative():
    with pytest.raises(ValueError):
        apportion_counts([1.5, -0.5], 10)


@settings(max_examples=200, deadline=None)
@given(
    weights=st.lists(st.floats(0, 1), min_size=1, max_size=8).filter(lambda w: sum(w) > 1e-6),
    total=st.integers(0, 500),
)
def test_apportion_properties(weights, total):
    r = np.array(weights) / sum(weights)
    counts = apportion_counts(r, total)
    assert counts.sum() == total
    assert np.all(np.abs(counts - r * total) < 1)


def test_schedule_validation():
    with pytest.raises(ValueError):
        MixRatioSchedule.uniform(0.6, 0.4)
    with pytest.raises(ValueError):
        MixRatioSchedule.fixed(1.2)


def test_ts_shape(moons4):
    task = sample_task_ts(moons4[:3], 10, 12, np.random.default_rng(0))
    assert task.ratios.shape == (3,)
    assert sorted(task.ratios.tolist()) == [0.0, 0.0, 1.0]
    assert len(task.meta_train) == 2
    assert task.held_out_id not in [d for d, _ in task.meta_train]
    assert set(task.meta_test.domain_ids.tolist()) == {task.held_out_id}


def test_ts_requires_two_domains(moons4):
    with pytest.raises(ValueError):
        sample_task_ts(moons4[:1], 10, 10, np.random.default_rng(0))


def test_ts_held_out_frequency(moons4):
    rng = np.random.default_rng(1)
    held = [sample_task_ts(moons4, 2, 2, rng).held_out_id for _ in range(3000)]
    freq = np.bincount(held, minlength=4) / 3000
    assert np.all((freq > 0.20) & (freq < 0.30)), freq


def test_ts_equals_mts_rho_one(moons4):
    for seed in range(20):
        a = sample_task_ts(moons4, 10, 24, np.random.default_rng(seed))
        b = sample_task_mts(moons4, MixRatioSchedule.fixed(1.0), 10, 24, np.random.default_rng(seed))
        assert a.held_out_id == b.held_out_id
        np.testing.assert_array_equal(a.meta_test.indices, b.meta_test.indices)
        for (da, ba), (db, bb) in zip(a.meta_train, b.meta_train):
            assert da == db
            np.testing.assert_array_equal(ba.indices, bb.indices)


def test_mts_rho_zero_excludes_held_out(moons4):
    rng = np.random.default_rng(2)
    for _ in range(50):
        task = sample_task_mts(moons4, MixRatioSchedule.fixed(0.0), 10, 24, rng)
        assert task.held_out_id not in task.meta_test.domain_ids.tolist()


def test_mts_task_invariants(moons4):
    rng = np.random.default_rng(3)
    for _ in range(200):
        task = sample_task_mts(moons4, MixRatioSchedule(), 10, 24, rng)
        assert np.all(task.ratios >= 0)
        assert abs(task.ratios.sum() - 1) < 1e-9
        assert task.counts.sum() == len(task.meta_test) == 24
        for k, d in enumerate(moons4):
            assert np.count_nonzero(task.meta_test.domain_ids == d.domain_id) == task.counts[k]
        assert set(task.meta_test.labels.tolist()) == {0, 1}
        for _, b in task.meta_train:
            assert set(b.labels.tolist()) == {0, 1}
        assert len(task.meta_train) == 3


def test_mts_uniform_mean(moons4):
    rng = np.random.default_rng(4)
    draws = [sample_task_mts(moons4, MixRatioSchedule.uniform(0, 1), 2, 8, rng).r_ho for _ in range(5000)]
    assert abs(np.mean(draws) - 0.5) < 0.02


def test_mts_varies_ratios(moons4):
    rng = np.random.default_rng(5)
    seen = {tuple(np.round(sample_task_mts(moons4, MixRatioSchedule(), 2, 8, rng).ratios, 12)) for _ in range(1000)}
    assert len(seen) >= 100


def test_mts_oversized_request(moons4):
    with pytest.raises(ValueError):
        sample_task_mts(moons4, MixRatioSchedule.fixed(1.0), 10, 500, np.random.default_rng(0))
