import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mamlrk.tasks import (
    AMPLITUDE_RANGE,
    INPUT_RANGE,
    PHASE_RANGE,
    SamplingError,
    SinusoidTask,
    nearest_mean_predict,
    sample_classification_batch,
    sample_classification_task,
    sample_sinusoid_batch,
    sample_sinusoid_task,
)


def test_sinusoid_values():
    task = SinusoidTask(2.0, math.pi / 2)
    np.testing.assert_allclose(task(np.array([0.0, math.pi / 2])), [-2.0, 0.0], atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 20))
def test_sinusoid_sampling_ranges_and_shapes(seed, K, M):
    rng = np.random.default_rng(seed)
    task = sample_sinusoid_task(rng, 7)
    assert AMPLITUDE_RANGE[0] <= task.amplitude <= AMPLITUDE_RANGE[1]
    assert PHASE_RANGE[0] <= task.phase <= PHASE_RANGE[1]
    batch = sample_sinusoid_batch(task, K, rng, M)
    assert batch.support_x.shape == (K, 1) and batch.query_y.shape == (M, 1)
    for x in (batch.support_x, batch.query_x):
        assert x.min() >= INPUT_RANGE[0] and x.max() <= INPUT_RANGE[1]
    np.testing.assert_array_equal(batch.support_y, task(batch.support_x))


def test_sampling_is_reproducible():
    a = sample_sinusoid_batch(sample_sinusoid_task(np.random.default_rng(5)), 10, np.random.default_rng(6))
    b = sample_sinusoid_batch(sample_sinusoid_task(np.random.default_rng(5)), 10, np.random.default_rng(6))
    np.testing.assert_array_equal(a.support_x, b.support_x)
    np.testing.assert_array_equal(a.query_y, b.query_y)


def test_support_is_drawn_before_query():
    task = SinusoidTask(1.0, 0.0)
    batch = sample_sinusoid_batch(task, 4, np.random.default_rng(0), 3)
    draws = np.random.default_rng(0).uniform(-5, 5, size=7)
    np.testing.assert_array_equal(batch.support_x.ravel(), draws[:4])
    np.testing.assert_array_equal(batch.query_x.ravel(), draws[4:])


def test_bad_sizes_rejected(rng):
    with pytest.raises(ValueError):
        sample_sinusoid_batch(SinusoidTask(1.0, 0.0), 0, rng)
    with pytest.raises(ValueError):
        sample_classification_task(1, rng)
    with pytest.raises(ValueError):
        sample_classification_batch(sample_classification_task(3, rng), 1, 0, rng)


@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_class_means_are_separated(seed, n_way):
    task = sample_classification_task(n_way, np.random.default_rng(seed))
    d = np.linalg.norm(task.class_means[:, None] - task.class_means[None], axis=-1)
    assert d[np.triu_indices(n_way, 1)].min() >= 0.5


def test_rejection_budget_exhausted(rng):
    with pytest.raises(SamplingError):
        sample_classification_task(50, rng, dim=1, min_separation=0.5, budget=20)


def test_classification_batch_layout(rng):
    task = sample_classification_task(5, rng)
    batch = sample_classification_batch(task, 2, 3, rng)
    np.testing.assert_array_equal(np.bincount(batch.support_y), [2] * 5)
    np.testing.assert_array_equal(np.bincount(batch.query_y), [3] * 5)
    assert batch.support_x.shape == (10, 8)


def test_nearest_mean_solves_low_noise_tasks(rng):
    task = sample_classification_task(5, rng, noise_std=0.05)
    batch = sample_classification_batch(task, 1, 15, rng)
    pred = nearest_mean_predict(batch.support_x, batch.support_y, batch.query_x)
    assert (pred == batch.query_y).mean() > 0.95
