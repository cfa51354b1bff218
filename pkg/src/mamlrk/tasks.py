"""Task distributions p(T) and support/query data.

Sinusoid regression: ``y = amplitude * sin(x - phase)`` with amplitude in
[0.1, 5.0], phase in [0, pi] and inputs in [-5, 5].

Synthetic N-way classification: Gaussian clusters around well-separated
class means in ``[-1, 1]^dim``.  It stands in for image few-shot benchmarks
while exercising the same meta-update path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

AMPLITUDE_RANGE = (0.1, 5.0)
PHASE_RANGE = (0.0, math.pi)
INPUT_RANGE = (-5.0, 5.0)

DEFAULT_FEATURE_DIM = 8
DEFAULT_NOISE_STD = 0.2
MIN_SEPARATION = 0.5
REJECTION_BUDGET = 1000
DEFAULT_QUERY_PER_CLASS = 15


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SinusoidTask:
    amplitude: float
    phase: float
    task_id: int = 0

    def __call__(self, x):
        return self.amplitude * np.sin(np.asarray(x, dtype=np.float64) - self.phase)


@dataclass(frozen=True)
class ClassificationTask:
    n_way: int
    class_means: np.ndarray
    noise_std: float = DEFAULT_NOISE_STD
    task_id: int = 0

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]


@dataclass
class SupportQueryBatch:
    """Support and query sets of one task.

    Regression targets have shape ``(n, 1)``; classification targets are
    integer labels of shape ``(n,)``.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray

    @property
    def support(self):
        return list(zip(self.support_x, self.support_y))

    @property
    def query(self):
        return list(zip(self.query_x, self.query_y))


def sample_sinusoid_task(rng: np.random.Generator, task_id: int = 0) -> SinusoidTask:
    amplitude = rng.uniform(*AMPLITUDE_RANGE)
    phase = rng.uniform(*PHASE_RANGE)
    return SinusoidTask(float(amplitude), float(phase), task_id)


def sample_sinusoid_batch(
    task: SinusoidTask, K: int, rng: np.random.Generator, query_size: int | None = None
) -> SupportQueryBatch:
    """K support points then ``query_size`` (default K) query points, drawn in that order."""
    if K < 1:
        raise ValueError("K must be >= 1")
    M = K if query_size is None else int(query_size)
    if M < 1:
        raise ValueError("query size must be >= 1")
    xs = rng.uniform(*INPUT_RANGE, size=(K, 1))
    xq = rng.uniform(*INPUT_RANGE, size=(M, 1))
    return SupportQueryBatch(xs, task(xs), xq, task(xq))


def sample_classification_task(
    n_way: int,
    rng: np.random.Generator,
    dim: int = DEFAULT_FEATURE_DIM,
    noise_std: float = DEFAULT_NOISE_STD,
    min_separation: float = MIN_SEPARATION,
    task_id: int = 0,
    budget: int = REJECTION_BUDGET,
) -> ClassificationTask:
    """Class means uniform in [-1, 1]^dim, redrawn until all pairs are >= min_separation apart."""
    if n_way < 2:
        raise ValueError(f"n_way must be >= 2, got {n_way}")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    iu = np.triu_indices(n_way, k=1)
    for _ in range(budget):
        means = rng.uniform(-1.0, 1.0, size=(n_way, dim))
        dist = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
        if dist[iu].min() >= min_separation:
            return ClassificationTask(n_way, means, float(noise_std), task_id)
    raise SamplingError(
        f"no {n_way} means with separation {min_separation} in dim {dim} after {budget} draws"
    )


def sample_classification_batch(
    task: ClassificationTask,
    K: int,
    M: int = DEFAULT_QUERY_PER_CLASS,
    rng: np.random.Generator | None = None,
) -> SupportQueryBatch:
    """K examples per class in the support set and M per class in the query set."""
    if K < 1 or M < 1:
        raise ValueError("K and M must be >= 1")
    if rng is None:
        raise ValueError("an explicit rng is required")
    ys = np.repeat(np.arange(task.n_way), K)
    yq = np.repeat(np.arange(task.n_way), M)
    noise_s = rng.standard_normal((ys.size, task.dim))
    noise_q = rng.standard_normal((yq.size, task.dim))
    xs = task.class_means[ys] + task.noise_std * noise_s
    xq = task.class_means[yq] + task.noise_std * noise_q
    return SupportQueryBatch(xs, ys, xq, yq)


def nearest_mean_predict(support_x, support_y, query_x) -> np.ndarray:
    """Label of the closest per-class support centroid; a sanity classifier."""
    labels = np.unique(support_y)
    centroids = np.stack([support_x[support_y == c].mean(axis=0) for c in labels])
    d = np.linalg.norm(query_x[:, None, :] - centroids[None, :, :], axis=-1)
    return labels[np.argmin(d, axis=1)]
