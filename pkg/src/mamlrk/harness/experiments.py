"""Seeded experiment runs: meta-training, adaptation curves and order checks."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import diffengine as ad
from ..models import (
    NAVIGATION_POLICY,
    REGRESSION_NET,
    MlpSpec,
    forward,
    init_params,
)
from ..rkmeta import (
    DEFAULT_STEPS,
    FIELDS,
    StageGradMode,
    TaskData,
    classification_binding,
    meta_direction,
    order_check,
    parse_tableau,
    regression_binding,
)
from ..rlnav import Surrogate, adapt_and_score, meta_rl_step, sample_goal
from ..tasks import (
    sample_classification_batch,
    sample_classification_task,
    sample_sinusoid_batch,
    sample_sinusoid_task,
)
from .config import ExperimentConfig

TRAIN, TEST, EVAL_NOISE = range(3)
TEST_ID_OFFSET = 10**9


class TrainingDiverged(FloatingPointError):
    """A non-finite value during a run, tagged with where it happened."""

    def __init__(self, iteration: int | None, task_ids, cause: Exception):
        ids = list(task_ids) if task_ids is not None else []
        span = f"tasks {ids[0]}..{ids[-1]}" if ids else "no tasks"
        where = f"iteration {iteration}" if iteration is not None else "evaluation"
        super().__init__(f"{where}, {span}: {cause}")
        self.iteration = iteration
        self.task_ids = ids
        self.cause = cause


@dataclass
class RunRecord:
    config: ExperimentConfig
    metric: str
    train_mean: np.ndarray
    train_std: np.ndarray
    curve_mean: np.ndarray
    curve_std: np.ndarray
    wall_clock: float
    theta: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def final(self) -> float:
        return float(self.curve_mean[-1]) if self.curve_mean.size else float("nan")


def streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for training tasks, test tasks and evaluation noise."""
    children = np.random.SeedSequence(seed).spawn(3)
    return {
        "train": np.random.default_rng(children[TRAIN]),
        "test": np.random.default_rng(children[TEST]),
        "eval": np.random.default_rng(children[EVAL_NOISE]),
    }


class Adam:
    """Adam on a maximised direction: ``step(d)`` returns the increment to add."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, direction: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(direction)
            self.v = np.zeros_like(direction)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * direction
        self.v = self.beta2 * self.v + (1 - self.beta2) * direction**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --------------------------------------------------------------------------
# supervised experiments


def network_for(cfg: ExperimentConfig) -> MlpSpec:
    if cfg.experiment == "regression":
        return REGRESSION_NET
    return MlpSpec(cfg.feature_dim, (40, 40), cfg.n_way)


def binding_for(cfg: ExperimentConfig):
    net = network_for(cfg)
    return regression_binding(net) if cfg.experiment == "regression" else classification_binding(net)


def sample_tasks(cfg: ExperimentConfig, rng: np.random.Generator, n: int, first_id: int) -> list[TaskData]:
    out = []
    for i in range(n):
        tid = first_id + i
        if cfg.experiment == "regression":
            task = sample_sinusoid_task(rng, tid)
            batch = sample_sinusoid_batch(task, cfg.shots, rng, cfg.query_size)
        else:
            task = sample_classification_task(
                cfg.n_way, rng, dim=cfg.feature_dim, noise_std=cfg.noise_std, task_id=tid
            )
            batch = sample_classification_batch(task, cfg.shots, cfg.query_size, rng)
        out.append(TaskData.from_batch(tid, batch))
    return out


def task_metric(cfg: ExperimentConfig, net: MlpSpec, P: np.ndarray, x, y) -> np.ndarray:
    """Per-task query metric: MSE for regression, accuracy for classification."""
    out = forward(net, P, x)
    if cfg.experiment == "regression":
        return ((out - y) ** 2).mean(axis=(1, 2))
    return (np.argmax(out, axis=-1) == y).mean(axis=1)


def evaluate_adaptation(cfg: ExperimentConfig, theta, tasks: list[TaskData], binding=None):
    """Per-task query metric after 0..steps plain gradient steps on the support set.

    Returns an array of shape (steps + 1, n_tasks).
    """
    binding = binding or binding_for(cfg)
    net = network_for(cfg)
    theta = ad.as_array(theta)
    xs = np.stack([t.support_x for t in tasks])
    ys = np.stack([t.support_y for t in tasks])
    xq = np.stack([t.query_x for t in tasks])
    yq = np.stack([t.query_y for t in tasks])
    P = np.broadcast_to(theta, (len(tasks), theta.size)).copy()
    lr = cfg.adaptation_rate()
    rows = []
    for s in range(cfg.adaptation_steps + 1):
        rows.append(task_metric(cfg, net, P, xq, yq))
        if s < cfg.adaptation_steps:
            P = P - lr * binding.grad(P, xs, ys)
    return np.stack(rows)


def _supervised(cfg: ExperimentConfig, rngs, progress) -> RunRecord:
    tableau = parse_tableau(cfg.tableau)
    mode = StageGradMode(cfg.mode)
    net = network_for(cfg)
    binding = binding_for(cfg)
    theta = init_params(net, cfg.seed).values
    adam = Adam(cfg.h) if cfg.optimizer == "adam" else None
    stage_h = cfg.stage_step()
    T = cfg.task_batch_size
    train_mean = np.zeros(cfg.meta_iterations)
    train_std = np.zeros(cfg.meta_iterations)
    for it in range(cfg.meta_iterations):
        tasks = sample_tasks(cfg, rngs["train"], T, it * T)
        ids = [t.task_id for t in tasks]
        try:
            xq = np.stack([t.query_x for t in tasks])
            yq = np.stack([t.query_y for t in tasks])
            m = task_metric(cfg, net, np.broadcast_to(theta, (T, theta.size)), xq, yq)
            train_mean[it], train_std[it] = m.mean(), m.std()
            d = meta_direction(theta, tasks, tableau, cfg.h, mode, binding, inner_h=stage_h)
            theta = theta + (adam.step(d) if adam else cfg.h * d)
            if not np.isfinite(theta).all():
                raise ad.NumericError(-1, "meta update", theta.shape)
        except (ad.NumericError, FloatingPointError) as exc:
            raise TrainingDiverged(it, ids, exc) from exc
        if progress:
            progress(it, train_mean[it])
    test = sample_tasks(cfg, rngs["test"], cfg.test_tasks, TEST_ID_OFFSET)
    try:
        curve = evaluate_adaptation(cfg, theta, test, binding)
    except (ad.NumericError, FloatingPointError) as exc:
        raise TrainingDiverged(None, [t.task_id for t in test], exc) from exc
    metric = "mse" if cfg.experiment == "regression" else "accuracy"
    return RunRecord(cfg, metric, train_mean, train_std, curve.mean(axis=1), curve.std(axis=1), 0.0, theta)


# --------------------------------------------------------------------------
# navigation


def sample_goals(rng: np.random.Generator, n: int, first_id: int):
    return [sample_goal(rng, first_id + i) for i in range(n)]


def evaluate_navigation(cfg: ExperimentConfig, theta, goals, rng, surrogate=None) -> np.ndarray:
    """Mean return per goal after 0..steps adaptation steps, shape (steps + 1, n_goals)."""
    return adapt_and_score(
        NAVIGATION_POLICY,
        theta,
        goals,
        cfg.adaptation_steps,
        cfg.adaptation_rate(),
        cfg.eval_rollouts,
        cfg.horizon,
        rng,
        surrogate,
    )


def _navigation(cfg: ExperimentConfig, rngs, progress) -> RunRecord:
    policy = NAVIGATION_POLICY
    tableau = parse_tableau(cfg.tableau)
    surrogate = Surrogate(policy)
    theta = init_params(policy, cfg.seed).values
    T = cfg.task_batch_size
    train_mean = np.zeros(cfg.meta_iterations)
    train_std = np.zeros(cfg.meta_iterations)
    adam = Adam(cfg.h) if cfg.optimizer == "adam" else None
    for it in range(cfg.meta_iterations):
        goals = sample_goals(rngs["train"], T, it * T)
        try:
            new, fld = meta_rl_step(
                theta, goals, tableau, cfg.h, cfg.rollouts_per_task, cfg.horizon,
                rngs["train"], policy, cfg.mode, inner_h=cfg.stage_step(), surrogate=surrogate,
            )
            if adam:
                new = theta + adam.step((new - theta) / cfg.h)
        except (ad.NumericError, FloatingPointError) as exc:
            raise TrainingDiverged(it, [g.task_id for g in goals], exc) from exc
        returns = fld.batches[0][1].returns.mean(axis=1)
        train_mean[it], train_std[it] = returns.mean(), returns.std()
        theta = new
        if progress:
            progress(it, train_mean[it])
    test = sample_goals(rngs["test"], cfg.test_tasks, TEST_ID_OFFSET)
    try:
        curve = evaluate_navigation(cfg, theta, test, rngs["eval"], surrogate)
    except (ad.NumericError, FloatingPointError) as exc:
        raise TrainingDiverged(None, [g.task_id for g in test], exc) from exc
    return RunRecord(cfg, "return", train_mean, train_std, curve.mean(axis=1), curve.std(axis=1), 0.0, theta)


# --------------------------------------------------------------------------
# order check


def order_steps(cfg: ExperimentConfig) -> np.ndarray:
    return np.logspace(np.log10(cfg.h_max), np.log10(cfg.h_min), cfg.n_steps)


def run_order_check(cfg: ExperimentConfig, tableaus=None) -> dict:
    """Fitted local-error exponent per tableau on the configured analytic field."""
    names = tableaus or [cfg.tableau]
    fld = FIELDS[cfg.field]
    steps = order_steps(cfg) if cfg.h_max is not None else np.asarray(DEFAULT_STEPS)
    return {name: order_check(fld, np.array([1.0]), parse_tableau(name), steps) for name in names}


def _order(cfg: ExperimentConfig, rngs, progress) -> RunRecord:
    res = run_order_check(cfg)[cfg.tableau]
    errors = np.asarray(res.errors, dtype=np.float64)
    return RunRecord(
        cfg, "local_error", np.zeros(0), np.zeros(0), errors, np.zeros_like(errors), 0.0,
        extra={"order": res.order, "steps": np.asarray(res.steps)},
    )


RUNNERS = {
    "regression": _supervised,
    "classification": _supervised,
    "navigation": _navigation,
    "order_check": _order,
}


def run_experiment(cfg: ExperimentConfig, progress=None) -> RunRecord:
    """Train and evaluate one configuration; ``progress(it, metric)`` is called per iteration."""
    cfg = cfg.resolved()
    start = time.perf_counter()
    with np.errstate(over="ignore", invalid="ignore"):
        record = RUNNERS[cfg.experiment](cfg, streams(cfg.seed), progress)
    record.wall_clock = time.perf_counter() - start
    return record


def baseline_pretrain(cfg: ExperimentConfig, progress=None) -> RunRecord:
    """The same run with the single-stage (Euler) tableau: plain joint training."""
    return run_experiment(cfg.with_overrides(tableau="euler"), progress)
