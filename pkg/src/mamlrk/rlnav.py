"""2D point navigation, REINFORCE, and RK meta-training for policies.

The agent starts at the origin; each step it moves by its action clipped to
[-0.1, 0.1] per axis and receives the negative distance to the goal.  An
episode ends within 0.01 of the goal or at the horizon.

Rollouts are vectorised over tasks and rollouts: arrays carry a leading
``(tasks, rollouts, time)`` shape with a mask marking live steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as ad
from .diffengine import as_array
from .models import GaussianPolicy, forward, gaussian_log_prob, split_policy
from .rkmeta import (
    ButcherTableau,
    ConfigurationError,
    StageGradMode,
    compute_stages,
    meta_gradient,
    sum_rows,
)

GOAL_RANGE = (-0.5, 0.5)
ACTION_LIMIT = 0.1
GOAL_RADIUS = 0.01
DEFAULT_HORIZON = 100
FAST_LR = 0.16
META_LR = 0.01


@dataclass(frozen=True)
class NavTask:
    goal: np.ndarray
    task_id: int = 0


@dataclass
class Trajectory:
    states: np.ndarray  # (n + 1, 2)
    actions: np.ndarray  # (n, 2), as sampled (before clipping)
    rewards: np.ndarray  # (n,)
    done_step: int  # index of the terminating transition, or the horizon

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class RolloutBatch:
    """Padded rollouts for several tasks: leading shape ``(T, R, H)``."""

    states: np.ndarray  # (T, R, H, 2) state before each action
    actions: np.ndarray  # (T, R, H, 2)
    rewards: np.ndarray  # (T, R, H), zero after termination
    mask: np.ndarray  # (T, R, H), 1.0 on live steps
    final_states: np.ndarray  # (T, R, 2)

    @property
    def returns(self) -> np.ndarray:
        """Total return per rollout, shape (T, R)."""
        return self.rewards.sum(axis=-1)

    def trajectories(self, task: int) -> list[Trajectory]:
        out = []
        for r in range(self.states.shape[1]):
            n = int(self.mask[task, r].sum())
            states = np.concatenate([self.states[task, r, :n], self._next_state(task, r, n)])
            out.append(
                Trajectory(states, self.actions[task, r, :n].copy(), self.rewards[task, r, :n].copy(), n)
            )
        return out

    def _next_state(self, task, r, n):
        if n < self.states.shape[2]:
            return self.states[task, r, n : n + 1]
        return self.final_states[task, r][None, :]


def sample_goal(rng: np.random.Generator, task_id: int = 0) -> NavTask:
    return NavTask(rng.uniform(*GOAL_RANGE, size=2), task_id)


def clip_action(action) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=np.float64), -ACTION_LIMIT, ACTION_LIMIT)


def env_step(state, action, task: NavTask):
    """(next_state, reward, done) for one transition."""
    next_state = np.asarray(state, dtype=np.float64) + clip_action(action)
    dist = float(np.linalg.norm(next_state - task.goal))
    return next_state, -dist, dist < GOAL_RADIUS


def _stacked(params, T: int) -> np.ndarray:
    arr = as_array(params)
    if arr.ndim == 1:
        arr = np.broadcast_to(arr, (T, arr.size))
    return arr


def rollout_batch(
    policy: GaussianPolicy,
    params,
    tasks: list[NavTask],
    n_rollouts: int,
    horizon: int,
    rngs: list[np.random.Generator],
) -> RolloutBatch:
    """Roll out ``n_rollouts`` episodes per task; ``params`` may be (P,) or (T, P).

    Task ``i`` draws its exploration noise only from ``rngs[i]``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    T, R, H = len(tasks), n_rollouts, horizon
    P = _stacked(params, T)
    net, log_std = split_policy(policy, P)
    std = np.exp(log_std)[:, None, :]  # (T, 1, 2)
    goals = np.stack([t.goal for t in tasks])[:, None, :]  # (T, 1, 2)
    noise = np.stack([g.standard_normal((H, R, 2)) for g in rngs])  # (T, H, R, 2)
    states = np.zeros((T, R, H, 2))
    actions = np.zeros((T, R, H, 2))
    rewards = np.zeros((T, R, H))
    mask = np.zeros((T, R, H))
    s = np.zeros((T, R, 2))
    live = np.ones((T, R), dtype=bool)
    for t in range(H):
        mean = forward(policy.mean_net, net, s)
        a = mean + std * noise[:, t]
        nxt = s + np.clip(a, -ACTION_LIMIT, ACTION_LIMIT)
        dist = np.linalg.norm(nxt - goals, axis=-1)
        states[:, :, t] = s
        actions[:, :, t] = a
        rewards[:, :, t] = np.where(live, -dist, 0.0)
        mask[:, :, t] = live
        s = np.where(live[..., None], nxt, s)
        live = live & ~(dist < GOAL_RADIUS)
        if not live.any():
            break
    return RolloutBatch(states, actions, rewards, mask, s)


def rollout(policy: GaussianPolicy, params, task: NavTask, horizon: int, rng) -> Trajectory:
    """One episode from the origin, stopping at the goal or the horizon."""
    batch = rollout_batch(policy, params, [task], 1, horizon, [rng])
    return batch.trajectories(0)[0]


def advantages(batch: RolloutBatch, baseline: bool = True) -> np.ndarray:
    """Reward-to-go minus the per-step mean over the task's rollouts (T, R, H)."""
    togo = np.flip(np.cumsum(np.flip(batch.rewards, axis=-1), axis=-1), axis=-1)
    if not baseline:
        return togo * batch.mask
    count = batch.mask.sum(axis=1, keepdims=True)
    b = np.divide(
        (togo * batch.mask).sum(axis=1, keepdims=True),
        count,
        out=np.zeros_like(count),
        where=count > 0,
    )
    return (togo - b) * batch.mask


class Surrogate:
    """REINFORCE surrogate loss, summed over tasks; its gradient is the negative policy gradient.

    Raw form: ``-(1/R) Σ_rollouts Σ_t log π(a_t|s_t) A_t``.  With ``normalize``
    the advantages are standardised per task and the sum becomes a mean over
    live timesteps, which keeps step sizes comparable across horizons.
    Graphs are cached per (T, R*H).
    """

    def __init__(self, policy: GaussianPolicy, normalize: bool = True):
        self.policy = policy
        self.normalize = normalize
        self._graphs: dict = {}

    def graph(self, T: int, rows: int) -> ad.Graph:
        key = (T, rows)
        if key not in self._graphs:
            policy = self.policy

            def loss(p, states, actions, weights):
                logp = gaussian_log_prob(policy, p, states, actions)
                return -(logp * weights).sum()

            self._graphs[key] = ad.trace(
                loss,
                (T, policy.n_params),
                states=(T, rows, 2),
                actions=(T, rows, 2),
                weights=(T, rows),
            )
        return self._graphs[key]

    def weights(self, batch: RolloutBatch, baseline: bool = True) -> np.ndarray:
        """Per-step surrogate weights, shape (T, R, H)."""
        T, R, H = batch.mask.shape
        adv = advantages(batch, baseline)
        if not self.normalize:
            return adv / R
        live = batch.mask.sum(axis=(1, 2), keepdims=True)
        mean = adv.sum(axis=(1, 2), keepdims=True) / live
        var = (((adv - mean) * batch.mask) ** 2).sum(axis=(1, 2), keepdims=True) / live
        return (adv - mean) / (np.sqrt(var) + 1e-8) * batch.mask / live

    def inputs(self, batch: RolloutBatch, baseline: bool = True) -> dict:
        T, R, H = batch.mask.shape
        return {
            "states": batch.states.reshape(T, R * H, 2),
            "actions": batch.actions.reshape(T, R * H, 2),
            "weights": self.weights(batch, baseline).reshape(T, R * H),
        }

    def gradient(self, params, batch: RolloutBatch, baseline: bool = True) -> np.ndarray:
        T, R, H = batch.mask.shape
        return ad.gradient(
            self.graph(T, R * H), _stacked(params, T), self.inputs(batch, baseline)
        ).gradient


def reinforce_gradient(
    policy: GaussianPolicy,
    params,
    trajectories: list[Trajectory],
    baseline: bool = True,
    normalize: bool = False,
) -> np.ndarray:
    """Policy-gradient ascent direction, i.e. the descent direction of the surrogate loss.

    Averaged over ``trajectories``; the baseline is the per-step mean of the
    reward-to-go across them.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    H = max(len(t) for t in trajectories)
    R = len(trajectories)
    states = np.zeros((1, R, H, 2))
    actions = np.zeros((1, R, H, 2))
    rewards = np.zeros((1, R, H))
    mask = np.zeros((1, R, H))
    for r, tr in enumerate(trajectories):
        n = len(tr)
        states[0, r, :n] = tr.states[:n]
        actions[0, r, :n] = tr.actions
        rewards[0, r, :n] = tr.rewards
        mask[0, r, :n] = 1.0
    batch = RolloutBatch(states, actions, rewards, mask, np.zeros((1, R, 2)))
    theta = as_array(params)
    g = Surrogate(policy, normalize).gradient(theta[None, :], batch, baseline)
    return -g[0]


class NavField:
    """Descent field for a batch of navigation tasks.

    Every slope evaluation collects fresh rollouts at the requested
    parameters; the most recent batch per evaluation point is kept so that
    ``through`` can reuse the stage-1 rollouts for its inner step.
    """

    def __init__(self, policy, tasks, n_rollouts, horizon, rngs, surrogate=None, baseline=True):
        self.policy = policy
        self.tasks = list(tasks)
        self.T = len(self.tasks)
        self.R = n_rollouts
        self.H = horizon
        self.rngs = rngs
        self.surrogate = surrogate or Surrogate(policy)
        self.baseline = baseline
        self.batches: list[tuple[np.ndarray, RolloutBatch]] = []

    def collect(self, theta) -> RolloutBatch:
        batch = rollout_batch(self.policy, theta, self.tasks, self.R, self.H, self.rngs)
        self.batches.append((np.array(theta, copy=True), batch))
        return batch

    def slopes(self, theta, t=0.0, need_shift=True):
        batch = self.collect(theta)
        k = -self.surrogate.gradient(theta, batch, self.baseline)
        return k, k

    def through(self, theta, step):
        first = self._batch_at(theta)
        inner_in = self.surrogate.inputs(first, self.baseline)
        g_inner = self.surrogate.graph(self.T, self.R * self.H)
        shifted = theta - step * ad.gradient(g_inner, theta, inner_in).gradient
        second = self.collect(shifted)
        outer_in = self.surrogate.inputs(second, self.baseline)
        return -ad.grad_through_update(
            g_inner, theta, step, 1.0, inner_in, outer=g_inner, outer_inputs=outer_in
        )

    def _batch_at(self, theta) -> RolloutBatch:
        for point, batch in reversed(self.batches):
            if point.shape == theta.shape and np.array_equal(point, theta):
                return batch
        return self.collect(theta)


def task_rngs(rng: np.random.Generator, tasks: list[NavTask]) -> list[np.random.Generator]:
    """Independent per-task streams derived from one generator and the task ids."""
    base = int(rng.integers(2**63))
    return [np.random.default_rng([base, int(t.task_id)]) for t in tasks]


def meta_rl_step(
    theta,
    goal_batch: list[NavTask],
    tableau: ButcherTableau,
    h: float,
    rollouts_per_task: int,
    horizon: int,
    rng: np.random.Generator,
    policy: GaussianPolicy,
    mode: StageGradMode | str = StageGradMode.EVALUATE,
    inner_h: float | None = None,
    baseline: bool = True,
    surrogate: Surrogate | None = None,
):
    """One RK meta-update of a navigation policy; returns (new θ, field).

    Stage 1 uses rollouts at θ; stage 2 uses fresh rollouts at the adapted
    parameters.  ``inner_h`` places stage points (defaults to ``h``).
    """
    if not goal_batch:
        raise ValueError("goal batch is empty")
    if not h > 0:
        raise ConfigurationError("h must be positive")
    tasks = sorted(goal_batch, key=lambda t: t.task_id)
    theta_arr = as_array(theta)
    stacked = np.broadcast_to(theta_arr, (len(tasks), theta_arr.size)).copy()
    field_ = NavField(policy, tasks, rollouts_per_task, horizon, task_rngs(rng, tasks), surrogate, baseline)
    stages = compute_stages(field_, stacked, inner_h if inner_h is not None else h, tableau, mode)
    new = theta_arr + h * sum_rows(meta_gradient(stages, tableau))
    if not np.isfinite(new).all():
        raise ad.NumericError(-1, "meta_rl_step", new.shape)
    if hasattr(theta, "with_values"):
        new = theta.with_values(new)
    return new, field_


def adapt_and_score(
    policy: GaussianPolicy,
    theta,
    tasks: list[NavTask],
    steps: int,
    lr: float,
    n_rollouts: int,
    horizon: int,
    rng: np.random.Generator,
    surrogate: Surrogate | None = None,
    baseline: bool = True,
) -> np.ndarray:
    """Mean return per task after 0..steps REINFORCE adaptation steps, shape (steps+1, T)."""
    surrogate = surrogate or Surrogate(policy)
    tasks = sorted(tasks, key=lambda t: t.task_id)
    rngs = task_rngs(rng, tasks)
    P = np.broadcast_to(as_array(theta), (len(tasks), as_array(theta).size)).copy()
    curve = []
    for s in range(steps + 1):
        batch = rollout_batch(policy, P, tasks, n_rollouts, horizon, rngs)
        curve.append(batch.returns.mean(axis=1))
        if s < steps:
            P = P - lr * surrogate.gradient(P, batch, baseline)
    return np.stack(curve)


def oracle_action(state, goal) -> np.ndarray:
    """Straight-line move toward the goal, at most 0.1 per axis."""
    return clip_action(np.asarray(goal) - np.asarray(state))
