"""Fully connected ReLU networks, a diagonal Gaussian policy, and losses.

Every function accepts either numpy arrays (plain evaluation) or graph
``Var`` handles (recorded evaluation).  Parameters may carry leading batch
axes, e.g. ``(tasks, n_params)``, in which case each leading index is an
independent copy of the network applied to the matching slice of ``x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffengine as ad
from .diffengine import ParameterVector, Var, as_array

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_dim, *self.hidden, self.output_dim)
        if any(w < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        w = self.widths
        for i in range(len(w) - 1):
            out.append((f"W{i}", (w[i], w[i + 1])))
            out.append((f"b{i}", (w[i + 1],)))
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(d)) for _, d in self.layout())


@dataclass(frozen=True)
class GaussianPolicy:
    """Diagonal Gaussian with mean ``mean_net(state)`` and learned, state-free log-std."""

    mean_net: MlpSpec
    init_log_std: float = 0.0

    @property
    def action_dim(self) -> int:
        return self.mean_net.output_dim

    @property
    def state_dim(self) -> int:
        return self.mean_net.input_dim

    def layout(self):
        return self.mean_net.layout() + [("log_std", (self.action_dim,))]

    @property
    def n_params(self) -> int:
        return self.mean_net.n_params + self.action_dim


REGRESSION_NET = MlpSpec(1, (40, 40), 1)
NAVIGATION_POLICY = GaussianPolicy(MlpSpec(2, (100, 100), 2))


def init_params(spec: MlpSpec | GaussianPolicy, seed: int) -> ParameterVector:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, log-std at its initial value."""
    rng = np.random.default_rng(seed)
    net = spec.mean_net if isinstance(spec, GaussianPolicy) else spec
    chunks = []
    for name, dims in net.layout():
        if name.startswith("W"):
            bound = 1.0 / math.sqrt(dims[0])
            chunks.append(rng.uniform(-bound, bound, size=dims).ravel())
        else:
            chunks.append(np.zeros(dims))
    if isinstance(spec, GaussianPolicy):
        chunks.append(np.full(spec.action_dim, float(spec.init_log_std)))
    return ParameterVector(np.concatenate(chunks), spec.layout())


def _relu(h):
    return ad.relu(h) if isinstance(h, Var) else np.maximum(h, 0.0)


def _segment(params, start, dims):
    lead = params.shape[:-1]
    size = int(np.prod(dims))
    seg = params[..., start : start + size]
    return seg.reshape(tuple(lead) + tuple(dims))


def forward(spec: MlpSpec, params, x):
    """Network output for inputs ``x`` of shape ``(..., input_dim)``."""
    if not isinstance(params, Var):
        params = as_array(params)
    if not isinstance(x, Var):
        x = np.asarray(x, dtype=np.float64)
    if params.shape[-1] != spec.n_params:
        raise ValueError(f"expected {spec.n_params} parameters, got {params.shape[-1]}")
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"input has trailing dim {x.shape[-1]}, network expects {spec.input_dim}")
    single = len(x.shape) == 1
    if single:
        x = x.reshape((1, spec.input_dim))
    lead = tuple(params.shape[:-1])
    h = x
    start = 0
    n_layers = len(spec.widths) - 1
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        W = _segment(params, start, (fan_in, fan_out))
        start += fan_in * fan_out
        b = _segment(params, start, (1, fan_out))
        start += fan_out
        h = h @ W + b
        if i < n_layers - 1:
            h = _relu(h)
    if single and not lead:
        h = h.reshape((spec.output_dim,))
    return h


def mse_loss(pred, target, task_axes: int = 0):
    """Mean squared error; with ``task_axes=n`` the per-task means over the
    remaining axes are summed across the leading ``n`` axes."""
    diff = pred - target
    if isinstance(diff, Var):
        if tuple(pred.shape) != tuple(np.shape(target) if not isinstance(target, Var) else target.shape):
            raise ValueError("prediction and target shapes differ")
        sq = ad.square(diff)
        if task_axes:
            return sq.mean(axis=tuple(range(task_axes, sq.ndim))).sum()
        return sq.mean()
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    sq = (pred - target) ** 2
    if task_axes:
        return float(sq.mean(axis=tuple(range(task_axes, sq.ndim))).sum())
    return float(sq.mean())


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    return np.eye(n_classes)[labels]


def cross_entropy_loss(logits, label, task_axes: int = 0):
    """Mean ``-log softmax(logits)[label]`` with max-subtraction.

    ``label`` is an integer (or integer array) when ``logits`` is an array,
    and a one-hot array or Var of the same shape as ``logits`` when
    ``logits`` is a Var.
    """
    if isinstance(logits, Var):
        if not isinstance(label, Var):
            label = np.asarray(label)
            if label.shape != logits.shape:
                label = one_hot(label, logits.shape[-1])
        m = ad.reduce_max(logits, axis=-1)
        shifted = logits - m
        lse = ad.log(ad.exp(shifted).sum(axis=-1))
        picked = (shifted * label).sum(axis=-1)
        nll = lse - picked
        if task_axes:
            return nll.mean(axis=tuple(range(task_axes, nll.ndim))).sum()
        return nll.mean()
    logits = np.asarray(logits, dtype=np.float64)
    label_arr = np.asarray(label)
    if label_arr.shape == logits.shape:
        onehot = label_arr.astype(np.float64)
    else:
        onehot = one_hot(label_arr, logits.shape[-1])
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    nll = lse - (shifted * onehot).sum(axis=-1)
    if task_axes:
        return float(nll.mean(axis=tuple(range(task_axes, nll.ndim))).sum())
    return float(nll.mean())


def split_policy(policy: GaussianPolicy, params):
    """(mean-net params, log_std) views of policy parameters."""
    if not isinstance(params, Var):
        params = as_array(params)
    n = policy.mean_net.n_params
    return params[..., :n], params[..., n:]


def policy_mean(policy: GaussianPolicy, params, states):
    net_params, _ = split_policy(policy, params)
    return forward(policy.mean_net, net_params, states)


def gaussian_log_prob(policy: GaussianPolicy, params, state, action):
    """Log density of ``action`` given ``state``; trailing axis is the action dim.

    Returns one log-probability per leading index of ``state``/``action``.
    """
    if not isinstance(params, Var):
        params = as_array(params)
    mean = policy_mean(policy, params, state)
    _, log_std = split_policy(policy, params)
    d = policy.action_dim
    if isinstance(mean, Var):
        lead = tuple(log_std.shape[:-1])
        ls = log_std.reshape(lead + (1,) * (mean.ndim - len(lead) - 1) + (d,)) if lead else log_std
        z = (action - mean) * ad.exp(-ls)
        quad = ad.square(z).sum(axis=-1)
        return -0.5 * quad - ls.sum(axis=-1) - 0.5 * d * LOG_2PI
    lead = log_std.shape[:-1]
    ls = log_std.reshape(lead + (1,) * (mean.ndim - len(lead) - 1) + (d,)) if lead else log_std
    z = (np.asarray(action, dtype=np.float64) - mean) * np.exp(-ls)
    return -0.5 * (z * z).sum(axis=-1) - ls.sum(axis=-1) - 0.5 * d * LOG_2PI
