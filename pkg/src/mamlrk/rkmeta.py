"""Runge-Kutta generalisations of the MAML meta-gradient.

Parameters are advected along the descent field ``X(θ) = -∇L(θ)`` with an
explicit Runge-Kutta step::

    θ_next = θ + h * Σ_i a_i k_i
    k_i    = X(θ + h * Σ_{j<i} q_ij k_j)

so the meta-gradient is ``Σ_i a_i k_i``.  Stages are always *added*; the
minus sign of gradient descent lives inside the field.  With the midpoint
tableau (a = (0, 1), q21 = 1/2) and stage gradients differentiated through
the inner step, one meta step is exactly a MAML step with inner rate h/2 and
outer rate h.

Two ways of forming a stage slope are supported (:class:`StageGradMode`):

* ``evaluate`` -- the gradient evaluated at the shifted point, as in a plain
  ODE integrator;
* ``differentiate`` -- the gradient with respect to θ *through* the shift,
  which is what MAML computes.  Limited to two stages.

With separate support/query data, stage points are placed with support
gradients and the combined slopes ``k_i`` use query gradients.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Protocol, Sequence

import numpy as np

from . import diffengine as ad
from .diffengine import ParameterVector, as_array

TOL = 1e-12
ERROR_FLOOR = 1e-13


class ConfigurationError(ValueError):
    pass


class StageGradMode(str, enum.Enum):
    EVALUATE = "evaluate"
    DIFFERENTIATE = "differentiate"


# --------------------------------------------------------------------------
# tableaus


@dataclass(frozen=True)
class ButcherTableau:
    """Explicit RK coefficients: weights ``a``, nodes ``p``, stage matrix ``q``."""

    name: str
    a: tuple[float, ...]
    p: tuple[float, ...]
    q: tuple[tuple[float, ...], ...]
    claimed_order: int = 2

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        object.__setattr__(self, "p", tuple(float(v) for v in self.p))
        object.__setattr__(self, "q", tuple(tuple(float(v) for v in row) for row in self.q))

    @property
    def N(self) -> int:
        return len(self.a)

    @property
    def q21(self) -> float:
        if self.N < 2:
            raise ConfigurationError(f"{self.name} has a single stage and no q21")
        return self.q[1][0]

    def describe(self) -> str:
        return f"{self.name}(a={self.a}, p={self.p}, q={self.q})"


def _rk2(name: str, a1, a2, x) -> ButcherTableau:
    return ButcherTableau(name, (a1, a2), (0.0, x), ((0.0, 0.0), (x, 0.0)), claimed_order=2)


_PRESETS: dict[str, Callable[[], ButcherTableau]] = {
    "euler": lambda: ButcherTableau("euler", (1.0,), (0.0,), ((0.0,),), claimed_order=1),
    "midpoint": lambda: _rk2("midpoint", 0.0, 1.0, 0.5),
    "heun": lambda: _rk2("heun", 0.5, 0.5, 1.0),
    "ralston": lambda: _rk2("ralston", 1 / 3, 2 / 3, 0.75),
    "itb": lambda: _rk2("itb", 2 / 3, 1 / 3, 1.5),
}
PRESET_NAMES = tuple(_PRESETS)
RK2_NAMES = ("midpoint", "heun", "ralston", "itb")


def preset(name: str) -> ButcherTableau:
    try:
        tableau = _PRESETS[name.lower()]()
    except KeyError:
        raise ConfigurationError(
            f"unknown tableau {name!r}; choose one of {', '.join(PRESET_NAMES)} or generic:x"
        ) from None
    assert not validate(tableau)
    return tableau


def generic_rk2(x: float) -> ButcherTableau:
    """Second-order family with q21 = p2 = x, a2 = 1/(2x), a1 = 1 - 1/(2x)."""
    x = float(x)
    if x == 0 or not math.isfinite(x):
        raise ConfigurationError("generic RK2 requires a finite x != 0")
    a2 = 1.0 / (2.0 * x)
    return _rk2(f"generic:{x:g}", 1.0 - a2, a2, x)


def swapped_generic_rk2(x: float) -> ButcherTableau:
    """The generic family with the two weights exchanged (a1 = 1/(2x)).

    Kept to demonstrate that this assignment breaks the order conditions
    for every x except 1.
    """
    x = float(x)
    if x == 0:
        raise ConfigurationError("x must be non-zero")
    a1 = 1.0 / (2.0 * x)
    return _rk2(f"swapped-generic:{x:g}", a1, 1.0 - a1, x)


def classical_rk4() -> ButcherTableau:
    """Classical four-stage method; evaluate mode only."""
    q = ((0, 0, 0, 0), (0.5, 0, 0, 0), (0, 0.5, 0, 0), (0, 0, 1.0, 0))
    return ButcherTableau("rk4", (1 / 6, 1 / 3, 1 / 3, 1 / 6), (0, 0.5, 0.5, 1.0), q, claimed_order=4)


def parse_tableau(spec: str) -> ButcherTableau:
    """``midpoint``, ``generic:0.75``, ``generic:3/4`` or ``rk4``."""
    text = spec.strip().lower()
    if text.startswith("generic"):
        _, _, arg = text.partition(":")
        if not arg:
            raise ConfigurationError("generic tableau needs a value, e.g. generic:0.75")
        try:
            x = float(Fraction(arg.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"bad generic parameter {arg!r}") from exc
        return generic_rk2(x)
    if text == "rk4":
        return classical_rk4()
    return preset(text)


def validate(tableau: ButcherTableau, tol: float = TOL) -> list[str]:
    """Violated tableau conditions; an empty list means the tableau is valid."""
    out: list[str] = []
    N = tableau.N
    a = np.asarray(tableau.a)
    p = np.asarray(tableau.p)
    if not 1 <= N <= 4:
        out.append(f"stage count {N} outside 1..4")
    if len(p) != N or len(tableau.q) != N or any(len(r) != N for r in tableau.q):
        out.append("a, p and q have inconsistent sizes")
        return out
    Q = np.asarray(tableau.q)
    if abs(a.sum() - 1.0) > tol:
        out.append(f"sum(a) != 1 (got {a.sum():.17g})")
    if abs(p[0]) > tol:
        out.append("p1 != 0")
    if np.any(np.abs(np.triu(Q)) > tol):
        out.append("q is not strictly lower triangular")
    for i in range(1, N):
        if abs(Q[i].sum() - p[i]) > tol:
            out.append(f"sum_j q{i + 1}j != p{i + 1}")
    if tableau.claimed_order >= 2:
        if N == 2:
            if abs(a[1] * Q[1, 0] - 0.5) > tol:
                out.append("a2*q21 != 1/2")
            if abs(a[1] * p[1] - 0.5) > tol:
                out.append("a2*p2 != 1/2")
        else:
            if abs(a @ p - 0.5) > tol:
                out.append("sum(a*p) != 1/2")
            if abs(a @ Q.sum(axis=1) - 0.5) > tol:
                out.append("sum(a*q) != 1/2")
    if tableau.claimed_order >= 3:
        if abs(a @ p**2 - 1 / 3) > tol:
            out.append("sum(a*p^2) != 1/3")
        if abs(a @ Q @ p - 1 / 6) > tol:
            out.append("sum(a*q*p) != 1/6")
    if tableau.claimed_order >= 4:
        if abs(a @ p**3 - 1 / 4) > tol:
            out.append("sum(a*p^3) != 1/4")
        if abs((a * p) @ Q @ p - 1 / 8) > tol:
            out.append("sum(a*p*q*p) != 1/8")
        if abs(a @ Q @ p**2 - 1 / 12) > tol:
            out.append("sum(a*q*p^2) != 1/12")
        if abs(a @ Q @ Q @ p - 1 / 24) > tol:
            out.append("sum(a*q*q*p) != 1/24")
    return out


# --------------------------------------------------------------------------
# fields and stages


class DescentField(Protocol):
    """Supplies descent directions ``-∇L`` at a parameter point.

    ``slopes`` returns ``(k, s)``: the combined-slope direction and the
    direction used to place later stage points (``s`` may be None when not
    requested).  ``through`` returns ``-∇θ L(θ + step * s(θ))``, the slope
    differentiated through the shift.
    """

    def slopes(self, theta: np.ndarray, t: float, need_shift: bool): ...

    def through(self, theta: np.ndarray, step: float) -> np.ndarray: ...


@dataclass
class StageSlopes:
    k: list[np.ndarray]
    eval_points: list[np.ndarray]
    shifts: list[np.ndarray | None] = field(default_factory=list)


def compute_stages(
    descent_field,
    theta,
    h: float,
    tableau: ButcherTableau,
    mode: StageGradMode | str = StageGradMode.EVALUATE,
    t: float = 0.0,
) -> StageSlopes:
    """Stage slopes k_1..k_N of one RK step of size ``h`` from ``theta``."""
    mode = StageGradMode(mode)
    if not h > 0:
        raise ConfigurationError(f"step h must be positive, got {h}")
    theta = as_array(theta)
    N = tableau.N
    Q = tableau.q
    if mode is StageGradMode.DIFFERENTIATE and N > 2:
        raise ConfigurationError(
            f"differentiate mode supports at most 2 stages ({tableau.name} has {N}); "
            "use evaluate mode for higher-stage tableaus"
        )
    ks: list[np.ndarray] = []
    shifts: list[np.ndarray | None] = []
    points: list[np.ndarray] = []
    for i in range(N):
        point = theta
        for j in range(i):
            if Q[i][j] != 0.0:
                point = point + (h * Q[i][j]) * shifts[j]
        points.append(point)
        need_shift = any(Q[m][i] != 0.0 for m in range(i + 1, N))
        if mode is StageGradMode.DIFFERENTIATE and i == 1:
            k = descent_field.through(theta, h * Q[1][0])
            s = None
        else:
            k, s = descent_field.slopes(point, t + tableau.p[i] * h, need_shift)
        ks.append(k)
        shifts.append(s)
    return StageSlopes(ks, points, shifts)


def meta_gradient(stages: StageSlopes, tableau: ButcherTableau) -> np.ndarray:
    """Σ_i a_i k_i; stages with zero weight are skipped."""
    if len(stages.k) != tableau.N:
        raise ConfigurationError(
            f"{len(stages.k)} stage slopes for a {tableau.N}-stage tableau"
        )
    out = None
    for a_i, k_i in zip(tableau.a, stages.k):
        if a_i == 0.0:
            continue
        term = k_i if a_i == 1.0 else a_i * k_i
        out = term if out is None else out + term
    if out is None:
        out = np.zeros_like(stages.k[0])
    return out


def inner_update(theta, task_grad, h: float, q21: float):
    """θ' = θ - h*q21*∇L."""
    if not h > 0:
        raise ConfigurationError("h must be positive")
    arr = as_array(theta)
    g = np.asarray(task_grad, dtype=np.float64)
    if g.shape != arr.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {arr.shape}")
    new = arr - (h * q21) * g
    return theta.with_values(new) if isinstance(theta, ParameterVector) else new


# --------------------------------------------------------------------------
# supervised task batches


@dataclass
class TaskData:
    """One sampled task with its support/query arrays."""

    task_id: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray

    @classmethod
    def from_batch(cls, task_id: int, batch) -> "TaskData":
        return cls(task_id, batch.support_x, batch.support_y, batch.query_x, batch.query_y)


class LossBinding:
    """A model plus loss, traced into graphs over per-task stacked parameters.

    ``loss_fn(params, x, y)`` must return the *sum over tasks* of the per-task
    loss, where ``params`` has shape ``(T, n_params)`` and the data carry the
    matching leading task axis.  ``encode_targets`` maps raw targets to the
    float arrays fed to the graph.  Graphs are cached per data shape.
    """

    def __init__(self, loss_fn, n_params: int, encode_targets=None, name: str = "loss"):
        self.loss_fn = loss_fn
        self.n_params = n_params
        self.encode_targets = encode_targets or (lambda y: np.asarray(y, dtype=np.float64))
        self.name = name
        self._graphs: dict = {}

    def graph(self, T: int, x_shape, y_shape) -> ad.Graph:
        key = (T, tuple(x_shape), tuple(y_shape))
        if key not in self._graphs:
            self._graphs[key] = ad.trace(
                self.loss_fn, (T, self.n_params), x=(T, *x_shape), y=(T, *y_shape)
            )
        return self._graphs[key]

    def slopes_graph(self, support: ad.Graph, query: ad.Graph) -> ad.Graph:
        """Fused graph with outputs [∇ query loss, ∇ support loss]."""
        key = ("slopes", support, query)
        if key not in self._graphs:
            tape = ad.Tape()
            p = tape.input(ad.PARAMS, (*support.input_shapes[ad.PARAMS],))
            xs = tape.input("x", support.input_shapes["x"])
            ys = tape.input("y", support.input_shapes["y"])
            xq = tape.input("outer:x", query.input_shapes["x"])
            yq = tape.input("outer:y", query.input_shapes["y"])
            (ls,) = support.inline(tape, {ad.PARAMS: p, "x": xs, "y": ys})
            (lq,) = query.inline(tape, {ad.PARAMS: p, "x": xq, "y": yq})
            self._graphs[key] = ad.Graph(
                tape, [p, xs, ys, xq, yq], [ad.grad(lq, p), ad.grad(ls, p)]
            )
        return self._graphs[key]

    def loss(self, params, x, y) -> float:
        """Summed loss over the leading task axis of numpy data."""
        ya = self.encode_targets(y)
        g = self.graph(x.shape[0], x.shape[1:], ya.shape[1:])
        return ad.evaluate(g, params, {"x": x, "y": ya})

    def grad(self, params, x, y) -> np.ndarray:
        ya = self.encode_targets(y)
        g = self.graph(x.shape[0], x.shape[1:], ya.shape[1:])
        return ad.gradient(g, params, {"x": x, "y": ya}).gradient


class SupervisedField:
    """Descent field of a stacked task batch: support data places stage points,
    query data defines the combined slopes."""

    def __init__(self, binding: LossBinding, tasks: Sequence[TaskData]):
        self.binding = binding
        self.xs = np.stack([t.support_x for t in tasks])
        self.ys = np.stack([binding.encode_targets(t.support_y) for t in tasks])
        self.xq = np.stack([t.query_x for t in tasks])
        self.yq = np.stack([binding.encode_targets(t.query_y) for t in tasks])
        T = self.T = len(tasks)
        self.support_graph = binding.graph(T, self.xs.shape[1:], self.ys.shape[1:])
        self.query_graph = binding.graph(T, self.xq.shape[1:], self.yq.shape[1:])
        self.evaluations = 0

    def _bindings(self, theta):
        return {
            ad.PARAMS: theta,
            "x": self.xs,
            "y": self.ys,
            "outer:x": self.xq,
            "outer:y": self.yq,
        }

    def slopes(self, theta, t=0.0, need_shift=True):
        self.evaluations += 1
        if not need_shift:
            g = ad.gradient(self.query_graph, theta, {"x": self.xq, "y": self.yq}).gradient
            return -g, None
        gq, gs = self.binding.slopes_graph(self.support_graph, self.query_graph).run(
            self._bindings(theta)
        )
        return -gq, -gs

    def through(self, theta, step):
        self.evaluations += 1
        g = ad.through_update_graph(self.support_graph, self.query_graph)
        b = self._bindings(theta)
        b["scale"] = float(step)
        return -g.run(b)[1]


class GraphField:
    """Descent field of one scalar-loss graph used at both levels."""

    def __init__(self, graph: ad.Graph, inputs: dict | None = None):
        self.graph = graph
        self.inputs = dict(inputs or {})
        shape = graph.input_shapes[ad.PARAMS]
        self.T = shape[0] if len(shape) == 2 else 1
        self.evaluations = 0

    def slopes(self, theta, t=0.0, need_shift=True):
        self.evaluations += 1
        k = -ad.gradient(self.graph, theta, self.inputs).gradient
        return k, k

    def through(self, theta, step):
        self.evaluations += 1
        return -ad.grad_through_update(self.graph, theta, step, 1.0, self.inputs)


def regression_binding(spec) -> LossBinding:
    from .models import forward, mse_loss

    def loss(params, x, y):
        return mse_loss(forward(spec, params, x), y, task_axes=1)

    return LossBinding(loss, spec.n_params, name="mse")


def classification_binding(spec) -> LossBinding:
    from .models import cross_entropy_loss, forward, one_hot

    n_classes = spec.output_dim

    def loss(params, x, y):
        return cross_entropy_loss(forward(spec, params, x), y, task_axes=1)

    def encode(y):
        y = np.asarray(y)
        if y.shape and y.shape[-1] == n_classes and y.dtype.kind == "f":
            return y
        return one_hot(y, n_classes)

    return LossBinding(loss, spec.n_params, encode_targets=encode, name="xent")


def _ordered(tasks: Sequence[TaskData]) -> list[TaskData]:
    return sorted(tasks, key=lambda t: t.task_id)


def sum_rows(rows: np.ndarray) -> np.ndarray:
    """Sum of the leading axis, accumulated strictly in row order."""
    total = rows[0].copy()
    for r in rows[1:]:
        total += r
    return total


def meta_direction(
    theta,
    field_or_tasks,
    tableau: ButcherTableau,
    h: float,
    mode: StageGradMode | str = StageGradMode.DIFFERENTIATE,
    binding: LossBinding | None = None,
    inner_h: float | None = None,
) -> np.ndarray:
    """Task-summed RK descent direction Σ_tasks Σ_i a_i k_i at ``theta``.

    ``field_or_tasks`` is either a ready descent field over stacked
    parameters or a list of :class:`TaskData` (requires ``binding``).
    ``inner_h`` places the stage points (defaults to ``h``).
    """
    theta = as_array(theta)
    if isinstance(field_or_tasks, (list, tuple)):
        if not field_or_tasks:
            raise ValueError("task batch is empty")
        if binding is None:
            raise ValueError("a loss binding is required for raw task data")
        field_ = SupervisedField(binding, _ordered(field_or_tasks))
        T = len(field_or_tasks)
    else:
        field_ = field_or_tasks
        T = field_.T
    stacked = np.broadcast_to(theta, (T, theta.size)).copy()
    stages = compute_stages(field_, stacked, inner_h if inner_h is not None else h, tableau, mode)
    return sum_rows(meta_gradient(stages, tableau))


def meta_step(
    theta,
    task_batch,
    tableau: ButcherTableau,
    h: float,
    mode: StageGradMode | str = StageGradMode.DIFFERENTIATE,
    binding: LossBinding | None = None,
    inner_h: float | None = None,
):
    """One outer update ``θ + h * Σ_tasks Σ_i a_i k_i``."""
    if not h > 0:
        raise ConfigurationError("h must be positive")
    d = meta_direction(theta, task_batch, tableau, h, mode, binding, inner_h)
    new = as_array(theta) + h * d
    if not np.isfinite(new).all():
        raise ad.NumericError(-1, "meta_step", new.shape)
    return theta.with_values(new) if isinstance(theta, ParameterVector) else new


# --------------------------------------------------------------------------
# order of accuracy


@dataclass(frozen=True)
class AnalyticField:
    """``dθ/dt = rhs(t, θ)`` with a closed-form flow ``exact(t, θ0)``."""

    name: str
    rhs: Callable[[float, np.ndarray], np.ndarray]
    exact: Callable[[float, np.ndarray], np.ndarray]

    def slopes(self, theta, t=0.0, need_shift=True):
        k = np.asarray(self.rhs(t, theta), dtype=np.float64)
        return k, k

    def through(self, theta, step):
        raise ConfigurationError("analytic fields have no loss to differentiate through")


FIELDS = {
    "linear": AnalyticField("linear", lambda t, y: -y, lambda t, y0: np.exp(-t) * y0),
    "nonlinear": AnalyticField(
        "nonlinear", lambda t, y: -(y**2), lambda t, y0: y0 / (1.0 + y0 * t)
    ),
    "forced": AnalyticField(
        "forced",
        lambda t, y: np.cos(t) - y,
        lambda t, y0: 0.5 * (np.cos(t) + np.sin(t)) + (y0 - 0.5) * np.exp(-t),
    ),
}


@dataclass
class OrderResult:
    tableau: str
    order: float
    steps: list[float]
    errors: list[float]
    excluded: list[float]


def one_step(field_, theta0, h: float, tableau: ButcherTableau, t0: float = 0.0) -> np.ndarray:
    stages = compute_stages(field_, theta0, h, tableau, StageGradMode.EVALUATE, t=t0)
    return as_array(theta0) + h * meta_gradient(stages, tableau)


def order_check(field_, theta0, tableau: ButcherTableau, h_list: Sequence[float]) -> OrderResult:
    """Least-squares slope of log one-step error against log h."""
    hs = [float(h) for h in h_list]
    if len(hs) < 4:
        raise ValueError("order_check needs at least 4 step sizes")
    if max(hs) / min(hs) < 100.0 * (1 - 1e-12):
        raise ValueError("step sizes must span at least two decades")
    if isinstance(field_, str):
        field_ = FIELDS[field_]
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=np.float64))
    used_h, errors, excluded = [], [], []
    for h in hs:
        err = float(np.max(np.abs(one_step(field_, theta0, h, tableau) - field_.exact(h, theta0))))
        if err < ERROR_FLOOR:
            excluded.append(h)
            continue
        used_h.append(h)
        errors.append(err)
    if len(used_h) < 2:
        raise ValueError("fewer than two step sizes left above the error floor")
    slope, _ = np.polyfit(np.log(used_h), np.log(errors), 1)
    return OrderResult(tableau.name, float(slope), used_h, errors, excluded)


DEFAULT_STEPS = tuple(np.logspace(-1, -3, 7))
