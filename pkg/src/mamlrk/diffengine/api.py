"""Graph-level entry points: evaluate, gradients, Hessian-vector products."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .graph import BindingError, ContractError, Graph, Tape, grad, dot
from .params import ParameterVector, as_array

PARAMS = "params"
DEFAULT_EPSILON = 1e-5


@dataclass
class GradientResult:
    value: float
    gradient: np.ndarray


def trace(fn: Callable, param_shape, **input_shapes) -> Graph:
    """Record ``fn(params, **inputs)`` into a single-output graph.

    ``param_shape`` may be an int (flat vector) or a shape tuple; the latter
    is how per-task stacked parameters of shape ``(tasks, n)`` are traced.
    """
    tape = Tape()
    if isinstance(param_shape, int):
        param_shape = (param_shape,)
    p = tape.input(PARAMS, param_shape)
    inputs = {name: tape.input(name, shape) for name, shape in input_shapes.items()}
    out = fn(p, **inputs)
    out = tape.lift(out)
    return Graph(tape, [p, *inputs.values()], [out])


def _bind(graph: Graph, params, inputs: Mapping | None, **extra) -> dict:
    bindings = dict(inputs or {})
    bindings[PARAMS] = as_array(params)
    bindings.update(extra)
    return bindings


def _scalar_output(graph: Graph) -> None:
    if len(graph.output_index) != 1 or graph.output_shapes[0] != ():
        raise ContractError(f"graph output must be a scalar, got {graph.output_shapes}")


def _placeholders(tape: Tape, graph: Graph, prefix: str = "") -> dict:
    return {
        name: tape.input(prefix + name, shape)
        for name, shape in graph.input_shapes.items()
        if name != PARAMS
    }


def evaluate(graph: Graph, params, inputs: Mapping | None = None) -> float:
    _scalar_output(graph)
    return float(graph.run(_bind(graph, params, inputs))[0])


def gradient_graph(graph: Graph) -> Graph:
    """Graph with outputs ``[loss, d loss / d params]`` (cached on ``graph``)."""
    key = "gradient"
    if key not in graph.derived:
        _scalar_output(graph)
        tape = Tape()
        p = tape.input(PARAMS, graph.input_shapes[PARAMS])
        inputs = _placeholders(tape, graph)
        (loss,) = graph.inline(tape, {PARAMS: p, **inputs})
        g = grad(loss, p)
        graph.derived[key] = Graph(tape, [p, *inputs.values()], [loss, g])
    return graph.derived[key]


def gradient(graph: Graph, params, inputs: Mapping | None = None) -> GradientResult:
    value, g = gradient_graph(graph).run(_bind(graph, params, inputs))
    return GradientResult(float(value), g)


def hvp_graph(graph: Graph) -> Graph:
    key = "hvp"
    if key not in graph.derived:
        _scalar_output(graph)
        tape = Tape()
        shape = graph.input_shapes[PARAMS]
        p = tape.input(PARAMS, shape)
        v = tape.input("direction", shape)
        inputs = _placeholders(tape, graph)
        (loss,) = graph.inline(tape, {PARAMS: p, **inputs})
        hv = grad(dot(grad(loss, p), v), p)
        graph.derived[key] = Graph(tape, [p, v, *inputs.values()], [hv])
    return graph.derived[key]


def hvp(graph: Graph, params, v, inputs: Mapping | None = None) -> np.ndarray:
    """Exact Hessian-vector product H(params) @ v."""
    theta = as_array(params)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ContractError(f"direction has shape {v.shape}, params have {theta.shape}")
    return hvp_graph(graph).run(_bind(graph, theta, inputs, direction=v))[0]


def through_update_graph(graph: Graph, outer: Graph | None = None) -> Graph:
    """Graph of ``d/dθ outer(θ - s * ∇inner(θ))`` with ``s`` an input named ``scale``.

    Inputs of ``outer`` are exposed with an ``outer:`` prefix.  Outputs are
    ``[outer loss at the updated point, gradient w.r.t. θ]``.
    """
    outer = graph if outer is None else outer
    key = ("through_update", outer)
    if key not in graph.derived:
        _scalar_output(graph)
        _scalar_output(outer)
        shape = graph.input_shapes[PARAMS]
        if outer.input_shapes[PARAMS] != shape:
            raise ContractError("inner and outer graphs take parameters of different shapes")
        tape = Tape()
        p = tape.input(PARAMS, shape)
        s = tape.input("scale", ())
        inner_in = _placeholders(tape, graph)
        outer_in = _placeholders(tape, outer, prefix="outer:")
        (inner_loss,) = graph.inline(tape, {PARAMS: p, **inner_in})
        updated = p - s * grad(inner_loss, p)
        (outer_loss,) = outer.inline(tape, {PARAMS: updated, **outer_in})
        g = grad(outer_loss, p)
        graph.derived[key] = Graph(
            tape, [p, s, *inner_in.values(), *outer_in.values()], [outer_loss, g]
        )
    return graph.derived[key]


def grad_through_update(
    graph: Graph,
    params,
    step: float,
    inner_scale: float = 1.0,
    inputs: Mapping | None = None,
    outer: Graph | None = None,
    outer_inputs: Mapping | None = None,
) -> np.ndarray:
    """Gradient w.r.t. θ of the loss evaluated after one inner gradient step.

    Computes ``∇θ L_outer(θ - step*inner_scale*∇L(θ))`` including the
    ``(I - step*inner_scale*H)`` Jacobian of the update.  With ``outer``
    omitted the same loss and inputs are used for both levels.
    """
    if not step > 0:
        raise ContractError(f"step must be positive, got {step}")
    g = through_update_graph(graph, outer)
    if outer is None and outer_inputs is None:
        outer_inputs = inputs
    bindings = _bind(graph, params, inputs, scale=float(step) * float(inner_scale))
    for name, value in (outer_inputs or {}).items():
        bindings["outer:" + name] = value
    return g.run(bindings)[1]


def finite_diff_gradient(
    loss: Callable[[np.ndarray], float], params, epsilon: float = DEFAULT_EPSILON
) -> np.ndarray:
    """Central-difference gradient of a black-box scalar function."""
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    theta = np.array(as_array(params), dtype=np.float64)
    out = np.empty_like(theta)
    flat, gflat = theta.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up = loss(theta.copy())
        flat[i] = orig - epsilon
        down = loss(theta.copy())
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * epsilon)
    return out


__all__ = [
    "BindingError",
    "GradientResult",
    "ParameterVector",
    "evaluate",
    "finite_diff_gradient",
    "grad_through_update",
    "gradient",
    "gradient_graph",
    "hvp",
    "trace",
]
