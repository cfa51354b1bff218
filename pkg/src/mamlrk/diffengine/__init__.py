"""Recorded-computation differentiation engine (float64, up to second order)."""
from .api import (
    DEFAULT_EPSILON,
    PARAMS,
    GradientResult,
    evaluate,
    finite_diff_gradient,
    grad_through_update,
    gradient,
    gradient_graph,
    hvp,
    hvp_graph,
    through_update_graph,
    trace,
)
from .graph import (
    MAX_ORDER,
    BindingError,
    ContractError,
    DepthError,
    Graph,
    NumericError,
    Tape,
    Var,
    broadcast_to,
    cos,
    dot,
    exp,
    grad,
    heaviside,
    log,
    mean,
    reciprocal,
    reduce_max,
    reduce_sum,
    relu,
    reshape,
    scale,
    sin,
    square,
    sum_to,
    swap,
)
from .params import ParameterVector, as_array
