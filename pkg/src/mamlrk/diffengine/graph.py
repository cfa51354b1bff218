"""Recorded computation graphs and symbolic reverse-mode differentiation.

Computations are recorded on a :class:`Tape` by calling operations on
:class:`Var` handles.  Differentiation (:func:`grad`) appends the adjoint
computation to the same tape as ordinary nodes, so a gradient can itself be
differentiated.  Nesting is capped at :data:`MAX_ORDER`.

A :class:`Graph` is a frozen, pruned snapshot of a tape with named input
placeholders and one or more outputs.  It can be re-evaluated on fresh input
arrays of the recorded shapes, or inlined into another tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

MAX_ORDER = 2


class ContractError(ValueError):
    """Operation called outside its contract (non-scalar output, bad lengths)."""


class DepthError(ContractError):
    """Differentiation nested deeper than MAX_ORDER."""


class BindingError(ValueError):
    """Input missing or of a shape different from the recorded placeholder."""


class NumericError(FloatingPointError):
    """A node produced NaN or Inf during evaluation."""

    def __init__(self, index: int, op: str, shape: tuple[int, ...]):
        super().__init__(f"non-finite value at node {index} ({op}, shape {shape})")
        self.index = index
        self.op = op


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    shape: tuple[int, ...] = ()
    order: int = 0


# --------------------------------------------------------------------------
# shape rules


def _matmul_shape(a, b):
    if len(a) < 2 or len(b) < 2:
        raise ContractError(f"matmul needs operands of rank >= 2, got {a} and {b}")
    if a[-1] != b[-2]:
        raise ContractError(f"matmul inner dimensions differ: {a} @ {b}")
    batch = np.broadcast_shapes(a[:-2], b[:-2])
    return tuple(batch) + (a[-2], b[-1])


def _reduce_shape(shape, axis, keepdims):
    if axis is None:
        axes = tuple(range(len(shape)))
    else:
        axes = tuple(ax % len(shape) for ax in axis)
    if keepdims:
        return tuple(1 if i in axes else d for i, d in enumerate(shape))
    return tuple(d for i, d in enumerate(shape) if i not in axes)


def _sum_to(value: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = value.ndim - len(shape)
    if lead:
        value = value.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    return value


def _scatter(value, index, shape):
    out = np.zeros(shape)
    out[index] = value
    return out


def _shape_of(op: str, shapes: list[tuple[int, ...]], attrs: dict) -> tuple[int, ...]:
    if op in ("add", "sub", "mul"):
        return tuple(np.broadcast_shapes(shapes[0], shapes[1]))
    if op == "matmul":
        return _matmul_shape(shapes[0], shapes[1])
    if op == "swap":
        s = shapes[0]
        if len(s) < 2:
            raise ContractError("swap needs rank >= 2")
        return s[:-2] + (s[-1], s[-2])
    if op == "sum":
        return _reduce_shape(shapes[0], attrs["axis"], attrs["keepdims"])
    if op == "max":
        return _reduce_shape(shapes[0], attrs["axis"], True)
    if op in ("broadcast_to", "sum_to", "reshape"):
        target = attrs["shape"]
        if op == "reshape" and int(np.prod(target)) != int(np.prod(shapes[0])):
            raise ContractError(f"cannot reshape {shapes[0]} to {target}")
        if op == "broadcast_to":
            np.broadcast_shapes(shapes[0], target)
        return tuple(target)
    if op == "getitem":
        return np.empty(shapes[0], dtype=np.int8)[attrs["index"]].shape
    if op == "scatter":
        return tuple(attrs["shape"])
    # elementwise unary
    return shapes[0]


# --------------------------------------------------------------------------
# forward rules

_FORWARD: dict[str, Callable[..., np.ndarray]] = {
    "add": lambda at, a, b: a + b,
    "sub": lambda at, a, b: a - b,
    "mul": lambda at, a, b: a * b,
    "neg": lambda at, a: -a,
    "scale": lambda at, a: a * at["c"],
    "matmul": lambda at, a, b: np.matmul(a, b),
    "swap": lambda at, a: np.swapaxes(a, -1, -2),
    "relu": lambda at, a: np.maximum(a, 0.0),
    "heaviside": lambda at, a: (a > 0.0).astype(np.float64),
    "sin": lambda at, a: np.sin(a),
    "cos": lambda at, a: np.cos(a),
    "square": lambda at, a: a * a,
    "exp": lambda at, a: np.exp(a),
    "log": lambda at, a: np.log(a),
    "reciprocal": lambda at, a: 1.0 / a,
    "sum": lambda at, a: np.sum(a, axis=at["axis"], keepdims=at["keepdims"]),
    "max": lambda at, a: np.max(a, axis=at["axis"], keepdims=True),
    "broadcast_to": lambda at, a: np.broadcast_to(a, at["shape"]),
    "sum_to": lambda at, a: _sum_to(a, at["shape"]),
    "reshape": lambda at, a: np.reshape(a, at["shape"]),
    "getitem": lambda at, a: a[at["index"]],
    "scatter": lambda at, a: _scatter(a, at["index"], at["shape"]),
}


# --------------------------------------------------------------------------
# tape and handles


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._floor = 0

    def _push(self, node: Node) -> "Var":
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def input(self, name: str, shape: Sequence[int]) -> "Var":
        return self._push(Node("input", (), {"name": name}, tuple(shape), 0))

    def const(self, value: Any) -> "Var":
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        return self._push(Node("const", (), {"value": arr}, arr.shape, 0))

    def apply(self, op: str, args: Sequence["Var"], order: int = 0, **attrs) -> "Var":
        if op not in _FORWARD:
            raise ContractError(f"unknown primitive {op!r}")
        for a in args:
            if a.tape is not self:
                raise ContractError("operands recorded on different tapes")
        idx = tuple(a.idx for a in args)
        shapes = [self.nodes[i].shape for i in idx]
        shape = _shape_of(op, shapes, attrs)
        order = max([order, self._floor] + [self.nodes[i].order for i in idx])
        return self._push(Node(op, idx, attrs, shape, order))

    def lift(self, value: Any) -> "Var":
        if isinstance(value, Var):
            return value
        return self.const(value)


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "idx")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.idx]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.node.shape

    @property
    def ndim(self) -> int:
        return len(self.node.shape)

    @property
    def order(self) -> int:
        return self.node.order

    def __repr__(self) -> str:
        return f"Var({self.node.op}#{self.idx}, shape={self.shape})"

    def _binary(self, op, other, swap=False):
        other = self.tape.lift(other)
        a, b = (other, self) if swap else (self, other)
        return self.tape.apply(op, [a, b])

    def __add__(self, other):
        return self._binary("add", other)

    def __radd__(self, other):
        return self._binary("add", other, swap=True)

    def __sub__(self, other):
        return self._binary("sub", other)

    def __rsub__(self, other):
        return self._binary("sub", other, swap=True)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return self._binary("mul", other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return self._binary("mul", other, swap=True)

    def __neg__(self):
        return self.tape.apply("neg", [self])

    def __matmul__(self, other):
        return self._binary("matmul", other)

    def __rmatmul__(self, other):
        return self._binary("matmul", other, swap=True)

    def __getitem__(self, index):
        if not isinstance(index, tuple):
            index = (index,)
        return self.tape.apply("getitem", [self], index=index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# --------------------------------------------------------------------------
# public primitive wrappers


def scale(x: Var, c: float) -> Var:
    return x.tape.apply("scale", [x], c=float(c))


def relu(x: Var) -> Var:
    return x.tape.apply("relu", [x])


def heaviside(x: Var) -> Var:
    return x.tape.apply("heaviside", [x])


def sin(x: Var) -> Var:
    return x.tape.apply("sin", [x])


def cos(x: Var) -> Var:
    return x.tape.apply("cos", [x])


def square(x: Var) -> Var:
    return x.tape.apply("square", [x])


def exp(x: Var) -> Var:
    return x.tape.apply("exp", [x])


def log(x: Var) -> Var:
    return x.tape.apply("log", [x])


def reciprocal(x: Var) -> Var:
    return x.tape.apply("reciprocal", [x])


def swap(x: Var) -> Var:
    return x.tape.apply("swap", [x])


def _norm_axis(axis):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis,)
    return tuple(axis)


def reduce_sum(x: Var, axis=None, keepdims=False) -> Var:
    return x.tape.apply("sum", [x], axis=_norm_axis(axis), keepdims=bool(keepdims))


def mean(x: Var, axis=None, keepdims=False) -> Var:
    axis = _norm_axis(axis)
    axes = range(x.ndim) if axis is None else axis
    count = int(np.prod([x.shape[a] for a in axes]))
    return scale(reduce_sum(x, axis, keepdims), 1.0 / count)


def reduce_max(x: Var, axis=None) -> Var:
    """Max with keepdims; treated as a constant by differentiation."""
    return x.tape.apply("max", [x], axis=_norm_axis(axis))


def broadcast_to(x: Var, shape) -> Var:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return x.tape.apply("broadcast_to", [x], shape=shape)


def sum_to(x: Var, shape) -> Var:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return x.tape.apply("sum_to", [x], shape=shape)


def reshape(x: Var, shape) -> Var:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return x.tape.apply("reshape", [x], shape=shape)


def dot(x: Var, y: Var) -> Var:
    """Full contraction of two equally shaped operands."""
    return reduce_sum(x * y)


# --------------------------------------------------------------------------
# adjoint rules; each returns one cotangent (or None for zero) per argument


def _vjp(tape: Tape, node: Node, out: Var, args: list[Var], g: Var) -> list[Var | None]:
    op = node.op
    if op == "add":
        return [sum_to(g, args[0].shape), sum_to(g, args[1].shape)]
    if op == "sub":
        return [sum_to(g, args[0].shape), sum_to(-g, args[1].shape)]
    if op == "mul":
        a, b = args
        return [sum_to(g * b, a.shape), sum_to(g * a, b.shape)]
    if op == "neg":
        return [-g]
    if op == "scale":
        return [scale(g, node.attrs["c"])]
    if op == "matmul":
        a, b = args
        return [sum_to(g @ swap(b), a.shape), sum_to(swap(a) @ g, b.shape)]
    if op == "swap":
        return [swap(g)]
    if op == "relu":
        return [g * heaviside(args[0])]
    if op in ("heaviside", "max"):
        return [None]
    if op == "sin":
        return [g * cos(args[0])]
    if op == "cos":
        return [-(g * sin(args[0]))]
    if op == "square":
        return [g * scale(args[0], 2.0)]
    if op == "exp":
        return [g * out]
    if op == "log":
        return [g * reciprocal(args[0])]
    if op == "reciprocal":
        return [-(g * square(out))]
    if op == "sum":
        a = args[0]
        kept = _reduce_shape(a.shape, node.attrs["axis"], True)
        return [broadcast_to(reshape(g, kept), a.shape)]
    if op == "broadcast_to":
        return [sum_to(g, args[0].shape)]
    if op == "sum_to":
        return [broadcast_to(g, args[0].shape)]
    if op == "reshape":
        return [reshape(g, args[0].shape)]
    if op == "getitem":
        return [tape.apply("scatter", [g], index=node.attrs["index"], shape=args[0].shape)]
    if op == "scatter":
        return [tape.apply("getitem", [g], index=node.attrs["index"])]
    raise ContractError(f"no adjoint rule for {op!r}")


def grad(y: Var, x: Var) -> Var:
    """Symbolic gradient of scalar ``y`` with respect to ``x``.

    The adjoint nodes are appended to the tape, so the result can take part
    in further computation and be differentiated once more.
    """
    tape = y.tape
    if x.tape is not tape:
        raise ContractError("y and x live on different tapes")
    if y.shape != ():
        raise ContractError(f"gradient needs a scalar output, got shape {y.shape}")
    nodes = tape.nodes
    order = max(n.order for n in _ancestor_nodes(tape, y.idx)) + 1
    if order > MAX_ORDER:
        raise DepthError(
            f"differentiation depth {order} exceeds the supported maximum {MAX_ORDER}"
        )

    # nodes on a path x -> y
    live = _ancestors(tape, y.idx)
    depends = {x.idx}
    for i in range(x.idx + 1, y.idx + 1):
        if i in live and any(a in depends for a in nodes[i].args):
            depends.add(i)
    if y.idx not in depends:
        return tape.const(np.zeros(x.shape))

    saved, tape._floor = tape._floor, order
    try:
        adjoint: dict[int, Var] = {y.idx: tape.const(1.0)}
        for i in range(y.idx, x.idx, -1):
            g = adjoint.pop(i, None)
            if g is None or i not in depends:
                continue
            node = nodes[i]
            args = [Var(tape, a) for a in node.args]
            for a, ga in zip(node.args, _vjp(tape, node, Var(tape, i), args, g)):
                if ga is None or a not in depends:
                    continue
                prev = adjoint.get(a)
                adjoint[a] = ga if prev is None else prev + ga
        result = adjoint.get(x.idx)
        if result is None:
            result = tape.const(np.zeros(x.shape))
        # force the result to carry the differentiation order
        if result.order < order:
            result = tape.apply("scale", [result], c=1.0)
        return result
    finally:
        tape._floor = saved


def _ancestors(tape: Tape, idx: int) -> set[int]:
    seen = {idx}
    stack = [idx]
    nodes = tape.nodes
    while stack:
        for a in nodes[stack.pop()].args:
            if a not in seen:
                seen.add(a)
                stack.append(a)
    return seen


def _ancestor_nodes(tape: Tape, idx: int):
    return (tape.nodes[i] for i in _ancestors(tape, idx))


# --------------------------------------------------------------------------
# frozen graphs


class Graph:
    """Pruned, re-evaluable snapshot of a tape.

    ``inputs`` maps placeholder names to shapes; ``outputs`` lists the output
    node shapes in order.  Nodes are stored in topological (recording) order.
    """

    def __init__(self, tape: Tape, inputs: Sequence[Var], outputs: Sequence[Var]):
        keep: set[int] = set()
        for out in outputs:
            keep |= _ancestors(tape, out.idx)
        for inp in inputs:
            keep.add(inp.idx)
        order = sorted(keep)
        remap = {old: new for new, old in enumerate(order)}
        self.nodes: list[Node] = []
        for old in order:
            n = tape.nodes[old]
            self.nodes.append(Node(n.op, tuple(remap[a] for a in n.args), n.attrs, n.shape, n.order))
        self.input_index: dict[str, int] = {}
        for inp in inputs:
            name = tape.nodes[inp.idx].attrs.get("name")
            if tape.nodes[inp.idx].op != "input":
                raise ContractError("graph inputs must be placeholders")
            self.input_index[name] = remap[inp.idx]
        for i, n in enumerate(self.nodes):
            if n.op == "input" and i not in self.input_index.values():
                raise BindingError(f"placeholder {n.attrs['name']!r} is not a declared input")
        self.output_index = [remap[o.idx] for o in outputs]
        self.order = max((n.order for n in self.nodes), default=0)
        # values no longer needed after node i are released there
        last_use = {}
        for i, n in enumerate(self.nodes):
            for a in n.args:
                last_use[a] = i
        keep_alive = set(self.output_index)
        release: list[list[int]] = [[] for _ in self.nodes]
        for a, i in last_use.items():
            if a not in keep_alive:
                release[i].append(a)
        self._plan = [
            (n.op, _FORWARD.get(n.op), n.args, n.attrs, tuple(release[i]))
            for i, n in enumerate(self.nodes)
        ]
        self.derived: dict[Any, "Graph"] = {}

    @property
    def input_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: self.nodes[i].shape for k, i in self.input_index.items()}

    @property
    def output_shapes(self) -> list[tuple[int, ...]]:
        return [self.nodes[i].shape for i in self.output_index]

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, bindings: dict[str, Any]) -> list[np.ndarray]:
        """Evaluate all outputs for the given input arrays."""
        values: list[Any] = [None] * len(self.nodes)
        missing = set(self.input_index) - set(bindings)
        if missing:
            raise BindingError(f"missing inputs: {sorted(missing)}")
        extra = set(bindings) - set(self.input_index)
        if extra:
            raise BindingError(f"unknown inputs: {sorted(extra)}")
        for name, i in self.input_index.items():
            arr = np.asarray(bindings[name], dtype=np.float64)
            if arr.shape != self.nodes[i].shape:
                raise BindingError(
                    f"input {name!r} has shape {arr.shape}, graph expects {self.nodes[i].shape}"
                )
            values[i] = arr
        for i, (op, fn, args, attrs, release) in enumerate(self._plan):
            if op == "input":
                continue
            if op == "const":
                values[i] = attrs["value"]
                continue
            v = fn(attrs, *[values[a] for a in args])
            if not np.isfinite(v).all():
                raise NumericError(i, op, np.shape(v))
            values[i] = v
            for a in release:
                values[a] = None
        return [np.array(values[i], dtype=np.float64) for i in self.output_index]

    def inline(self, tape: Tape, bindings: dict[str, Var]) -> list[Var]:
        """Replay this graph onto ``tape`` with placeholders replaced by ``bindings``."""
        vars_: list[Var | None] = [None] * len(self.nodes)
        for name, i in self.input_index.items():
            if name not in bindings:
                raise BindingError(f"missing binding for {name!r}")
            v = bindings[name]
            if v.shape != self.nodes[i].shape:
                raise BindingError(
                    f"binding {name!r} has shape {v.shape}, graph expects {self.nodes[i].shape}"
                )
            vars_[i] = v
        for i, n in enumerate(self.nodes):
            if n.op == "input":
                continue
            if n.op == "const":
                vars_[i] = tape.const(n.attrs["value"])
                continue
            vars_[i] = tape.apply(n.op, [vars_[a] for a in n.args], order=n.order, **n.attrs)
        return [vars_[i] for i in self.output_index]
