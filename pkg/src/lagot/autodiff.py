"""Small reverse-mode differentiation engine over float64 numpy arrays.

Operations are recorded on a :class:`Tape` as they execute.  Every op
function also accepts plain arrays, in which case it simply computes the
numpy result and nothing is recorded, so model code is written once and
runs both with and without gradients::

    tape = Tape()
    x = tape.input(np.array([3.0, 4.0]))
    out = ad.sum(x * x)
    (dx,) = tape.gradient(out, [x])     # -> [6, 8]

A recorded tape can be replayed on new inputs with :func:`forward` and
differentiated with :func:`gradient`; neither call mutates the tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Tape", "Var", "ShapeError", "TapeError",
    "forward", "gradient", "value_of",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "dot",
    "sum", "concat", "getitem", "reshape", "transpose",
    "leaky_relu", "relu", "mlp", "sigmoid", "tanh", "exp", "log", "sin", "cos",
    "square", "sqrt", "reciprocal", "step",
]


class TapeError(ValueError):
    pass


class ShapeError(TapeError):
    def __init__(self, node: int, op: str, expected, got):
        self.node, self.op, self.expected, self.got = node, op, expected, got
        super().__init__(f"node {node} ({op}): expected shape {expected}, got {got}")


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray


@dataclass(frozen=True)
class _Op:
    fwd: Callable[..., np.ndarray]
    # vjp(g, out, args, attrs) -> tuple of gradients, one per input
    vjp: Callable[..., tuple]


_OPS: dict[str, _Op] = {}


def _register(name: str, fwd, vjp) -> None:
    _OPS[name] = _Op(fwd, vjp)


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.input_ids: list[int] = []

    def _push(self, op: str, inputs: tuple[int, ...], attrs: dict, value: np.ndarray) -> "Var":
        self.nodes.append(_Node(op, inputs, attrs, value))
        return Var(self, len(self.nodes) - 1)

    def input(self, value) -> "Var":
        value = np.array(value, dtype=np.float64)
        var = self._push("input", (), {}, value)
        self.input_ids.append(var.idx)
        return var

    def const(self, value) -> "Var":
        return self._push("const", (), {}, np.asarray(value, dtype=np.float64))

    def gradient(self, out: "Var", wrt: Sequence["Var"]) -> list[np.ndarray]:
        """Gradient of scalar ``out`` with respect to each of ``wrt``, using recorded values."""
        self._check_owned(out, wrt)
        values = [n.value for n in self.nodes]
        return _backward(self, values, out.idx, [w.idx for w in wrt])

    def _check_owned(self, out: "Var", wrt: Sequence["Var"]) -> None:
        for v in (out, *wrt):
            if not isinstance(v, Var) or v.tape is not self or v.idx >= len(self.nodes):
                raise TapeError(f"{v!r} is not a node of this tape")

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "idx")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(node={self.idx}, shape={self.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, index): return getitem(self, index)

    @property
    def T(self): return transpose(self)

    def sum(self, axis=None): return sum(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(args: Sequence[Any]) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise TapeError("arguments belong to different tapes")
            tape = a.tape
    return tape


def _apply(op: str, args: Sequence[Any], **attrs):
    """Run ``op`` eagerly; record it if any argument lives on a tape."""
    tape = _tape_of(args)
    vals = [value_of(a) for a in args]
    out = _OPS[op].fwd(*vals, **attrs)
    if tape is None:
        return out
    ids = tuple(a.idx if isinstance(a, Var) else tape.const(a).idx for a in args)
    return tape._push(op, ids, attrs, out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

_register("add", np.add,
          lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
_register("sub", np.subtract,
          lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
_register("mul", np.multiply,
          lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))
_register("div", np.divide,
          lambda g, out, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)))
_register("neg", np.negative, lambda g, out, a: (-g,))
_register("scale", lambda a, c: a * c, lambda g, out, a, c: (g * c,))


def _matmul_vjp(g, out, a, b):
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


_register("matmul", np.matmul, _matmul_vjp)
_register("dot", np.dot, lambda g, out, a, b: (g * b, g * a))


def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _sum_vjp(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


_register("sum", _sum_fwd, _sum_vjp)


def _concat_fwd(*arrays, axis=0):
    return np.concatenate(arrays, axis=axis)


def _concat_vjp(g, out, *arrays, axis=0):
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


_register("concat", _concat_fwd, _concat_vjp)


def _getitem_vjp(g, out, a, index=None):
    full = np.zeros_like(a)
    if _has_fancy(index):
        np.add.at(full, index, g)
    else:
        full[index] = g
    return (full,)


def _has_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


_register("getitem", lambda a, index=None: a[index], _getitem_vjp)
_register("reshape", lambda a, shape=None: np.reshape(a, shape),
          lambda g, out, a, shape=None: (np.reshape(g, a.shape),))
_register("transpose", np.transpose, lambda g, out, a: (np.transpose(g),))


def _leaky_fwd(a, slope=0.01):
    # np.where is several times slower than these for slope in (0, 1)
    if 0.0 <= slope <= 1.0:
        return np.maximum(a, slope * a)
    return np.where(a > 0, a, slope * a)


def _leaky_vjp(g, out, a, slope=0.01):
    return (g * (slope + (1.0 - slope) * (a > 0)),)


def _sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


_register("leaky_relu", _leaky_fwd, _leaky_vjp)


def _dense_layers(p, sizes):
    off = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        W = p[off:off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        yield W, p[off:off + n_out]
        off += n_out


def _mlp_run(x, p, sizes, slope):
    """Output plus the layer inputs and pre-activations."""
    h = x[None] if x.ndim == 1 else x
    ins, pre = [], []
    last = len(sizes) - 2
    for k, (W, b) in enumerate(_dense_layers(p, sizes)):
        ins.append(h)
        h = h @ W + b
        pre.append(h)
        if k < last:
            h = _leaky_fwd(h, slope)
    return (h[0] if x.ndim == 1 else h), ins, pre


def _mlp_fwd(x, p, sizes=(), slope=0.01, cache=None):
    return _mlp_run(x, p, sizes, slope)[0]


def _mlp_vjp(g, out, x, p, sizes=(), slope=0.01, cache=None):
    if cache is not None and cache[0] is x and cache[1] is p:
        ins, pre = cache[2], cache[3]
    else:
        # replayed on new inputs: the recorded activations are stale
        _, ins, pre = _mlp_run(x, p, sizes, slope)
    g = g[None] if x.ndim == 1 else g
    gp = np.empty_like(p)
    off = p.size
    layers = list(_dense_layers(p, sizes))
    for k in range(len(layers) - 1, -1, -1):
        W = layers[k][0]
        if k < len(layers) - 1:
            g = _leaky_vjp(g, None, pre[k], slope)[0]
        n_in, n_out = W.shape
        off -= n_out
        gp[off:off + n_out] = g.sum(axis=0)
        off -= n_in * n_out
        gp[off:off + n_in * n_out] = (ins[k].T @ g).ravel()
        g = g @ W.T
    return (g[0] if x.ndim == 1 else g), gp


_register("mlp", _mlp_fwd, _mlp_vjp)
_register("relu", lambda a: np.maximum(a, 0.0), lambda g, out, a: (g * (a > 0),))
_register("sigmoid", _sigmoid, lambda g, out, a: (g * out * (1.0 - out),))
_register("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),))
_register("exp", np.exp, lambda g, out, a: (g * out,))
_register("log", np.log, lambda g, out, a: (g / a,))
_register("sin", np.sin, lambda g, out, a: (g * np.cos(a),))
_register("cos", np.cos, lambda g, out, a: (-g * np.sin(a),))
_register("square", np.square, lambda g, out, a: (2.0 * g * a,))
_register("sqrt", np.sqrt, lambda g, out, a: (0.5 * g / out,))
_register("reciprocal", np.reciprocal, lambda g, out, a: (-g * out * out,))
# Heaviside step (1 where a >= 0); zero derivative almost everywhere.
_register("step", lambda a: (a >= 0).astype(np.float64), lambda g, out, a: (np.zeros_like(a),))


def add(a, b): return _apply("add", (a, b))
def sub(a, b): return _apply("sub", (a, b))
def mul(a, b): return _apply("mul", (a, b))
def div(a, b): return _apply("div", (a, b))
def neg(a): return _apply("neg", (a,))
def scale(a, c: float): return _apply("scale", (a,), c=float(c))
def matmul(a, b): return _apply("matmul", (a, b))


def dot(a, b):
    if value_of(a).ndim != 1 or value_of(b).ndim != 1:
        raise TapeError("dot expects two vectors")
    return _apply("dot", (a, b))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return _apply("sum", (a,), axis=axis, keepdims=keepdims)


def concat(arrays: Sequence, axis: int = 0):
    return _apply("concat", tuple(arrays), axis=axis)


def getitem(a, index): return _apply("getitem", (a,), index=index)
def reshape(a, shape): return _apply("reshape", (a,), shape=tuple(shape))
def transpose(a): return _apply("transpose", (a,))
def leaky_relu(a, slope: float = 0.01): return _apply("leaky_relu", (a,), slope=float(slope))
def relu(a): return _apply("relu", (a,))


def mlp(x, params, sizes: Sequence[int], slope: float = 0.01):
    """Leaky-ReLU perceptron as one node; ``params`` are laid out layer by
    layer as ``W`` (``n_in x n_out``, row-major) then ``b``."""
    sizes = tuple(int(n) for n in sizes)
    slope = float(slope)
    tape = _tape_of((x, params))
    xv, pv = value_of(x), value_of(params)
    out, ins, pre = _mlp_run(xv, pv, sizes, slope)
    if tape is None:
        return out
    ids = tuple(a.idx if isinstance(a, Var) else tape.const(a).idx for a in (x, params))
    # activations are kept for the backward pass
    xv, pv = tape.nodes[ids[0]].value, tape.nodes[ids[1]].value
    return tape._push("mlp", ids, {"sizes": sizes, "slope": slope, "cache": (xv, pv, ins, pre)}, out)


def sigmoid(a): return _apply("sigmoid", (a,))
def tanh(a): return _apply("tanh", (a,))
def exp(a): return _apply("exp", (a,))
def log(a): return _apply("log", (a,))
def sin(a): return _apply("sin", (a,))
def cos(a): return _apply("cos", (a,))
def square(a): return _apply("square", (a,))
def sqrt(a): return _apply("sqrt", (a,))
def reciprocal(a): return _apply("reciprocal", (a,))
def step(a): return _apply("step", (a,))


# ---------------------------------------------------------------------------
# replay and backward passes
# ---------------------------------------------------------------------------

def _replay(tape: Tape, inputs: Sequence) -> list[np.ndarray]:
    if len(inputs) != len(tape.input_ids):
        raise TapeError(f"tape declares {len(tape.input_ids)} inputs, got {len(inputs)}")
    fed = dict(zip(tape.input_ids, inputs))
    values: list[np.ndarray] = []
    for i, node in enumerate(tape.nodes):
        if node.op == "input":
            v = np.asarray(fed[i], dtype=np.float64)
            if v.shape != node.value.shape:
                raise ShapeError(i, "input", node.value.shape, v.shape)
        elif node.op == "const":
            v = node.value
        else:
            v = _OPS[node.op].fwd(*(values[j] for j in node.inputs), **node.attrs)
            if v.shape != node.value.shape:
                raise ShapeError(i, node.op, node.value.shape, v.shape)
        values.append(v)
    return values


def _backward(tape: Tape, values: list[np.ndarray], out: int, wrt: list[int]) -> list[np.ndarray]:
    if values[out].size != 1:
        raise TapeError(f"gradient needs a scalar output, node {out} has shape {values[out].shape}")
    nodes = tape.nodes
    # only propagate along paths that reach a requested node
    needed = np.zeros(out + 1, dtype=bool)
    targets = set(wrt)
    for i in range(out + 1):
        needed[i] = i in targets or any(needed[j] for j in nodes[i].inputs)
    grads: dict[int, np.ndarray] = {out: np.ones_like(values[out])}
    for i in range(out, -1, -1):
        g = grads.pop(i, None) if i not in targets else grads.get(i)
        node = nodes[i]
        if g is None or not node.inputs or not needed[i]:
            continue
        args = [values[j] for j in node.inputs]
        parts = _OPS[node.op].vjp(g, values[i], *args, **node.attrs)
        for j, gj in zip(node.inputs, parts):
            if not needed[j]:
                continue
            grads[j] = grads[j] + gj if j in grads else gj
    return [grads.get(w, np.zeros_like(values[w])) for w in wrt]


def forward(tape: Tape, inputs: Sequence, output: Var | None = None) -> np.ndarray:
    """Replay ``tape`` on new inputs and return the output node's value.

    The output defaults to the last recorded node.
    """
    values = _replay(tape, inputs)
    return values[output.idx if output is not None else len(values) - 1]


def gradient(tape: Tape, inputs: Sequence, wrt: Sequence[Var],
             output: Var | None = None) -> list[np.ndarray]:
    """Replay ``tape`` on ``inputs`` and differentiate its scalar output."""
    out = output if output is not None else Var(tape, len(tape.nodes) - 1)
    tape._check_owned(out, wrt)
    values = _replay(tape, inputs)
    return _backward(tape, values, out.idx, [w.idx for w in wrt])
