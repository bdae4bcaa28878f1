"""Dense float64 tensors with a small reverse-mode autodiff tape.

Tensors are plain ``numpy`` float64 arrays.  Every op in this module works in
two modes: called on arrays it just computes the value; called with at least
one :class:`Var` it also records a node on that variable's :class:`Tape`.
There is no global tape, so independent tapes can live side by side.

Numeric contract: ``log`` clamps inputs to ``LOG_FLOOR`` (negative inputs are
a domain error), ``softmax``/``logsumexp`` subtract the running max, ``sqrt``
has zero gradient where its output is exactly 0, and every op result is
checked to be finite.

``Tape.backward`` does not consume the tape; it can be called again, or the
tape can be dropped / ``clear()``-ed before the next forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

LOG_FLOOR = 1e-300

__all__ = [
    "LOG_FLOOR", "Var", "Tape", "TapeNode", "as_tensor", "value_of",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "transpose",
    "reshape", "exp", "log", "sqrt", "tanh", "sum", "mean", "softmax",
    "logsumexp", "concat", "take", "minimum", "maximum", "forward_op",
    "finite_diff_check",
]


def as_tensor(x) -> np.ndarray:
    """Coerce to a finite float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    return arr


def value_of(x):
    return x.value if isinstance(x, Var) else x


@dataclass
class TapeNode:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
    # positions of Var inputs inside the op's argument list
    slots: tuple[int, ...] = ()


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var(id={self.id}, op={self.tape.nodes[self.id].op}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return take(self, idx)


class Tape:
    """Ordered record of a forward pass.

    Nodes are appended in evaluation order, so parents always precede
    children and a single reverse sweep suffices.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.params: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ContractError(f"parameter {name!r} already on tape")
        v = self._push(TapeNode("param", (), as_tensor(value).copy()))
        self.params[name] = v.id
        return v

    def constant(self, value) -> Var:
        return self._push(TapeNode("const", (), as_tensor(value)))

    def record(self, op, inputs, value, vjp) -> Var:
        slots = tuple(k for k, x in enumerate(inputs) if isinstance(x, Var))
        parents = tuple(inputs[k].id for k in slots)
        return self._push(TapeNode(op, parents, value, vjp, slots))

    def _push(self, node: TapeNode) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def clear(self):
        self.nodes.clear()
        self.params.clear()

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar ``loss``; returns gradients by param name."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss must be a Var on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for nid in range(loss.id, -1, -1):
            g = adj.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                adj[nid] = g  # leaf: keep for collection below
                continue
            pgrads = node.vjp(g)
            for slot, pid in zip(node.slots, node.parents):
                pg = pgrads[slot]
                if pg is None:
                    continue
                if pid in adj:
                    adj[pid] = adj[pid] + pg
                else:
                    adj[pid] = pg
        grads = {}
        for name, pid in self.params.items():
            g = adj.get(pid)
            val = self.nodes[pid].value
            grads[name] = np.zeros_like(val) if g is None else np.asarray(g, dtype=np.float64).reshape(val.shape)
        return grads


# ---------------------------------------------------------------------------
# op machinery


def _find_tape(inputs) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands live on different tapes")
    return tape


def _apply(op, inputs, fwd, vjp):
    vals = [x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64) for x in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = np.asarray(fwd(*vals), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    tape = _find_tape(inputs)
    if tape is None:
        return out
    return tape.record(op, inputs, out, lambda g: vjp(g, out, *vals))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(np.shape(value_of(a)), np.shape(value_of(b)))
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {np.shape(value_of(a))} and {np.shape(value_of(b))} do not conform") from exc


def add(a, b):
    _check_broadcast("add", a, b)
    return _apply("add", (a, b), np.add,
                  lambda g, o, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(a, b):
    _check_broadcast("sub", a, b)
    return _apply("sub", (a, b), np.subtract,
                  lambda g, o, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def mul(a, b):
    _check_broadcast("mul", a, b)
    return _apply("mul", (a, b), np.multiply,
                  lambda g, o, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a, b):
    _check_broadcast("div", a, b)
    if np.any(np.asarray(value_of(b)) == 0):
        raise DomainError("division by zero")
    return _apply("div", (a, b), np.divide,
                  lambda g, o, x, y: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * o / y, y.shape)))


def neg(a):
    return _apply("neg", (a,), np.negative, lambda g, o, x: (-g,))


def scale(a, c: float):
    c = float(c)
    return _apply("scale", (a,), lambda x: c * x, lambda g, o, x: (c * g,))


def _mm_vjp(g, o, x, y):
    if x.ndim == 1 and y.ndim == 1:
        return g * y, g * x
    if y.ndim == 1:
        gx = np.multiply.outer(g, y)
        gy = np.einsum("...i,...ij->j", g, x) if x.ndim > 1 else g * x
        return gx, gy
    if x.ndim == 1:
        gx = np.einsum("...j,...ij->i", g, y) if g.ndim > 1 else y @ g
        gy = np.multiply.outer(x, g) if g.ndim == 1 else np.einsum("i,...j->...ij", x, g)
        return gx, _unbroadcast(gy, y.shape)
    gx = g @ np.swapaxes(y, -1, -2)
    gy = np.swapaxes(x, -1, -2) @ g
    return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)


def matmul(a, b):
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    if len(sa) == 0 or len(sb) == 0:
        raise DimensionError("matmul needs at least 1-d operands")
    k_a = sa[-1]
    k_b = sb[0] if len(sb) == 1 else sb[-2]
    if k_a != k_b:
        raise DimensionError(f"matmul: inner dimensions {sa} @ {sb} differ")
    return _apply("matmul", (a, b), np.matmul, _mm_vjp)


def transpose(a, axes=None):
    nd = np.ndim(value_of(a))
    axes = tuple(range(nd))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply("transpose", (a,), lambda x: np.transpose(x, axes),
                  lambda g, o, x: (np.transpose(g, inv),))


def reshape(a, shape):
    shape = tuple(shape)

    def fwd(x):
        try:
            return np.reshape(x, shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {x.shape} into {shape}") from exc

    return _apply("reshape", (a,), fwd, lambda g, o, x: (np.reshape(g, x.shape),))


def exp(a):
    return _apply("exp", (a,), np.exp, lambda g, o, x: (g * o,))


def log(a):
    if np.any(np.asarray(value_of(a)) < 0):
        raise DomainError("log of a negative value")
    return _apply("log", (a,), lambda x: np.log(np.maximum(x, LOG_FLOOR)),
                  lambda g, o, x: (g / np.maximum(x, LOG_FLOOR),))


def sqrt(a):
    """Square root; gradient is defined as 0 where the output is exactly 0."""
    if np.any(np.asarray(value_of(a)) < 0):
        raise DomainError("sqrt of a negative value")

    def vjp(g, o, x):
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, 0.5 * g / safe, 0.0),)

    return _apply("sqrt", (a,), np.sqrt, vjp)


def tanh(a):
    return _apply("tanh", (a,), np.tanh, lambda g, o, x: (g * (1.0 - o * o),))


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    return _apply("sum", (a,), lambda x: np.sum(x, axis=axis, keepdims=keepdims),
                  lambda g, o, x: (_expand(g, x.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims=False):
    def vjp(g, o, x):
        n = x.size if axis is None else np.prod([x.shape[k] for k in np.atleast_1d(axis)])
        return (_expand(g, x.shape, axis, keepdims) / n,)

    return _apply("mean", (a,), lambda x: np.mean(x, axis=axis, keepdims=keepdims), vjp)


def _softmax(x, axis):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _lse(x, axis, keepdims=False):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def softmax(a, axis=-1):
    def vjp(g, o, x):
        return (o * (g - np.sum(g * o, axis=axis, keepdims=True)),)

    return _apply("softmax", (a,), lambda x: _softmax(x, axis), vjp)


def logsumexp(a, axis=-1, keepdims=False):
    def vjp(g, o, x):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * _softmax(x, axis),)

    return _apply("logsumexp", (a,), lambda x: _lse(x, axis, keepdims), vjp)


def concat(xs, axis=0):
    xs = list(xs)
    shapes = [np.shape(value_of(x)) for x in xs]
    nd = len(shapes[0])
    ax = axis % nd
    for s in shapes:
        if len(s) != nd or any(s[k] != shapes[0][k] for k in range(nd) if k != ax):
            raise DimensionError(f"concat: incompatible shapes {shapes}")
    cuts = np.cumsum([s[ax] for s in shapes])[:-1]

    def vjp(g, o, *vals):
        return tuple(np.split(g, cuts, axis=ax))

    return _apply("concat", tuple(xs), lambda *v: np.concatenate(v, axis=ax), vjp)


def take(a, idx):
    """Basic or fancy indexing (the ``slice`` op); gradients scatter-add back."""
    def fwd(x):
        try:
            return x[idx]
        except IndexError as exc:
            raise DimensionError(str(exc)) from exc

    def vjp(g, o, x):
        z = np.zeros_like(x)
        np.add.at(z, idx, g)
        return (z,)

    return _apply("slice", (a,), fwd, vjp)


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first operand."""
    _check_broadcast("minimum", a, b)

    def vjp(g, o, x, y):
        first = x <= y
        return (_unbroadcast(np.where(first, g, 0.0), x.shape),
                _unbroadcast(np.where(first, 0.0, g), y.shape))

    return _apply("minimum", (a, b), np.minimum, vjp)


def maximum(a, b):
    _check_broadcast("maximum", a, b)

    def vjp(g, o, x, y):
        first = x >= y
        return (_unbroadcast(np.where(first, g, 0.0), x.shape),
                _unbroadcast(np.where(first, 0.0, g), y.shape))

    return _apply("maximum", (a, b), np.maximum, vjp)


_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "transpose": transpose, "exp": exp, "log": log, "sum": sum, "mean": mean,
    "softmax": softmax, "logsumexp": logsumexp, "sqrt": sqrt, "tanh": tanh,
    "minimum": minimum, "maximum": maximum, "neg": neg,
}


def forward_op(kind: str, inputs: Sequence, **kwargs):
    """Dispatch by name; ``concat``, ``slice``, ``scalar-scale`` and ``reshape`` take kwargs."""
    if kind == "concat":
        return concat(inputs, **kwargs)
    if kind == "slice":
        (a,) = inputs
        return take(a, kwargs["index"])
    if kind in ("scale", "scalar-scale"):
        (a,) = inputs
        return scale(a, kwargs["c"])
    if kind == "reshape":
        (a,) = inputs
        return reshape(a, kwargs["shape"])
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[dict], object], params: dict[str, np.ndarray],
                      step: float = 1e-5, wrt: Sequence[str] | None = None) -> float:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` maps a dict of parameters (Vars on the analytic pass, plain arrays on
    the probing passes) to a scalar.  Returns the max over every checked entry
    of ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    params = {k: as_tensor(v) for k, v in params.items()}
    tape = Tape()
    handles = {k: tape.param(k, v) for k, v in params.items()}
    loss = f(handles)
    grads = tape.backward(loss)
    worst = 0.0
    for name in (wrt if wrt is not None else list(params)):
        base = params[name]
        flat = base.reshape(-1)
        g = grads[name].reshape(-1)
        for k in range(flat.size):
            probe = dict(params)
            hi = flat.copy()
            hi[k] += step
            lo = flat.copy()
            lo[k] -= step
            probe[name] = hi.reshape(base.shape)
            f_hi = float(np.asarray(value_of(f(probe))))
            probe[name] = lo.reshape(base.shape)
            f_lo = float(np.asarray(value_of(f(probe))))
            numeric = (f_hi - f_lo) / (2.0 * step)
            worst = max(worst, abs(g[k] - numeric) / max(1.0, abs(numeric)))
    return worst
