"""Tape-based reverse-mode automatic differentiation.

Every node lives on a :class:`Tape`.  Gradients produced by :func:`grad` are
themselves nodes on the same tape, so expressions that contain input
gradients (``d model / d x``) can be differentiated again with respect to the
parameters.  This nested differentiation is what derivative-matching losses
need.

Node values are computed eagerly when a node is created.  Leaves can later be
reassigned; the tape then lazily replays every downstream node in creation
order the next time a value is read.  Training loops exploit this: the loss
and its parameter gradients are built once and replayed for every minibatch.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LEAKY_SLOPE = 0.01


class AutodiffError(Exception):
    """Base class for errors raised by the graph engine."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op: str, index: int):
        self.op = op
        self.index = index
        super().__init__(f"non-finite value produced by op '{op}' (node {index})")


class Op:
    """A primitive: numpy forward plus a backward rule written in graph ops.

    ``backward(node, g, needs)`` returns one entry per parent: a Node holding
    the vector-Jacobian product, or None when that parent needs no gradient.
    Ops with ``differentiable=False`` are piecewise constant (masks, signs);
    their derivative is zero everywhere it exists.
    """

    __slots__ = ("name", "forward", "backward", "differentiable")

    def __init__(self, name, forward, backward=None, differentiable=True):
        self.name = name
        self.forward = forward
        self.backward = backward
        self.differentiable = differentiable

    def __repr__(self):
        return f"Op({self.name})"


class Tape:
    """Append-only node store with lazy replay and checkpoint rollback."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self._valid = -1  # nodes[: _valid + 1] hold current values
        self.generation = 0
        self._memo: dict = {}  # (op, parents, attrs) -> node; ops are pure
        self.bindings: dict = {}  # id(model) -> parameter leaves
        self.bound_models: list = []

    def __len__(self):
        return len(self.nodes)

    # -- leaves ---------------------------------------------------------
    def variable(self, value, name: str | None = None) -> "Node":
        return self._leaf(value, name)

    def constant(self, value, name: str | None = None) -> "Node":
        return self._leaf(value, name)

    def _leaf(self, value, name):
        arr = np.array(value, dtype=DTYPE)
        node = Node(self, LEAF, (), {}, arr, name)
        return node

    def assign(self, leaf: "Node", value, copy: bool = True) -> None:
        """Replace a leaf's value; downstream nodes recompute on next read."""
        if leaf.op is not LEAF:
            raise AutodiffError("only leaves can be assigned")
        arr = np.array(value, dtype=DTYPE, copy=copy)
        if arr.shape != leaf._value.shape:
            raise ShapeError("assign", leaf._value.shape, arr.shape)
        leaf._value = arr
        self.invalidate(leaf.index)

    def invalidate(self, start: int = 0) -> None:
        """Mark every node from ``start`` on as stale (e.g. after in-place leaf edits)."""
        self._valid = min(self._valid, start - 1)
        self.generation += 1

    # -- checkpoints ----------------------------------------------------
    def checkpoint(self) -> int:
        return len(self.nodes)

    def rollback(self, mark: int) -> None:
        """Drop every node created after ``mark``; those nodes become unusable."""
        if mark < 0 or mark > len(self.nodes):
            raise AutodiffError(f"invalid checkpoint {mark}")
        for node in self.nodes[mark:]:
            node.tape = None
        del self.nodes[mark:]
        self._memo = {k: n for k, n in self._memo.items() if n.tape is self}
        self._valid = min(self._valid, mark - 1)

    # -- evaluation -----------------------------------------------------
    def forward(self, node: "Node") -> np.ndarray:
        if node.tape is not self:
            raise AutodiffError("node does not belong to this tape")
        if node.index > self._valid:
            self._replay(node.index)
        return node._value

    def evaluate(self, nodes: Iterable["Node"] | None = None) -> list[np.ndarray]:
        """Bring the whole tape (or the prefix covering ``nodes``) up to date."""
        nodes = list(nodes) if nodes is not None else None
        upto = len(self.nodes) - 1 if not nodes else max(n.index for n in nodes)
        if upto > self._valid:
            self._replay(upto)
        return [n._value for n in nodes] if nodes is not None else []

    def _replay(self, upto: int) -> None:
        nodes = self.nodes
        start = self._valid + 1
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):  # reported below instead
            for i in range(start, upto + 1):
                n = nodes[i]
                if n.op is LEAF:
                    continue
                n._value = n.op.forward(*[p._value for p in n.parents], **n.attrs)
        self._valid = upto
        if self.check_finite and not np.all(np.isfinite(nodes[upto]._value)):
            self._locate_non_finite(start, upto)

    def _locate_non_finite(self, start: int, upto: int) -> None:
        for i in range(start, upto + 1):
            n = self.nodes[i]
            if n.op is not LEAF and not np.all(np.isfinite(n._value)):
                raise NonFiniteError(n.op.name, i)
        raise NonFiniteError("leaf", upto)

    def _append(self, node: "Node") -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)
        if self._valid == node.index - 1:
            self._valid = node.index


class Node:
    __slots__ = ("tape", "index", "op", "parents", "attrs", "_value", "name")
    __array_priority__ = 1000  # make ndarray <op> Node defer to Node

    def __init__(self, tape, op, parents, attrs, value, name=None):
        self.tape = tape
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self._value = value
        self.name = name
        tape._append(self)

    @property
    def value(self) -> np.ndarray:
        if self.tape is None:
            raise AutodiffError("node was discarded by a tape rollback")
        if self.index > self.tape._valid:
            self.tape._replay(self.index)
        return self._value

    @property
    def shape(self) -> tuple:
        return self._value.shape

    @property
    def ndim(self) -> int:
        return self._value.ndim

    @property
    def is_leaf(self) -> bool:
        return self.op is LEAF

    def __repr__(self):
        label = self.name or self.op.name
        return f"Node({label}#{self.index}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


LEAF = Op("leaf", None, None, differentiable=False)


def _apply(op: Op, parents: Sequence[Node], **attrs) -> Node:
    tape = parents[0].tape
    for p in parents[1:]:
        if p.tape is not tape:
            raise AutodiffError(f"{op.name}: operands live on different tapes")
    key = (op.name, tuple(p.index for p in parents), repr(attrs))
    hit = tape._memo.get(key)
    if hit is not None:
        return hit
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value = op.forward(*[p.value for p in parents], **attrs)
    node = Node(tape, op, tuple(parents), attrs, value)
    tape._memo[key] = node
    if tape.check_finite and not np.all(np.isfinite(value)):
        raise NonFiniteError(op.name, node.index)
    return node


def _lift(x, like: Node) -> Node:
    if isinstance(x, Node):
        return x
    return like.tape.constant(x)


def _pair(a, b):
    if isinstance(a, Node):
        return a, _lift(b, a)
    return _lift(a, b), b


def _broadcast_check(name, a: Node, b: Node):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape) from None


# -- shape plumbing ---------------------------------------------------------

def _sum_to_fwd(x, shape):
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    return out.reshape(shape)


def _sum_to_bwd(node, g, needs):
    return [broadcast_to(g, node.parents[0].shape)]


def _broadcast_fwd(x, shape):
    return np.broadcast_to(x, shape).copy()


def _broadcast_bwd(node, g, needs):
    return [sum_to(g, node.parents[0].shape)]


SUM_TO = Op("sum_to", _sum_to_fwd, _sum_to_bwd)
BROADCAST = Op("broadcast_to", _broadcast_fwd, _broadcast_bwd)


def sum_to(x: Node, shape) -> Node:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _apply(SUM_TO, [x], shape=shape)


def broadcast_to(x: Node, shape) -> Node:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    return _apply(BROADCAST, [x], shape=shape)


def _reshape_bwd(node, g, needs):
    return [reshape(g, node.parents[0].shape)]


RESHAPE = Op("reshape", lambda x, shape: x.reshape(shape), _reshape_bwd)


def reshape(x: Node, shape) -> Node:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    if int(np.prod(shape)) != x._value.size:
        raise ShapeError("reshape", x.shape, shape)
    return _apply(RESHAPE, [x], shape=shape)


TRANSPOSE = Op("transpose", lambda x: x.T, lambda node, g, needs: [transpose(g)])


def transpose(x: Node) -> Node:
    if x.op is TRANSPOSE:
        return x.parents[0]
    if x.op is MATMUL:
        # keeps results contiguous: (AB)^T = B^T A^T
        a, b = x.parents
        return matmul(transpose(b), transpose(a))
    return _apply(TRANSPOSE, [x])


def _take_fwd(x, index):
    return np.array(x[index], dtype=DTYPE)


def _take_bwd(node, g, needs):
    return [scatter(g, node.attrs["index"], node.parents[0].shape)]


def _scatter_fwd(g, index, shape):
    out = np.zeros(shape, dtype=DTYPE)
    out[index] = g
    return out


def _scatter_bwd(node, g, needs):
    return [take(g, node.attrs["index"])]


TAKE = Op("take", _take_fwd, _take_bwd)
SCATTER = Op("scatter", _scatter_fwd, _scatter_bwd)


def take(x: Node, index) -> Node:
    """Basic (non-fancy) indexing: ints and slices only."""
    return _apply(TAKE, [x], index=index)


def scatter(g: Node, index, shape) -> Node:
    return _apply(SCATTER, [g], index=index, shape=tuple(shape))


def _concat_bwd(node, g, needs):
    axis = node.attrs["axis"]
    out, start = [], 0
    for p, need in zip(node.parents, needs):
        size = p.shape[axis]
        if need:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            out.append(take(g, tuple(sl)))
        else:
            out.append(None)
        start += size
    return out


CONCAT = Op("concat", lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_bwd)


def concat(xs: Sequence[Node], axis: int = -1) -> Node:
    xs = list(xs)
    axis = axis % xs[0].ndim
    try:
        np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in xs]) from None
    return _apply(CONCAT, xs, axis=axis)


# -- arithmetic -------------------------------------------------------------

def _add_bwd(node, g, needs):
    a, b = node.parents
    return [sum_to(g, a.shape) if needs[0] else None, sum_to(g, b.shape) if needs[1] else None]


def _sub_bwd(node, g, needs):
    a, b = node.parents
    return [sum_to(g, a.shape) if needs[0] else None, sum_to(neg(g), b.shape) if needs[1] else None]


def _mul_bwd(node, g, needs):
    a, b = node.parents
    return [
        sum_to(mul(g, b), a.shape) if needs[0] else None,
        sum_to(mul(g, a), b.shape) if needs[1] else None,
    ]


def _div_bwd(node, g, needs):
    a, b = node.parents
    ga = sum_to(div(g, b), a.shape) if needs[0] else None
    gb = sum_to(neg(mul(g, div(node, b))), b.shape) if needs[1] else None
    return [ga, gb]


ADD = Op("add", np.add, _add_bwd)
SUB = Op("sub", np.subtract, _sub_bwd)
MUL = Op("mul", np.multiply, _mul_bwd)
DIV = Op("div", np.divide, _div_bwd)
NEG = Op("neg", np.negative, lambda node, g, needs: [neg(g)])


def _binary(op, a, b):
    a, b = _pair(a, b)
    _broadcast_check(op.name, a, b)
    return _apply(op, [a, b])


def add(a, b) -> Node:
    return _binary(ADD, a, b)


def sub(a, b) -> Node:
    return _binary(SUB, a, b)


def mul(a, b) -> Node:
    return _binary(MUL, a, b)


def div(a, b) -> Node:
    return _binary(DIV, a, b)


def neg(x: Node) -> Node:
    return _apply(NEG, [x])


def _power_bwd(node, g, needs):
    x = node.parents[0]
    p = node.attrs["p"]
    if p == 1:
        return [g]
    return [mul(g, mul(power(x, p - 1), float(p)))]


POWER = Op("power", lambda x, p: np.power(x, p), _power_bwd)


def power(x: Node, p) -> Node:
    """Elementwise power with a constant exponent."""
    if isinstance(p, Node):
        raise TypeError("power() takes a constant exponent")
    if p == 2:
        return mul(x, x)
    return _apply(POWER, [x], p=p)


def _matmul_bwd(node, g, needs):
    a, b = node.parents
    return [matmul(g, transpose(b)) if needs[0] else None, matmul(transpose(a), g) if needs[1] else None]


MATMUL = Op("matmul", np.matmul, _matmul_bwd)


def matmul(a, b) -> Node:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _apply(MATMUL, [a, b])


def _dot_bwd(node, g, needs):
    a, b = node.parents
    return [mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None]


DOT = Op("dot", lambda a, b: np.array(np.dot(a, b), dtype=DTYPE), _dot_bwd)


def dot(a, b) -> Node:
    """Inner product of two vectors."""
    a, b = _pair(a, b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    return _apply(DOT, [a, b])


def _einsum_bwd(node, g, needs):
    spec = node.attrs["subscripts"]
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    a, b = node.parents
    return [
        einsum(f"{out},{sb}->{sa}", g, b) if needs[0] else None,
        einsum(f"{out},{sa}->{sb}", g, a) if needs[1] else None,
    ]


EINSUM = Op("einsum", lambda a, b, subscripts: np.einsum(subscripts, a, b), _einsum_bwd)


def einsum(subscripts: str, a, b) -> Node:
    """Two-operand einsum; every operand index must appear in the output or the other operand."""
    a, b = _pair(a, b)
    ins, out = subscripts.split("->")
    sa, sb = ins.split(",")
    if set(sa) - set(out) - set(sb) or set(sb) - set(out) - set(sa):
        raise AutodiffError(f"einsum '{subscripts}' sums an index private to one operand")
    try:
        np.einsum(subscripts, a.value, b.value)
    except ValueError:
        raise ShapeError("einsum", a.shape, b.shape) from None
    return _apply(EINSUM, [a, b], subscripts=subscripts)


# -- reductions -------------------------------------------------------------

def _sum_fwd(x, axis, keepdims):
    return np.array(x.sum(axis=axis, keepdims=keepdims), dtype=DTYPE)


def _sum_bwd(node, g, needs):
    x = node.parents[0]
    axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
    if axis is not None and not keepdims:
        kept = list(x.shape)
        for ax in (axis if isinstance(axis, tuple) else (axis,)):
            kept[ax] = 1
        g = reshape(g, kept)
    elif axis is None and not keepdims:
        g = reshape(g, (1,) * x.ndim)
    return [broadcast_to(g, x.shape)]


SUM = Op("sum", _sum_fwd, _sum_bwd)


def sum(x: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    if axis is not None:
        axis = tuple(a % x.ndim for a in axis) if isinstance(axis, tuple) else axis % x.ndim
    return _apply(SUM, [x], axis=axis, keepdims=keepdims)


def mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    total = sum(x, axis=axis, keepdims=keepdims)
    count = x._value.size // max(total._value.size, 1)
    return mul(total, 1.0 / count)


def _logsumexp_fwd(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def _logsumexp_bwd(node, g, needs):
    x = node.parents[0]
    return [mul(broadcast_to(g, x.shape), exp(sub(x, broadcast_to(node, x.shape))))]


LOGSUMEXP = Op("logsumexp", _logsumexp_fwd, _logsumexp_bwd)


def logsumexp(x: Node, axis: int = -1) -> Node:
    """Stable log-sum-exp, keeping the reduced axis."""
    return _apply(LOGSUMEXP, [x], axis=axis % x.ndim)


def log_softmax(x: Node, axis: int = -1) -> Node:
    return sub(x, broadcast_to(logsumexp(x, axis), x.shape))


def softmax(x: Node, axis: int = -1) -> Node:
    return exp(log_softmax(x, axis))


# -- elementwise nonlinearities ---------------------------------------------

def _relu_mask(x):
    return (x > 0).astype(DTYPE)


def _leaky_mask(x, slope):
    return np.where(x > 0, 1.0, slope)


RELU_MASK = Op("relu_mask", _relu_mask, differentiable=False)
LEAKY_MASK = Op("leaky_mask", _leaky_mask, differentiable=False)
SIGN = Op("sign", np.sign, differentiable=False)
STOP = Op("stop_gradient", lambda x: x, differentiable=False)


def stop_gradient(x: Node) -> Node:
    """Identity whose derivative is treated as zero."""
    return _apply(STOP, [x])

RELU = Op("relu", lambda x: np.maximum(x, 0.0),
          lambda node, g, needs: [mul(g, _apply(RELU_MASK, [node.parents[0]]))])
LEAKY_RELU = Op(
    "leaky_relu",
    lambda x, slope: np.where(x > 0, x, slope * x),
    lambda node, g, needs: [mul(g, _apply(LEAKY_MASK, [node.parents[0]], slope=node.attrs["slope"]))],
)
TANH = Op("tanh", np.tanh, lambda node, g, needs: [mul(g, sub(1.0, mul(node, node)))])
SIGMOID = Op(
    "sigmoid",
    lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)),
    lambda node, g, needs: [mul(g, mul(node, sub(1.0, node)))],
)
EXP = Op("exp", np.exp, lambda node, g, needs: [mul(g, node)])
LOG = Op("log", np.log, lambda node, g, needs: [div(g, node.parents[0])])
SQRT = Op("sqrt", np.sqrt, lambda node, g, needs: [div(mul(g, 0.5), node)])
SIN = Op("sin", np.sin, lambda node, g, needs: [mul(g, cos(node.parents[0]))])
COS = Op("cos", np.cos, lambda node, g, needs: [neg(mul(g, sin(node.parents[0])))])
ABS = Op("abs", np.abs, lambda node, g, needs: [mul(g, _apply(SIGN, [node.parents[0]]))])


def relu(x: Node) -> Node:
    return _apply(RELU, [x])


def leaky_relu(x: Node, slope: float = LEAKY_SLOPE) -> Node:
    return _apply(LEAKY_RELU, [x], slope=float(slope))


def tanh(x: Node) -> Node:
    return _apply(TANH, [x])


def sigmoid(x: Node) -> Node:
    return _apply(SIGMOID, [x])


def exp(x: Node) -> Node:
    return _apply(EXP, [x])


def log(x: Node) -> Node:
    if np.any(x.value <= 0):
        raise NonFiniteError("log", len(x.tape))
    return _apply(LOG, [x])


def sqrt(x: Node) -> Node:
    return _apply(SQRT, [x])


def sin(x: Node) -> Node:
    return _apply(SIN, [x])


def cos(x: Node) -> Node:
    return _apply(COS, [x])


def abs(x: Node) -> Node:  # noqa: A001
    return _apply(ABS, [x])


ACTIVATIONS: dict[str, Callable[[Node], Node]] = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


# -- differentiation --------------------------------------------------------

def forward(tape: Tape, node: Node) -> np.ndarray:
    return tape.forward(node)


def grad(output: Node, wrt: Sequence[Node]) -> list[Node]:
    """Gradient nodes of a scalar ``output`` with respect to each node in ``wrt``.

    The returned nodes are ordinary tape nodes and may be differentiated
    again.  A ``wrt`` node that ``output`` does not depend on gets a constant
    zero node of matching shape.
    """
    tape = output.tape
    if output._value.size != 1:
        raise ShapeError("grad (output must be scalar)", output.shape)
    wrt = list(wrt)
    for w in wrt:
        if w.tape is not tape:
            raise AutodiffError("grad: wrt node lives on a different tape")
    targets = {w.index for w in wrt}
    lo = min(targets)
    hi = output.index

    # Which nodes depend (differentiably) on any wrt node.
    nodes = tape.nodes
    depends = np.zeros(hi + 1, dtype=bool)
    for i in range(lo, hi + 1):
        if i in targets:
            depends[i] = True
            continue
        n = nodes[i]
        if n.op.differentiable and any(p.index >= lo and depends[p.index] for p in n.parents):
            depends[i] = True

    found: dict[int, Node] = {}
    if depends[hi]:
        pending: dict[int, list[Node]] = {hi: [tape.constant(np.ones_like(output._value))]}
        for i in range(hi, lo - 1, -1):
            parts = pending.pop(i, None)
            if parts is None:
                continue
            g = parts[0]
            for extra in parts[1:]:
                g = add(g, extra)
            if i in targets:
                found[i] = g
            n = nodes[i]
            if n.op is LEAF or not n.op.differentiable:
                continue
            needs = tuple(p.index >= lo and bool(depends[p.index]) for p in n.parents)
            for p, gp in zip(n.parents, n.op.backward(n, g, needs)):
                if gp is not None and depends[p.index]:
                    pending.setdefault(p.index, []).append(gp)

    result = []
    for w in wrt:
        g = found.get(w.index)
        if g is None:
            g = tape.constant(np.zeros_like(w._value))
        result.append(g)
    return result


def hvp(output: Node, x: Node, v) -> Node:
    """Hessian-vector product of scalar ``output`` w.r.t. ``x`` along ``v``.

    Computed by differentiating ``<grad(output, x), v>``; ``v`` may be an
    array or a node with the shape of ``x``.
    """
    v_node = v if isinstance(v, Node) else x.tape.constant(v)
    if v_node.shape != x.shape:
        raise ShapeError("hvp", x.shape, v_node.shape)
    (g,) = grad(output, [x])
    return grad(sum(mul(g, v_node)), [x])[0]


def fd_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=DTYPE)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return out


def rel_error(a, b, floor: float = 1e-8) -> float:
    """Max elementwise relative error with an absolute floor for near-zero entries."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
