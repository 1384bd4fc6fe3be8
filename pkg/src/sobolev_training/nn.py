"""Feed-forward networks on the autodiff tape, plus Adam / SGD-momentum."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError, Tape

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid")
HEADS = ("linear", "log_softmax")


class Mlp:
    """Dense network ``x -> act(x W0 + b0) -> ... -> head(h Wk + bk)``.

    Parameters are plain float64 arrays owned by the model.  ``bind(tape)``
    exposes them as leaves of a tape; the leaves share memory with the
    arrays, so in-place optimizer updates are visible after
    ``tape.invalidate()``.
    """

    def __init__(self, layer_sizes, activation="relu", head="linear", weights=None, biases=None):
        layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(layer_sizes) < 2 or any(s <= 0 for s in layer_sizes):
            raise ValueError(f"layer sizes must be >= 2 positive integers, got {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        self.head = head
        if weights is None:
            weights = [np.zeros((a, b)) for a, b in zip(layer_sizes[:-1], layer_sizes[1:])]
        if biases is None:
            biases = [np.zeros(b) for b in layer_sizes[1:]]
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (layer_sizes[i], layer_sizes[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ShapeError(f"layer {i}", expect, w.shape)

    @property
    def params(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def num_params(self) -> int:
        return int(np.sum([p.size for p in self.params]))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def bind(self, tape: Tape) -> list[Node]:
        return bind_params(self, tape)

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.activation, self.head,
                   [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def set_params(self, values) -> None:
        for p, v in zip(self.params, values):
            p[...] = v

    def __call__(self, x: Node) -> Node:
        return forward_mlp(self, x)


def bind_params(owner, tape: Tape) -> list[Node]:
    """Parameter leaves of ``owner`` on ``tape``, created once per tape.

    The leaves share storage with ``owner.params``.
    """
    nodes = tape.bindings.get(id(owner))
    if nodes is None or nodes[0].tape is not tape:
        nodes = []
        for p in owner.params:
            leaf = tape.variable(p)
            leaf._value = p
            nodes.append(leaf)
        tape.bindings[id(owner)] = nodes
        tape.bound_models.append(owner)  # keeps id() stable while bound
    return nodes


def init_mlp(layer_sizes, seed: int, activation: str = "relu", head: str = "linear") -> Mlp:
    """He-uniform weights for (leaky) ReLU, Glorot-uniform otherwise; zero biases."""
    model = Mlp(layer_sizes, activation, head)
    rng = np.random.default_rng(seed)
    for w in model.weights:
        fan_in, fan_out = w.shape
        if activation in ("relu", "leaky_relu"):
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return model


def forward_mlp(mlp: Mlp, x: Node) -> Node:
    """Network output for a batch ``(N, d)`` or a single point ``(d,)``."""
    single = x.ndim == 1
    if x.shape[-1] != mlp.in_dim or x.ndim not in (1, 2):
        raise ShapeError("forward_mlp", (mlp.in_dim,), x.shape)
    h = ad.reshape(x, (1, mlp.in_dim)) if single else x
    params = mlp.bind(x.tape)
    act = ad.ACTIVATIONS[mlp.activation]
    n_layers = len(mlp.weights)
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        h = ad.add(ad.matmul(h, w), b)
        if i < n_layers - 1:
            h = act(h)
    if mlp.head == "log_softmax":
        h = ad.log_softmax(h, axis=-1)
    return ad.reshape(h, (mlp.out_dim,)) if single else h


def input_gradient(mlp, x: Node, projection=None) -> Node:
    """d model / d x for a scalar-output model, or of ``<model, projection>``.

    For a batch the rows are independent, so the gradient of the summed
    output gives every per-example input gradient at once.
    """
    out = mlp(x)
    if projection is None:
        if out.shape[-1] != 1:
            raise ValueError(f"model output has {out.shape[-1]} components; pass a projection")
        scalar = ad.sum(out)
    else:
        scalar = ad.sum(ad.mul(out, projection))
    return ad.grad(scalar, [x])[0]


def predict(mlp: Mlp, x: np.ndarray, with_grad: bool = False):
    """Evaluate a model on a numpy batch; optionally also its input gradient."""
    tape = Tape()
    xn = tape.constant(x)
    out = mlp(xn)
    if not with_grad:
        return out.value.copy()
    g = ad.grad(ad.sum(out), [xn])[0]
    return out.value.copy(), g.value.copy()


# -- optimizers -------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    step_count: int = 0
    moments: list = field(default_factory=list)
    second_moments: list = field(default_factory=list)


def make_optimizer(kind: str, params, learning_rate: float, **kwargs) -> OptimizerState:
    if kind not in ("adam", "sgd_momentum"):
        raise ValueError(f"unknown optimizer {kind!r}")
    state = OptimizerState(kind, float(learning_rate), **kwargs)
    state.moments = [np.zeros_like(p) for p in params]
    if kind == "adam":
        state.second_moments = [np.zeros_like(p) for p in params]
    return state


def optimizer_step(state: OptimizerState, params, grads) -> None:
    """Apply one update to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.moments):
        raise ShapeError("optimizer_step", (len(params),), (len(grads),))
    for p, g, m in zip(params, grads, state.moments):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError("optimizer_step", p.shape, g.shape)
    state.step_count += 1
    lr = state.learning_rate
    if state.kind == "sgd_momentum":
        for p, g, m in zip(params, grads, state.moments):
            m *= state.momentum
            m += g
            p -= lr * m
        return
    b1, b2, t = state.beta1, state.beta2, state.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.moments, state.second_moments):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- checkpoints ------------------------------------------------------------
# Layout (numpy .npz, all arrays float64 unless noted):
#   format         : str  "sobolev-mlp/1"
#   layer_sizes    : int64 vector
#   activation     : str
#   head           : str
#   W{i}, b{i}     : layer i weight (in, out) and bias (out,)

CHECKPOINT_FORMAT = "sobolev-mlp/1"


def save_mlp(mlp: Mlp, path) -> Path:
    path = Path(path)
    arrays = {
        "format": np.array(CHECKPOINT_FORMAT),
        "layer_sizes": np.array(mlp.layer_sizes, dtype=np.int64),
        "activation": np.array(mlp.activation),
        "head": np.array(mlp.head),
    }
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_mlp(path) -> Mlp:
    with np.load(path, allow_pickle=False) as data:
        if str(data["format"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {data['format']}")
        sizes = tuple(int(s) for s in data["layer_sizes"])
        n = len(sizes) - 1
        return Mlp(sizes, str(data["activation"]), str(data["head"]),
                   [data[f"W{i}"] for i in range(n)], [data[f"b{i}"] for i in range(n)])


class TrainStep:
    """A loss graph compiled once and replayed for every update.

    Data leaves are reassigned by the caller between steps; ``step`` replays
    the loss and its parameter gradients and applies the optimizer.
    """

    def __init__(self, loss: Node, models, optimizer: OptimizerState | None = None):
        self.tape = loss.tape
        self.loss = loss
        self.models = list(models)
        self.arrays = [p for m in self.models for p in m.params]
        self.nodes = [n for m in self.models for n in m.bind(self.tape)]
        self.grads = ad.grad(loss, self.nodes)
        self.optimizer = optimizer

    def gradients(self) -> list[np.ndarray]:
        self.tape.invalidate()
        return self.tape.evaluate(self.grads)

    def step(self) -> float:
        """One optimizer update; returns the loss before the update."""
        grads = self.gradients()
        value = float(self.loss.value)
        optimizer_step(self.optimizer, self.arrays, grads)
        self.tape.invalidate()
        return value
