"""Decoupled training with synthetic gradients on a generated classification task.

A feed-forward classifier is cut at one or more layer boundaries.  Each
upstream part is updated with a synthetic gradient ``SG(h, y)`` standing in
for ``dL/dh``; the final part sees the true cross-entropy.  Four estimators
are available:

``noprop``
    no signal crosses a boundary; upstream parts stay at their initialisation.
``direct_sg``
    an MLP regresses ``dL/dh`` directly.
``critic``
    a loss model ``m(h, y) = CE(p(h, y), y)`` is fitted to the per-example
    loss and ``SG = dm/dh``.
``sobolev``
    the same loss model, fitted to the loss value and to ``dL/dh``.

Module targets (per-example loss and its gradient at the boundary) come from
the true downstream computation on the current batch.  Updates are
synchronous: every step computes the main-network and SG-module gradients on
one batch, then applies both.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError, Tape
from .nn import Mlp, bind_params, init_mlp, make_optimizer, optimizer_step
from .seeding import child_rng, child_seed

VARIANTS = ("noprop", "direct_sg", "critic", "sobolev")
LOSS_KINDS = ("l1", "l2")


# -- dataset ------------------------------------------------------------------

@dataclass
class SgDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    classes: int

    @property
    def dim(self) -> int:
        return self.train_x.shape[1]


def make_spiral_dataset(seed: int, n_train: int = 4096, n_test: int = 2048, dim: int = 20,
                        classes: int = 8, turns: float = 0.75, noise: float = 0.04,
                        distractor_scale: float = 0.5) -> SgDataset:
    """Interleaved spiral arms in a 2-D plane, padded with Gaussian distractor
    coordinates and rotated by a random orthogonal matrix of ``R^dim``."""
    if dim < 2 or classes < 2:
        raise ValueError("need dim >= 2 and classes >= 2")
    rng = child_rng(seed, "sg-dataset")
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))

    def draw(n):
        y = rng.integers(0, classes, size=n)
        t = rng.uniform(0.15, 1.0, size=n)
        angle = 2 * np.pi * (y / classes + turns * t)
        plane = np.column_stack([t * np.cos(angle), t * np.sin(angle)]) * 2.0
        plane += noise * rng.standard_normal(plane.shape)
        rest = distractor_scale * rng.standard_normal((n, dim - 2))
        return np.column_stack([plane, rest]) @ q.T, y

    tx, ty = draw(n_train)
    vx, vy = draw(n_test)
    return SgDataset(tx, ty, vx, vy, classes)


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# -- network parts --------------------------------------------------------------

class Part:
    """A contiguous run of dense layers sharing arrays with the full network."""

    def __init__(self, weights, biases, activation: str, final: bool, head: str):
        self.weights = list(weights)
        self.biases = list(biases)
        self.activation = activation
        self.final = final
        self.head = head

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def bind(self, tape: Tape) -> list[Node]:
        return bind_params(self, tape)

    def __call__(self, x: Node) -> Node:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError("Part", (None, self.in_dim), x.shape)
        params = self.bind(x.tape)
        act = ad.ACTIVATIONS[self.activation]
        h = x
        n = len(self.weights)
        for i in range(n):
            h = ad.add(ad.matmul(h, params[2 * i]), params[2 * i + 1])
            if i < n - 1 or not self.final:
                h = act(h)
        if self.final and self.head == "log_softmax":
            h = ad.log_softmax(h, axis=-1)
        return h


class SplitNetwork:
    """An :class:`Mlp` cut after the layers listed in ``split_points``.

    ``split_points`` holds layer counts: ``(2,)`` on a 4-layer network gives
    parts of layers ``[0, 1]`` and ``[2, 3]``.  The parts share parameter
    arrays with ``network``, so composing them is the undecoupled forward
    pass.
    """

    def __init__(self, network: Mlp, split_points):
        n_layers = len(network.weights)
        pts = tuple(int(p) for p in split_points)
        if any(not 0 < p < n_layers for p in pts) or list(pts) != sorted(set(pts)):
            raise ValueError(f"split points must be strictly increasing and inside (0, {n_layers}), got {pts}")
        self.network = network
        self.split_points = pts
        edges = (0, *pts, n_layers)
        self.parts = [
            Part(network.weights[a:b], network.biases[a:b], network.activation, b == n_layers, network.head)
            for a, b in zip(edges[:-1], edges[1:])
        ]

    @property
    def boundary_dims(self) -> list[int]:
        return [p.out_dim for p in self.parts[:-1]]

    def forward(self, x: Node) -> tuple[list[Node], Node]:
        """Boundary activations and the final output."""
        hs = []
        h = x
        for part in self.parts:
            h = part(h)
            hs.append(h)
        return hs[:-1], hs[-1]


def default_split_points(n_layers: int, splits: int) -> tuple:
    """Evenly spaced cuts; ``splits = n_layers - 1`` cuts after every layer."""
    if not 0 <= splits < n_layers:
        raise ValueError(f"a {n_layers}-layer network admits 0..{n_layers - 1} splits, got {splits}")
    if splits == 0:
        return ()
    return tuple(sorted({int(round(n_layers * (k + 1) / (splits + 1))) for k in range(splits)}))


def cross_entropy_rows(logp: Node, y_onehot: Node) -> Node:
    """Per-example cross-entropy ``-<y, log p>``, shape ``(N,)``."""
    return ad.neg(ad.sum(ad.mul(y_onehot, logp), axis=1))


# -- SG modules -----------------------------------------------------------------

class SgModule:
    """Synthetic-gradient producer for one boundary of width ``h_dim``.

    For ``critic`` and ``sobolev`` the trainable part is a predictor
    ``p(h, y)`` with a log-softmax head, ``m = CE(p, y)`` and ``SG = dm/dh``.
    For ``direct_sg`` it is an MLP emitting ``SG`` of the shape of ``h``.
    The class label enters by concatenating its one-hot code to ``h``.
    """

    def __init__(self, variant: str, h_dim: int, classes: int, hidden=(128,), seed: int = 0,
                 activation: str = "relu"):
        if variant not in VARIANTS or variant == "noprop":
            raise ValueError(f"an SG module needs one of {VARIANTS[1:]}, got {variant!r}")
        self.variant = variant
        self.h_dim = int(h_dim)
        self.classes = int(classes)
        sizes = (self.h_dim + self.classes, *hidden)
        if variant == "direct_sg":
            self.net = init_mlp((*sizes, self.h_dim), seed, activation=activation, head="linear")
        else:
            self.net = init_mlp((*sizes, self.classes), seed, activation=activation, head="log_softmax")

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    @property
    def has_loss_model(self) -> bool:
        return self.variant != "direct_sg"

    def __call__(self, h: Node, y_onehot: Node) -> tuple[Node | None, Node]:
        """``(m, SG)`` for a boundary activation ``h``; ``m`` is None for direct SG.

        ``h`` should be cut from the main graph (see :func:`ad.stop_gradient`)
        so that ``SG`` is the derivative of this module's own loss model.
        """
        if h.ndim != 2 or h.shape[1] != self.h_dim:
            raise ShapeError("SgModule", (None, self.h_dim), h.shape)
        z = ad.concat([h, y_onehot], axis=1)
        if not self.has_loss_model:
            return None, self.net(z)
        m = cross_entropy_rows(self.net(z), y_onehot)
        sg = ad.grad(ad.sum(m), [h])[0]
        return m, sg


class OracleSgModule:
    """Loss model wired to the true downstream computation: ``SG = dL/dh`` exactly."""

    variant = "sobolev"
    has_loss_model = True
    params: list = []

    def __init__(self, downstream):
        self.downstream = list(downstream)

    def __call__(self, h: Node, y_onehot: Node):
        out = h
        for part in self.downstream:
            out = part(out)
        m = cross_entropy_rows(out, y_onehot)
        return m, ad.grad(ad.sum(m), [h])[0]


def _reduce(kind: str, a: Node, b: Node, n: int) -> Node:
    """Summed over every entry, then divided by the number of examples ``n``."""
    d = ad.sub(a, b)
    e = ad.abs(d) if kind == "l1" else ad.mul(d, d)
    total = ad.sum(e)
    return ad.mul(total, 1.0 / n) if n != 1 else total


def sg_losses(variant: str, m: Node | None, sg: Node, true_loss: Node, true_grad: Node,
              value_loss: str = "l1", grad_loss: str = "l1") -> Node:
    """Training objective of an SG module.

    ``direct_sg``: ``l(SG, dL/dh)``.  ``critic``: ``l(m, L)``.
    ``sobolev``: ``l(m, L) + l(SG, dL/dh)``.  ``m``/``true_loss`` are per
    example ``(N,)`` and ``sg``/``true_grad`` are ``(N, h)``; scalars and
    single vectors are accepted for one example.
    """
    if variant == "noprop":
        raise ValueError("noprop trains no SG module and has no SG loss")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if value_loss not in LOSS_KINDS or grad_loss not in LOSS_KINDS:
        raise ValueError(f"loss kinds must be in {LOSS_KINDS}")
    if sg.shape != true_grad.shape:
        raise ShapeError("sg_losses", sg.shape, true_grad.shape)
    n = sg.shape[0] if sg.ndim == 2 else 1
    if variant == "direct_sg":
        return _reduce(grad_loss, sg, true_grad, n)
    if m is None:
        raise ValueError(f"the {variant} variant needs a loss model output m")
    if m.shape != true_loss.shape:
        raise ShapeError("sg_losses", m.shape, true_loss.shape)
    value_term = _reduce(value_loss, m, true_loss, n)
    if variant == "critic":
        return value_term
    return ad.add(value_term, _reduce(grad_loss, sg, true_grad, n))


# -- decoupled step -------------------------------------------------------------

class DecoupledTrainer:
    """Static graph for one decoupled update, replayed per minibatch.

    Parameter gradients:

    * final part: ``d L / d theta`` with ``L`` the batch-mean cross-entropy;
    * upstream part ``k``: ``d/d theta [ (1/N) sum(h_k * stop(SG_k)) ]``, i.e.
      ``SG_k`` pushed through ``dh_k/dtheta`` with the same 1/N reduction;
    * SG module ``k``: gradient of :func:`sg_losses` with targets cut from the
      main graph.
    """

    def __init__(self, net: SplitNetwork, modules, variant: str, batch_x, batch_y_onehot,
                 main_lr: float = 1e-3, sg_lr: float = 1e-4, value_loss: str = "l1", grad_loss: str = "l1"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        n_boundaries = len(net.parts) - 1
        modules = list(modules) if modules is not None else []
        if variant != "noprop" and len(modules) != n_boundaries:
            raise ValueError(f"need one SG module per boundary ({n_boundaries}), got {len(modules)}")
        for mod, width in zip(modules, net.boundary_dims):
            h_dim = getattr(mod, "h_dim", width)
            if h_dim != width:
                raise ShapeError("SG boundary", (width,), (h_dim,))
        self.net = net
        self.modules = modules if variant != "noprop" else []
        self.variant = variant
        tape = Tape()
        self.tape = tape
        self.x = tape.constant(batch_x)
        self.y = tape.constant(batch_y_onehot)
        n = self.x.shape[0]

        hs, logp = net.forward(self.x)
        ce = cross_entropy_rows(logp, self.y)
        self.loss = ad.mul(ad.sum(ce), 1.0 / n)
        last = net.parts[-1]
        main_grads = {id(last): ad.grad(self.loss, last.bind(tape))}
        sg_grads, sg_loss_nodes = [], []
        target_loss = ad.stop_gradient(ce)
        for k, mod in enumerate(self.modules):
            h = hs[k]
            part = net.parts[k]
            hin = ad.stop_gradient(h)
            m, sg = mod(hin, self.y)
            if sg.shape != h.shape:
                raise ShapeError("SG output", h.shape, sg.shape)
            inject = ad.mul(ad.sum(ad.mul(h, ad.stop_gradient(sg))), 1.0 / n)
            main_grads[id(part)] = ad.grad(inject, part.bind(tape))
            if mod.params:
                true_g = ad.stop_gradient(ad.grad(ad.sum(ce), [h])[0])
                sl = sg_losses(variant, m, sg, target_loss, true_g, value_loss, grad_loss)
                sg_loss_nodes.append(sl)
                sg_grads.append(ad.grad(sl, bind_params(mod.net, tape)))

        self.trained_parts = [p for p in net.parts if id(p) in main_grads]
        self.main_arrays = [a for p in self.trained_parts for a in p.params]
        self.main_grad_nodes = [g for p in self.trained_parts for g in main_grads[id(p)]]
        self.sg_modules = [mod for mod in self.modules if mod.params]
        self.sg_arrays = [a for mod in self.sg_modules for a in mod.params]
        self.sg_grad_nodes = [g for gs in sg_grads for g in gs]
        self.sg_loss_nodes = sg_loss_nodes
        self.main_opt = make_optimizer("adam", self.main_arrays, main_lr)
        self.sg_opt = make_optimizer("adam", self.sg_arrays, sg_lr) if self.sg_arrays else None

    def set_batch(self, x, y_onehot) -> None:
        self.tape.assign(self.x, x, copy=False)
        self.tape.assign(self.y, y_onehot, copy=False)

    def gradients(self):
        self.tape.invalidate()
        main = self.tape.evaluate(self.main_grad_nodes)
        sg = self.tape.evaluate(self.sg_grad_nodes)
        return main, sg

    def step(self) -> dict:
        """One synchronous update of the main network and the SG modules."""
        main, sg = self.gradients()
        info = {
            "loss": float(self.loss.value),
            "sg_loss": [float(n.value) for n in self.sg_loss_nodes],
        }
        optimizer_step(self.main_opt, self.main_arrays, main)
        if self.sg_opt is not None:
            optimizer_step(self.sg_opt, self.sg_arrays, sg)
        self.tape.invalidate()
        return info


def decoupled_step(net: SplitNetwork, modules, batch, variant: str = "sobolev", **kwargs) -> dict:
    """One update on ``batch = (x, y_onehot)`` with fresh optimizers."""
    x, y = batch
    return DecoupledTrainer(net, modules, variant, x, y, **kwargs).step()


class BackpropTrainer:
    """Undecoupled reference: every parameter gets the true gradient."""

    def __init__(self, network: Mlp, batch_x, batch_y_onehot, lr: float = 1e-3):
        tape = Tape()
        self.tape = tape
        self.network = network
        self.x = tape.constant(batch_x)
        self.y = tape.constant(batch_y_onehot)
        ce = cross_entropy_rows(network(self.x), self.y)
        self.loss = ad.mul(ad.sum(ce), 1.0 / self.x.shape[0])
        self.grad_nodes = ad.grad(self.loss, network.bind(tape))
        self.opt = make_optimizer("adam", network.params, lr)

    def set_batch(self, x, y_onehot) -> None:
        self.tape.assign(self.x, x, copy=False)
        self.tape.assign(self.y, y_onehot, copy=False)

    def gradients(self):
        self.tape.invalidate()
        return self.tape.evaluate(self.grad_nodes)

    def step(self) -> dict:
        grads = self.gradients()
        info = {"loss": float(self.loss.value), "sg_loss": []}
        optimizer_step(self.opt, self.network.params, grads)
        self.tape.invalidate()
        return info


# -- experiment -----------------------------------------------------------------

@dataclass
class SgTrainConfig:
    variant: str = "sobolev"  # one of VARIANTS, or "backprop" for the undecoupled baseline
    splits: int = 3
    split_points: tuple | None = None
    seed: int = 0
    steps: int = 4000
    batch_size: int = 64  # a power of two keeps the 1/N reductions exact
    hidden: tuple = (64, 64, 64)
    activation: str = "relu"
    sg_hidden: tuple = (128,)
    direct_sg_hidden: tuple = (128, 128)
    main_lr: float = 1e-3
    sg_lr: float = 1e-4
    value_loss: str = "l1"
    grad_loss: str = "l1"
    n_train: int = 4096
    n_test: int = 2048
    input_dim: int = 20
    classes: int = 8

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.sg_hidden = tuple(int(h) for h in self.sg_hidden)
        self.direct_sg_hidden = tuple(int(h) for h in self.direct_sg_hidden)
        if self.variant not in (*VARIANTS, "backprop"):
            raise ValueError(f"variant must be one of {VARIANTS + ('backprop',)}, got {self.variant!r}")
        if self.steps < 0 or self.batch_size < 1 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("steps, batch_size, n_train and n_test must be positive")
        if self.value_loss not in LOSS_KINDS or self.grad_loss not in LOSS_KINDS:
            raise ValueError(f"loss kinds must be in {LOSS_KINDS}")
        n_layers = len(self.hidden) + 1
        if self.split_points is None:
            if self.variant != "backprop":
                self.split_points = default_split_points(n_layers, self.splits)
            else:
                self.split_points = ()
        self.split_points = tuple(int(p) for p in self.split_points)
        if self.variant != "backprop" and not self.split_points:
            raise ValueError("decoupled variants need at least one split")
        if any(not 0 < p < n_layers for p in self.split_points):
            raise ValueError(f"split points must lie strictly inside (0, {n_layers})")
        if self.variant != "backprop":
            self.splits = len(self.split_points)


@dataclass
class SgResult:
    config: SgTrainConfig
    test_acc: float
    train_acc: float
    wall_time: float
    step_log: list = field(default_factory=list)

    def row(self) -> dict:
        c = self.config
        return {
            "variant": c.variant,
            "splits": c.splits if c.variant != "backprop" else 0,
            "seed": c.seed,
            "test_acc": self.test_acc,
            "steps": c.steps,
            "wall_ms": round(self.wall_time * 1000.0, 3),
            "train_acc": self.train_acc,
        }


def accuracy(network: Mlp, x, labels) -> float:
    tape = Tape()
    logp = network(tape.constant(x)).value
    return float(np.mean(np.argmax(logp, axis=1) == labels))


def build_models(config: SgTrainConfig, dataset: SgDataset):
    network = init_mlp((dataset.dim, *config.hidden, dataset.classes), child_seed(config.seed, "sg-main"),
                       activation=config.activation, head="log_softmax")
    if config.variant == "backprop":
        return network, None, []
    net = SplitNetwork(network, config.split_points)
    modules = []
    if config.variant != "noprop":
        hidden = config.direct_sg_hidden if config.variant == "direct_sg" else config.sg_hidden
        modules = [
            SgModule(config.variant, width, dataset.classes, hidden, child_seed(config.seed, "sg-module", k),
                     config.activation)
            for k, width in enumerate(net.boundary_dims)
        ]
    return network, net, modules


def run_sg_experiment(config: SgTrainConfig, dataset: SgDataset | None = None, log_every: int = 0) -> SgResult:
    """Train to ``config.steps`` and report test accuracy of the whole network."""
    t0 = time.perf_counter()
    if dataset is None:
        dataset = make_spiral_dataset(config.seed, config.n_train, config.n_test, config.input_dim, config.classes)
    network, net, modules = build_models(config, dataset)
    y_all = one_hot(dataset.train_y, dataset.classes)
    n = dataset.train_x.shape[0]
    b = min(config.batch_size, n)
    order = child_rng(config.seed, "sg-batches")
    perm = order.permutation(n)
    cursor = 0

    first = perm[:b]
    if config.variant == "backprop":
        trainer = BackpropTrainer(network, dataset.train_x[first], y_all[first], config.main_lr)
    else:
        trainer = DecoupledTrainer(net, modules, config.variant, dataset.train_x[first], y_all[first],
                                   config.main_lr, config.sg_lr, config.value_loss, config.grad_loss)
    step_log = []
    for step in range(1, config.steps + 1):
        if cursor + b > n:
            perm = order.permutation(n)
            cursor = 0
        idx = perm[cursor:cursor + b]
        cursor += b
        trainer.set_batch(dataset.train_x[idx], y_all[idx])
        try:
            info = trainer.step()
        except ad.NonFiniteError as exc:
            raise FloatingPointError(f"{config.variant}: training diverged at step {step}: {exc}") from exc
        if not np.isfinite(info["loss"]):
            raise FloatingPointError(f"{config.variant}: non-finite loss at step {step}")
        if log_every and step % log_every == 0:
            step_log.append({"step": step, "loss": info["loss"], "sg_loss": info["sg_loss"],
                             "test_acc": accuracy(network, dataset.test_x, dataset.test_y)})
    return SgResult(config, accuracy(network, dataset.test_x, dataset.test_y),
                    accuracy(network, dataset.train_x, dataset.train_y), time.perf_counter() - t0, step_log)


def summarize(results) -> dict:
    """Mean and population stddev of test accuracy per variant."""
    out = {}
    for r in results:
        out.setdefault(r.config.variant, []).append(r.test_acc)
    return {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)} for k, v in out.items()}
