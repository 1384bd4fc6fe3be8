"""Sobolev Training objectives.

``sobolev_loss`` matches model values and full input derivatives against
targets.  ``stochastic_sobolev_loss`` matches only the projections of the
input Jacobian onto random unit vectors over the output index.  With an l2
loss this is an unbiased estimate of the full derivative term scaled by
``1 / output_dim``, since ``E[v v^T] = I / o`` for ``v`` uniform on the sphere.

Both losses are mean-reduced over the batch and are tape nodes whose
parameter gradients include the nested input-gradient terms.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError, Tape

VALUE_LOSSES = ("l2", "l1", "kl")
DERIVATIVE_LOSSES = ("l2", "l1")


@dataclass
class SobolevBatch:
    """Inputs ``(N, d)``, targets ``(N, o)``, target Jacobians ``(N, o, d)``.

    ``target_hvps`` holds second-order records as a pair
    ``(directions (N, d), values (N, d))`` for scalar targets.
    """

    inputs: np.ndarray
    targets: np.ndarray
    target_grads: np.ndarray | None = None
    target_hvps: tuple | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ShapeError("SobolevBatch.inputs", self.inputs.shape)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        n, d = self.inputs.shape
        if n < 1 or self.targets.shape[0] != n:
            raise ShapeError("SobolevBatch", self.inputs.shape, self.targets.shape)
        o = self.targets.shape[1]
        if self.target_grads is not None:
            tg = np.asarray(self.target_grads, dtype=np.float64)
            if tg.ndim == 2 and o == 1:
                tg = tg[:, None, :]
            if tg.shape != (n, o, d):
                raise ShapeError("SobolevBatch.target_grads", (n, o, d), tg.shape)
            self.target_grads = tg
        if self.target_hvps is not None:
            dirs, vals = (np.asarray(a, dtype=np.float64) for a in self.target_hvps)
            if dirs.shape != (n, d) or vals.shape != (n, d):
                raise ShapeError("SobolevBatch.target_hvps", (n, d), dirs.shape, vals.shape)
            self.target_hvps = (dirs, vals)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.targets.shape[1]

    def bind(self, tape: Tape) -> "BoundBatch":
        return BoundBatch(
            tape,
            tape.constant(self.inputs, "inputs"),
            tape.constant(self.targets, "targets"),
            None if self.target_grads is None else tape.constant(self.target_grads, "target_grads"),
            None if self.target_hvps is None
            else tuple(tape.constant(a) for a in self.target_hvps),
        )


@dataclass
class BoundBatch:
    """Batch leaves on a tape; reassign them to replay a graph on new data."""

    tape: Tape
    inputs: Node
    targets: Node
    target_grads: Node | None = None
    target_hvps: tuple | None = None

    def assign(self, batch: SobolevBatch) -> None:
        self.tape.assign(self.inputs, batch.inputs)
        self.tape.assign(self.targets, batch.targets)
        if self.target_grads is not None:
            self.tape.assign(self.target_grads, batch.target_grads)
        if self.target_hvps is not None:
            for leaf, arr in zip(self.target_hvps, batch.target_hvps):
                self.tape.assign(leaf, arr)


@dataclass
class LossSpec:
    value_loss: str = "l2"
    derivative_losses: tuple = ("l2",)
    order: int = 1
    derivative_weight: float = 1.0

    def __post_init__(self):
        self.derivative_losses = tuple(self.derivative_losses)
        if self.value_loss not in VALUE_LOSSES:
            raise ValueError(f"unknown value loss {self.value_loss!r}")
        if any(k not in DERIVATIVE_LOSSES for k in self.derivative_losses):
            raise ValueError(f"unknown derivative loss in {self.derivative_losses}")
        if self.order < 0 or len(self.derivative_losses) != self.order:
            raise ValueError("need exactly one derivative loss per order")
        if self.order > 2:
            raise ValueError("orders above 2 are not supported")
        if self.derivative_weight < 0:
            raise ValueError("derivative_weight must be nonnegative")


@dataclass
class ProjectionSampler:
    """Draws directions uniformly from the unit sphere in ``dimension`` dims."""

    dimension: int
    seed: int = 0
    num_projections: int = 1
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.dimension < 1 or self.num_projections < 1:
            raise ValueError("dimension and num_projections must be >= 1")
        self.rng = np.random.default_rng(self.seed)

    def sample(self, n: int | None = None) -> np.ndarray:
        """One unit vector, or an ``(n, dimension)`` array of them."""
        shape = (1 if n is None else n, self.dimension)
        z = self.rng.standard_normal(shape)
        norms = np.linalg.norm(z, axis=1)
        while np.any(norms == 0.0):
            bad = norms == 0.0
            z[bad] = self.rng.standard_normal((int(bad.sum()), self.dimension))
            norms = np.linalg.norm(z, axis=1)
        v = z / norms[:, None]
        return v[0] if n is None else v


def sample_sphere(sampler: ProjectionSampler) -> np.ndarray:
    return sampler.sample()


def pointwise_loss(kind: str, pred: Node, target: Node) -> Node:
    """Per-example loss summed over all non-batch axes, then batch-mean."""
    if kind not in VALUE_LOSSES:
        raise ValueError(f"unknown loss {kind!r}")
    n = pred.shape[0] if pred.ndim else 1
    if kind == "l2":
        diff = ad.sub(pred, target)
        total = ad.sum(ad.mul(diff, diff))
    elif kind == "l1":
        total = ad.sum(ad.abs(ad.sub(pred, target)))
    elif kind == "kl":
        # pred and target are log-probabilities; KL(pred || target)
        total = ad.sum(ad.mul(ad.exp(pred), ad.sub(pred, target)))
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return ad.mul(total, 1.0 / n)


def _as_bound(batch, tape: Tape | None) -> BoundBatch:
    if isinstance(batch, BoundBatch):
        return batch
    return batch.bind(tape if tape is not None else Tape())


def _is_piecewise_linear(model) -> bool:
    return getattr(model, "activation", None) in ("relu", "leaky_relu")


def _model_jacobian_rows(out: Node, x: Node) -> list[Node]:
    """One ``(N, d)`` gradient node per output component."""
    o = out.shape[1]
    if o == 1:
        return [ad.grad(ad.sum(out), [x])[0]]
    return [ad.grad(ad.sum(out[:, k]), [x])[0] for k in range(o)]


def sobolev_loss(model, batch, loss_spec: LossSpec, tape: Tape | None = None) -> Node:
    """Value loss plus full derivative losses up to ``loss_spec.order``.

    ``model`` is any callable mapping an ``(N, d)`` node to ``(N, o)``.
    """
    b = _as_bound(batch, tape)
    out = model(b.inputs)
    if out.shape != b.targets.shape:
        raise ShapeError("sobolev_loss (model vs targets)", out.shape, b.targets.shape)
    loss = pointwise_loss(loss_spec.value_loss, out, b.targets)
    if loss_spec.order == 0:
        return loss

    if b.target_grads is None:
        raise ValueError("order >= 1 needs target gradients in the batch")
    rows = _model_jacobian_rows(out, b.inputs)
    jac = rows[0] if len(rows) == 1 else ad.concat([ad.reshape(r, (r.shape[0], 1, r.shape[1])) for r in rows], axis=1)
    target_jac = b.target_grads if len(rows) > 1 else ad.reshape(b.target_grads, rows[0].shape)
    deriv = pointwise_loss(loss_spec.derivative_losses[0], jac, target_jac)

    if loss_spec.order == 2:
        if b.target_hvps is None:
            raise ValueError("order 2 needs target Hessian-vector records")
        if out.shape[1] != 1:
            raise ValueError("order 2 is only supported for scalar outputs")
        if _is_piecewise_linear(model):
            warnings.warn(
                "second-order term on a piecewise-linear network: the model Hessian is zero "
                "almost everywhere, so this term only measures the target Hessian",
                RuntimeWarning,
                stacklevel=2,
            )
        directions, values = b.target_hvps
        hv = ad.hvp(ad.sum(out), b.inputs, directions)
        deriv = ad.add(deriv, pointwise_loss(loss_spec.derivative_losses[1], hv, values))

    if loss_spec.derivative_weight != 1.0:
        deriv = ad.mul(deriv, loss_spec.derivative_weight)
    return ad.add(loss, deriv)


@dataclass
class ProjectedTerm:
    """Handles for a projected-derivative graph so it can be resampled."""

    loss: Node
    directions: list  # one (N, o) leaf per Monte Carlo draw


def projected_derivative_term(out: Node, x: Node, target_jac: Node, kind: str,
                              directions: list[np.ndarray]) -> ProjectedTerm:
    """Mean over draws of ``loss(grad_x <out, v>, J_target^T v)``, one ``v`` per example."""
    tape = x.tape
    leaves = []
    total = None
    for v in directions:
        vn = tape.constant(v)
        leaves.append(vn)
        gm = ad.grad(ad.sum(ad.mul(out, vn)), [x])[0]
        gt = ad.einsum("nod,no->nd", target_jac, vn)
        term = pointwise_loss(kind, gm, gt)
        total = term if total is None else ad.add(total, term)
    if len(directions) > 1:
        total = ad.mul(total, 1.0 / len(directions))
    return ProjectedTerm(total, leaves)


def resample(term: ProjectedTerm, sampler: ProjectionSampler) -> None:
    for leaf in term.directions:
        leaf.tape.assign(leaf, sampler.sample(leaf.shape[0]), copy=False)


def build_stochastic_sobolev(model, batch, loss_spec: LossSpec, sampler: ProjectionSampler,
                             tape: Tape | None = None):
    """Graph for the stochastic loss; returns ``(loss, ProjectedTerm)``."""
    if loss_spec.order != 1:
        raise ValueError("the projected estimator is implemented for first-order terms")
    b = _as_bound(batch, tape)
    if b.target_grads is None:
        raise ValueError("stochastic Sobolev loss needs the target Jacobian")
    out = model(b.inputs)
    if out.shape != b.targets.shape:
        raise ShapeError("stochastic_sobolev_loss (model vs targets)", out.shape, b.targets.shape)
    if sampler.dimension != out.shape[1]:
        raise ShapeError("stochastic_sobolev_loss (sampler vs outputs)", (sampler.dimension,), (out.shape[1],))
    n = out.shape[0]
    draws = [sampler.sample(n) for _ in range(sampler.num_projections)]
    term = projected_derivative_term(out, b.inputs, b.target_grads, loss_spec.derivative_losses[0], draws)
    deriv = term.loss
    if loss_spec.derivative_weight != 1.0:
        deriv = ad.mul(deriv, loss_spec.derivative_weight)
    value = pointwise_loss(loss_spec.value_loss, out, b.targets)
    return ad.add(value, deriv), term


def stochastic_sobolev_loss(model, batch, loss_spec: LossSpec, sampler: ProjectionSampler,
                            tape: Tape | None = None) -> Node:
    return build_stochastic_sobolev(model, batch, loss_spec, sampler, tape)[0]
