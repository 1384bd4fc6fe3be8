"""Finite-difference verification of every analytic and autodiff gradient.

Relative errors are norm-wise, ``|a - b| / max(|a|, |b|, floor)``, taken per
point for input gradients and over the whole parameter vector for parameter
gradients.  Reference derivatives use the fourth-order central stencil.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import benchmarks as bm
from .distill import distill_loss, make_synthetic_teacher
from .nn import init_mlp, input_gradient
from .seeding import child_rng, child_seed
from .sobolev import LossSpec, ProjectionSampler, SobolevBatch, build_stochastic_sobolev, sobolev_loss
from .syngrad import SgModule, sg_losses

TARGETS = ("benchmarks", "mlp", "sobolev-loss", "distill-loss", "sg-loss")
FLOOR = 1e-10
KINK_MARGIN = 1e-2  # reference stencils stay this far from non-differentiable loci


@dataclass
class CheckResult:
    target: str
    case: str
    max_rel: float
    tol: float
    worst: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel < self.tol)

    def line(self) -> str:
        flag = "ok  " if self.passed else "FAIL"
        return f"{flag} {self.target:13s} {self.case:34s} max_rel={self.max_rel:.3e} tol={self.tol:.0e}"


def norm_rel(a, b, floor: float = FLOOR) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def _rowwise_rel(a, b, floor: float = FLOOR) -> np.ndarray:
    a = np.asarray(a).reshape(len(a), -1)
    b = np.asarray(b).reshape(len(b), -1)
    den = np.maximum(np.maximum(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)), floor)
    return np.linalg.norm(a - b, axis=1) / den


def fd_rows(f, x: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order central differences of a row-wise function ``f: (N, d) -> (N,)``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for j in range(x.shape[1]):
        e = np.zeros_like(x)
        e[:, j] = h
        out[:, j] = (-f(x + 2 * e) + 8 * f(x + e) - 8 * f(x - e) + f(x - 2 * e)) / (12 * h)
    return out


def fd_arrays(loss_fn, arrays, h: float) -> list[np.ndarray]:
    """Fourth-order central differences of ``loss_fn()`` w.r.t. arrays perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for k in (2, 1, -1, -2):
                flat[i] = orig + k * h
                vals.append(loss_fn())
            flat[i] = orig
            gflat[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
        grads.append(g)
    return grads


def _replay_value(node: ad.Node):
    def value():
        node.tape.invalidate()
        return float(node.value)
    return value


def _param_check(target, case, loss: ad.Node, model_params, tol, h=1e-4) -> CheckResult:
    tape = loss.tape
    leaves = [tape.bindings[id(m)] for m in model_params]
    arrays = [a for m in model_params for a in m.params]
    nodes = [n for group in leaves for n in group]
    tape.invalidate()
    analytic = [g.value.copy() for g in ad.grad(loss, nodes)]
    numeric = fd_arrays(_replay_value(loss), arrays, h)
    tape.invalidate()
    a = np.concatenate([g.ravel() for g in analytic])
    b = np.concatenate([g.ravel() for g in numeric])
    rel = norm_rel(a, b)
    worst_i = int(np.argmax(np.abs(a - b)))
    return CheckResult(target, case, rel, tol, {"param_index": worst_i, "analytic": float(a[worst_i]),
                                                "numeric": float(b[worst_i])})


# -- targets ------------------------------------------------------------------

def interior_points(bench: bm.BenchmarkFn, n: int, rng, margin: float = KINK_MARGIN) -> np.ndarray:
    """Uniform points at least ``margin`` inside the domain and away from kinks."""
    lo, hi = bench.lower + margin, bench.upper - margin
    pts = rng.uniform(lo, hi, size=(n, 2))
    if bench.singular is not None:
        bad = bench.singular(pts[:, 0], pts[:, 1]) < margin
        while np.any(bad):
            pts[bad] = rng.uniform(lo, hi, size=(int(bad.sum()), 2))
            bad = bench.singular(pts[:, 0], pts[:, 1]) < margin
    return pts


def check_benchmarks(points: int = 1000, seed: int = 0, tol: float = 1e-6, h: float = 1e-4) -> list[CheckResult]:
    out = []
    for name, bench in bm.BENCHMARKS.items():
        pts = interior_points(bench, points, child_rng(seed, "check-benchmarks", len(out)))
        analytic = bench.gradient(pts)
        numeric = fd_rows(bench.value, pts, h)
        rel = _rowwise_rel(analytic, numeric)
        i = int(np.argmax(rel))
        out.append(CheckResult("benchmarks", f"{name} closed form vs fd", float(rel[i]), tol,
                               {"point": pts[i].tolist(), "analytic": analytic[i].tolist(),
                                "numeric": numeric[i].tolist()}))
        tape = ad.Tape()
        xn = tape.constant(pts)
        g = ad.grad(ad.sum(bm.graph_benchmark(bench, xn)), [xn])[0].value
        rel = _rowwise_rel(g, analytic)
        i = int(np.argmax(rel))
        out.append(CheckResult("benchmarks", f"{name} autodiff vs closed form", float(rel[i]), tol,
                               {"point": pts[i].tolist(), "autodiff": g[i].tolist(), "analytic": analytic[i].tolist()}))
    return out


def check_mlp(activation: str = "tanh", seed: int = 0, points: int = 200, tol_input: float = 1e-6,
              tol_param: float = 1e-4) -> list[CheckResult]:
    rng = child_rng(seed, "check-mlp")
    net = init_mlp((3, 12, 12, 1), child_seed(seed, "check-mlp-init"), activation=activation)
    for b in net.biases:
        b[...] = 0.1 * rng.standard_normal(b.shape)
    x = rng.uniform(-1.5, 1.5, size=(points, 3))

    tape = ad.Tape()
    xn = tape.constant(x)
    g = input_gradient(net, xn).value

    def f(z):
        return net(ad.Tape().constant(z)).value[:, 0]

    rel = _rowwise_rel(g, fd_rows(f, x, 1e-4))
    i = int(np.argmax(rel))
    out = [CheckResult("mlp", f"{activation} input gradient", float(rel[i]), tol_input, {"point": x[i].tolist()})]

    tape = ad.Tape()
    pred = net(tape.constant(x[:32]))
    target = tape.constant(np.sin(x[:32, :1]))
    loss = ad.mul(ad.sum(ad.mul(ad.sub(pred, target), ad.sub(pred, target))), 1.0 / 32)
    out.append(_param_check("mlp", f"{activation} parameter gradient", loss, [net], tol_param))
    return out


def check_sobolev_loss(activation: str = "tanh", seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    rng = child_rng(seed, "check-sobolev")
    bench = bm.get_benchmark("styblinski_tang")
    x = bm.sample_domain(bench, 16, rng) / 5.0
    y, gx = bench.value(x * 5.0) / 100.0, bench.gradient(x * 5.0) / 20.0
    net = init_mlp((2, 8, 8, 1), child_seed(seed, "check-sobolev-init"), activation=activation)
    out = []

    for order in (1, 2):
        hv = (rng.standard_normal((16, 2)), rng.standard_normal((16, 2))) if order == 2 else None
        spec = LossSpec(order=order, derivative_losses=("l2",) * order)
        loss = sobolev_loss(net, SobolevBatch(x, y, gx, hv), spec, tape=ad.Tape())
        out.append(_param_check("sobolev-loss", f"order {order} ({activation})", loss, [net], tol))

    multi = init_mlp((2, 8, 3), child_seed(seed, "check-sobolev-multi"), activation=activation)
    tj = rng.standard_normal((16, 3, 2))
    loss = sobolev_loss(multi, SobolevBatch(x, rng.standard_normal((16, 3)), tj), LossSpec(), tape=ad.Tape())
    out.append(_param_check("sobolev-loss", f"3 outputs full Jacobian ({activation})", loss, [multi], tol))
    sampler = ProjectionSampler(3, child_seed(seed, "check-sobolev-proj"), num_projections=2)
    loss, _ = build_stochastic_sobolev(multi, SobolevBatch(x, rng.standard_normal((16, 3)), tj), LossSpec(),
                                       sampler, tape=ad.Tape())
    out.append(_param_check("sobolev-loss", f"projected estimator ({activation})", loss, [multi], tol))
    return out


def check_distill_loss(seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    teacher = make_synthetic_teacher(4, 3, (8,), child_seed(seed, "check-teacher"), 0.5, activation="tanh")
    student = init_mlp((4, 8, 3), child_seed(seed, "check-student"), activation="tanh", head="log_softmax")
    states = child_rng(seed, "check-states").standard_normal((12, 4))
    sampler = ProjectionSampler(3, child_seed(seed, "check-distill-proj"))
    out = []
    for kind in ("l2", "l1"):
        loss = distill_loss(student, teacher, states, 1.0, sampler, kind=kind, tape=ad.Tape())
        out.append(_param_check("distill-loss", f"KL + projected {kind}", loss, [student], tol))
    return out


def check_sg_loss(seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    rng = child_rng(seed, "check-sg")
    h = rng.standard_normal((10, 6))
    labels = rng.integers(0, 3, size=10)
    y = np.eye(3)[labels]
    true_loss = rng.uniform(0.1, 2.0, size=10)
    true_grad = 0.3 * rng.standard_normal((10, 6))
    out = []
    for variant in ("direct_sg", "critic", "sobolev"):
        mod = SgModule(variant, 6, 3, (8,), child_seed(seed, "check-sg-module"), activation="tanh")
        tape = ad.Tape()
        m, sg = mod(tape.constant(h), tape.constant(y))
        # l2 keeps the objective smooth enough for a finite-difference reference
        loss = sg_losses(variant, m, sg, tape.constant(true_loss), tape.constant(true_grad), "l2", "l2")
        out.append(_param_check("sg-loss", f"{variant} module objective", loss, [mod.net], tol))
    return out


def run_check(target: str, activation: str = "tanh", seed: int = 0, points: int = 1000) -> list[CheckResult]:
    if target == "benchmarks":
        return check_benchmarks(points, seed)
    if target == "mlp":
        return check_mlp(activation, seed)
    if target == "sobolev-loss":
        return check_sobolev_loss(activation, seed)
    if target == "distill-loss":
        return check_distill_loss(seed)
    if target == "sg-loss":
        return check_sg_loss(seed)
    raise ValueError(f"unknown check target {target!r}; choose from {', '.join(TARGETS)}")
