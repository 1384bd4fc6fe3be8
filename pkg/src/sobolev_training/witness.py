"""Executable constructions behind the sample-complexity results.

* :func:`approximate_c1_by_pwl` builds a continuous piecewise-linear function
  that is within ``eps`` of a C1 function in value and (off the knots) in
  derivative, using a uniform grid of spacing ``min(delta1, eps / 2M)``.
* :func:`build_interpolant_1d` sums disjoint three-segment bumps into a
  function matching prescribed values and derivatives at finitely many points,
  i.e. a zero-loss first-order Sobolev fit.
* :func:`pwl_to_relu_net` realises any piecewise-linear function exactly as a
  one-hidden-layer ReLU network.
* :func:`recover_gaussian` identifies a Gaussian density from its value and
  derivative at a single point.  With values alone two points do not suffice;
  with values and derivatives one does.

Lemma-style guarantees are checked here by dense sampling, not proved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import Mlp, TrainStep, init_mlp, make_optimizer
from .seeding import child_seed
from .sobolev import LossSpec, SobolevBatch, pointwise_loss, sobolev_loss

MODULUS_SAFETY = 2.0
DENSE_SAMPLES = 20_001
MAX_KNOTS = 10_000_000


class WitnessError(ValueError):
    pass


@dataclass
class PwlFunction:
    """Continuous piecewise-linear function given by knots and segment slopes.

    On segment ``j`` (``knots[j] <= x < knots[j+1]``) the value is
    ``values[j] + slopes[j] * (x - knots[j])``.  Outside the knots the
    function continues with ``left_slope`` / ``right_slope`` (0 means
    constant extrapolation).
    """

    knots: np.ndarray
    values: np.ndarray
    slopes: np.ndarray | None = None
    left_slope: float = 0.0
    right_slope: float = 0.0

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=np.float64).ravel()
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.knots.size < 1 or self.knots.shape != self.values.shape:
            raise WitnessError("need at least one knot and one value per knot")
        if np.any(np.diff(self.knots) <= 0):
            raise WitnessError("knots must be strictly increasing")
        if self.slopes is None:
            self.slopes = np.diff(self.values) / np.diff(self.knots)
        else:
            self.slopes = np.asarray(self.slopes, dtype=np.float64).ravel()
            if self.slopes.size != self.knots.size - 1:
                raise WitnessError("need one slope per segment")

    def _segments(self, x):
        x = np.asarray(x, dtype=np.float64)
        j = np.searchsorted(self.knots, x, side="right") - 1
        return x, j

    def __call__(self, x):
        x, j = self._segments(x)
        k, v = self.knots, self.values
        inner = np.clip(j, 0, max(k.size - 2, 0))
        if k.size > 1:
            out = v[inner] + self.slopes[inner] * (x - k[inner])
        else:
            out = np.full(x.shape, v[0])
        out = np.where(x < k[0], v[0] + self.left_slope * (x - k[0]), out)
        out = np.where(x >= k[-1], v[-1] + self.right_slope * (x - k[-1]), out)
        return out

    def derivative(self, x):
        """Right derivative (equal to the derivative away from the knots)."""
        x, j = self._segments(x)
        k = self.knots
        inner = np.clip(j, 0, max(k.size - 2, 0))
        out = self.slopes[inner] if k.size > 1 else np.zeros(x.shape)
        out = np.where(x < k[0], self.left_slope, out)
        return np.where(x >= k[-1], self.right_slope, out)


@dataclass
class InterpolantSpec:
    points: np.ndarray
    values: np.ndarray
    derivatives: np.ndarray
    eps: float | None = None  # None: 1/10 of the smallest gap

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).ravel()
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.derivatives = np.asarray(self.derivatives, dtype=np.float64).ravel()
        if not (self.points.shape == self.values.shape == self.derivatives.shape) or self.points.size < 1:
            raise WitnessError("points, values and derivatives must be equally long and nonempty")
        if np.any(np.diff(self.points) <= 0):
            raise WitnessError("points must be strictly increasing")
        gap = float(np.min(np.diff(self.points))) if self.points.size > 1 else math.inf
        if self.eps is None:
            self.eps = gap / 10.0 if math.isfinite(gap) else 1.0
        if not self.eps > 0 or not self.eps < gap / 5.0:
            raise WitnessError(f"half-width eps={self.eps} must satisfy 0 < eps < min gap / 5 = {gap / 5.0}")


@dataclass
class GaussianParams:
    mu: float
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise WitnessError("variance must be positive")

    def density(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.exp(-((x - self.mu) ** 2) / (2 * self.var)) / np.sqrt(2 * np.pi * self.var)

    def derivative(self, x):
        x = np.asarray(x, dtype=np.float64)
        return -(x - self.mu) / self.var * self.density(x)


# -- Lemma 1 ---------------------------------------------------------------

def _sampled_modulus(fp_samples: np.ndarray, lag: int) -> float:
    """max |f'(a) - f'(b)| over sample pairs at most ``lag`` grid steps apart."""
    worst = 0.0
    for k in range(1, min(lag, fp_samples.size - 1) + 1):
        worst = max(worst, float(np.max(np.abs(fp_samples[k:] - fp_samples[:-k]))))
    return worst


def approximate_c1_by_pwl(f, fprime, interval, eps: float, samples: int = DENSE_SAMPLES) -> PwlFunction:
    """Grid interpolant of ``f`` with spacing below ``min(delta1, eps / (2 M))``.

    ``delta1`` (the uniform-continuity radius of ``f'`` for ``eps``) is found
    by halving until the sampled modulus, inflated by ``MODULUS_SAFETY``,
    drops below ``eps``.  ``M`` is the sampled sup of ``|f'|``.
    """
    a, b = (float(t) for t in interval)
    if not b > a:
        raise WitnessError("interval must have positive length")
    if not eps > 0:
        raise WitnessError("eps must be positive")
    length = b - a
    grid = np.linspace(a, b, samples)
    h = grid[1] - grid[0]
    fp = np.asarray(fprime(grid), dtype=np.float64) * np.ones_like(grid)
    big_m = float(np.max(np.abs(fp)))

    delta1 = length
    while MODULUS_SAFETY * _sampled_modulus(fp, int(math.ceil(delta1 / h))) >= eps:
        delta1 /= 2.0
        if delta1 < h:
            raise WitnessError("derivative varies faster than the sampling grid resolves; delta underflow")
    delta = min(delta1, eps / (2.0 * big_m)) if big_m > 0 else delta1

    segments = int(math.floor(length / delta)) + 1
    if segments > MAX_KNOTS or delta <= length * 1e-12:
        raise WitnessError(f"delta={delta:g} too small for eps={eps:g}")
    knots = np.linspace(a, b, segments + 1)
    return PwlFunction(knots, np.asarray(f(knots), dtype=np.float64) * np.ones_like(knots))


# -- Proposition 1 (1-D) ---------------------------------------------------

def build_interpolant_1d(spec: InterpolantSpec) -> PwlFunction:
    """Sum of bumps supported on ``[s - 2e, s + 2e]`` with ``h(s) = f``, ``h'(s) = g``.

    Each bump rises linearly from 0 to ``f - g e``, follows ``f + g (x - s)``
    on ``[s - e, s + e]`` and falls back to 0.  The point ``s`` itself is a
    knot anchoring the middle line, so value and slope at ``s`` are exact.
    """
    e = spec.eps
    knots, values, slopes = [], [], []
    for s, fv, gv in zip(spec.points, spec.values, spec.derivatives):
        lo, hi = fv - gv * e, fv + gv * e
        knots += [s - 2 * e, s - e, s, s + e, s + 2 * e]
        values += [0.0, lo, fv, hi, 0.0]
        slopes += [lo / e, gv, gv, -hi / e, 0.0]
    # the trailing slope of each bump bridges to the next bump at height 0
    return PwlFunction(np.array(knots), np.array(values), np.array(slopes[:-1]))


def interpolant_training_loss(h: PwlFunction, spec: InterpolantSpec) -> float:
    """First-order Sobolev loss (l2 on values and derivatives) of ``h`` at the points of ``spec``."""
    tape = ad.Tape()
    pred = tape.constant(np.asarray(h(spec.points))[:, None])
    dpred = tape.constant(np.asarray(h.derivative(spec.points))[:, None])
    loss = ad.add(
        pointwise_loss("l2", pred, tape.constant(spec.values[:, None])),
        pointwise_loss("l2", dpred, tape.constant(spec.derivatives[:, None])),
    )
    return float(loss.value)


# -- ReLU realisation ------------------------------------------------------

def pwl_to_relu_net(p: PwlFunction) -> Mlp:
    """One-hidden-layer ReLU network equal to ``p`` everywhere.

    Unit ``j`` computes ``relu(x - knot_j)`` with output weight equal to the
    slope change at that knot; one extra unit ``relu(knot_0 - x)`` carries the
    left extrapolation slope, and the output bias is ``p(knot_0)``.
    """
    k = p.knots
    n = k.size
    inner = list(p.slopes)
    left_of = np.array([p.left_slope] + inner)
    right_of = np.array(inner + [p.right_slope])
    change = right_of - left_of
    change[0] += p.left_slope  # relu(x - k0) - relu(k0 - x) = x - k0 carries the left slope
    w0 = np.concatenate([np.ones(n), [-1.0]])[None, :]
    b0 = np.concatenate([-k, [k[0]]])
    w1 = np.concatenate([change, [-p.left_slope]])[:, None]
    b1 = np.array([p.values[0]])
    return Mlp((1, n + 1, 1), "relu", "linear", [w0, w1], [b0, b1])


@dataclass
class ReluFit:
    loss: float
    network: Mlp
    attempts: int
    losses: list


def fit_relu_net(spec: InterpolantSpec, hidden=(128, 128), steps: int = 4000, lr: float = 1e-3,
                 final_lr: float = 1e-6, restarts: int = 8, seed: int = 0, target: float = 1e-6) -> ReluFit:
    """Train ReLU MLPs on the values and derivatives in ``spec`` with the first-order Sobolev loss.

    Gradients of the derivative term are blind to where the kinks sit, so a
    run only succeeds if its kinks already separate the data points.  Fresh
    zero-bias networks put every first-layer kink at the origin; here the
    first-layer biases are redrawn to spread the kinks over the data span.
    Even then a run can stall with two points sharing one linear piece, so
    up to ``restarts`` independent runs are made until one reaches ``target``.
    The learning rate decays geometrically from ``lr`` to ``final_lr``.
    """
    lo, hi = spec.points[0] - 2 * spec.eps, spec.points[-1] + 2 * spec.eps
    batch = SobolevBatch(spec.points[:, None], spec.values[:, None], spec.derivatives[:, None, None])
    best, losses = None, []
    for attempt in range(restarts):
        net = init_mlp((1, *hidden, 1), child_seed(seed, "relu-fit", attempt), activation="relu")
        kinks = np.random.default_rng(child_seed(seed, "relu-kinks", attempt)).uniform(lo, hi, hidden[0])
        net.biases[0][:] = -net.weights[0][0] * kinks
        loss = sobolev_loss(net, batch, LossSpec(), tape=ad.Tape())
        opt = make_optimizer("adam", net.params, lr)
        trainer = TrainStep(loss, [net], opt)
        for k in range(steps):
            opt.learning_rate = lr * (final_lr / lr) ** (k / steps)
            trainer.step()
        loss.tape.invalidate()
        final = float(loss.value)
        losses.append(final)
        if best is None or final < best.loss:
            best = ReluFit(final, net, attempt + 1, losses)
        if final < target:
            break
    best.attempts = len(losses)
    return best


# -- Gaussian identification -----------------------------------------------

def recover_gaussian(x: float, alpha: float, beta: float, tol: float = 1e-14) -> GaussianParams:
    """Mean and variance of the Gaussian density with value ``alpha`` and slope ``beta`` at ``x``.

    With ``t = ln var`` and ``r = beta / alpha`` the constraint reads
    ``2 ln(sqrt(2 pi) alpha) = -t - r^2 e^t``; the right side is strictly
    decreasing, so bisection on ``t`` finds the unique root.  Then
    ``mu = x + var * r``.
    """
    x, alpha, beta = float(x), float(alpha), float(beta)
    if not (alpha > 0 and math.isfinite(alpha) and math.isfinite(beta) and math.isfinite(x)):
        raise WitnessError("not a Gaussian value/derivative pair: density value must be positive and finite")
    r = beta / alpha
    c = 2.0 * math.log(math.sqrt(2.0 * math.pi) * alpha)

    def resid(t):
        return -t - r * r * math.exp(t) - c

    lo, hi = math.log(1e-12), math.log(1e12)
    for _ in range(64):
        if resid(lo) > 0 > resid(hi):
            break
        width = hi - lo
        lo, hi = lo - width, min(hi + width, 700.0)
    else:
        raise WitnessError("not a Gaussian value/derivative pair: no bracketing sign change")
    if not resid(lo) > 0 > resid(hi):
        raise WitnessError("not a Gaussian value/derivative pair: no bracketing sign change")

    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if resid(mid) > 0:
            lo = mid
        else:
            hi = mid
    var = math.exp(0.5 * (lo + hi))
    mu = x + var * r
    if not math.isfinite(mu):
        raise WitnessError("not a Gaussian value/derivative pair: mean is not finite")
    params = GaussianParams(mu, var)
    a2, b2 = float(params.density(x)), float(params.derivative(x))
    if abs(a2 - alpha) > 1e-9 * abs(alpha) or abs(b2 - beta) > 1e-9 * max(abs(beta), abs(alpha)):
        raise WitnessError("not a Gaussian value/derivative pair: round trip does not reproduce the inputs")
    return params


# -- executable checks -----------------------------------------------------

def _check(name, error, tol, **extra) -> dict:
    return {"check": name, "max_error": float(error), "tol": float(tol), "passed": bool(error <= tol), **extra}


def check_interpolant(points: int = 12, seed: int = 0, min_gap: float = 0.5) -> list[dict]:
    """Zero-loss interpolant and its ReLU realisation on random 1-D data.

    The ReLU realisation sums terms of size about ``|f| / eps``, so its
    rounding error grows as points crowd together; ``min_gap`` keeps the
    data in the regime where 1e-10 absolute agreement is meaningful.
    """
    rng = np.random.default_rng(seed)
    s = np.sort(rng.uniform(-10.0, 10.0, size=points))
    while np.any(np.diff(s) < min_gap):
        s = np.sort(rng.uniform(-10.0, 10.0, size=points))
    spec = InterpolantSpec(s, rng.normal(0.0, 2.0, points), rng.normal(0.0, 2.0, points))
    h = build_interpolant_1d(spec)
    value_err = float(np.max(np.abs(h(spec.points) - spec.values)))
    step = spec.eps / 100.0
    fd = (h(spec.points + step) - h(spec.points - step)) / (2.0 * step)
    deriv_err = float(np.max(np.abs(fd - spec.derivatives)))
    loss = interpolant_training_loss(h, spec)

    net = pwl_to_relu_net(h)
    lo, hi = spec.points[0] - 4 * spec.eps, spec.points[-1] + 4 * spec.eps
    grid = np.linspace(lo, hi, 10_000)
    tape = ad.Tape()
    realised = net(tape.constant(grid[:, None])).value[:, 0]
    relu_err = float(np.max(np.abs(realised - h(grid))))
    return [
        _check("interpolant value at spec points", value_err, 1e-12),
        _check("interpolant fd derivative at spec points", deriv_err, 1e-6),
        _check("interpolant Sobolev training loss", loss, 0.0),
        _check("relu network vs piecewise-linear source", relu_err, 1e-10),
    ]


def check_gaussian_recovery(cases: int = 1000, seed: int = 0) -> list[dict]:
    """Round trip ``(mu, var, x) -> (alpha, beta) -> (mu, var)``."""
    rng = np.random.default_rng(seed)
    worst, worst_case = 0.0, None
    for _ in range(cases):
        mu = rng.uniform(-5.0, 5.0)
        var = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
        x = mu + np.sqrt(var) * rng.uniform(-3.0, 3.0)
        g = GaussianParams(mu, var)
        got = recover_gaussian(x, float(g.density(x)), float(g.derivative(x)))
        err = max(abs(got.mu - mu) / max(1.0, abs(mu)), abs(got.var - var) / var)
        if err > worst:
            worst, worst_case = err, {"mu": mu, "var": var, "x": float(x)}
    return [_check("gaussian recovery from one value/derivative pair", worst, 1e-8, worst_case=worst_case)]


def check_c1_approximation(eps: float = 0.1) -> list[dict]:
    """Both sup bounds for ``sin`` on ``[0, 2 pi]``, on a 10^4-point grid off the knots."""
    p = approximate_c1_by_pwl(np.sin, np.cos, (0.0, 2 * np.pi), eps)
    grid = np.linspace(0.0, 2 * np.pi, 10_000)
    grid = grid[~np.isin(grid, p.knots)]
    return [
        _check("C1 approximation value bound", float(np.max(np.abs(np.sin(grid) - p(grid)))), eps),
        _check("C1 approximation derivative bound", float(np.max(np.abs(np.cos(grid) - p.derivative(grid)))), eps),
    ]


def check_trained_relu(seed: int = 0) -> list[dict]:
    """A trained ReLU network reaches (near) zero Sobolev loss on four well-separated points."""
    rng = np.random.default_rng(child_seed(seed, "relu-spec"))
    s = np.sort(rng.uniform(-3.0, 3.0, 4))
    while np.any(np.diff(s) < 1.0):
        s = np.sort(rng.uniform(-3.0, 3.0, 4))
    fit = fit_relu_net(InterpolantSpec(s, rng.normal(size=4), rng.normal(size=4)), seed=seed)
    return [_check("trained relu network Sobolev loss", fit.loss, 1e-6, attempts=fit.attempts)]


def witness_report(cases: int = 1000, seed: int = 0) -> list[dict]:
    return (check_interpolant(seed=seed) + check_gaussian_recovery(cases, seed) + check_c1_approximation()
            + check_trained_relu(seed))


def dense_grids(seed: int = 0, points: int = 12, size: int = 10_000) -> dict:
    """Tables for inspection: the interpolant and its ReLU network, and the C1 approximation of sin.

    Returns ``{name: (header, rows)}``.
    """
    rng = np.random.default_rng(seed)
    s = np.sort(rng.uniform(-10.0, 10.0, size=points))
    while np.any(np.diff(s) < 0.5):
        s = np.sort(rng.uniform(-10.0, 10.0, size=points))
    spec = InterpolantSpec(s, rng.normal(0.0, 2.0, points), rng.normal(0.0, 2.0, points))
    h = build_interpolant_1d(spec)
    grid = np.linspace(s[0] - 4 * spec.eps, s[-1] + 4 * spec.eps, size)
    relu = pwl_to_relu_net(h)(ad.Tape().constant(grid[:, None])).value[:, 0]
    p = approximate_c1_by_pwl(np.sin, np.cos, (0.0, 2 * np.pi), 0.1)
    x = np.linspace(0.0, 2 * np.pi, size)
    return {
        "interpolant": (("x", "h", "dh", "relu_net"), np.column_stack([grid, h(grid), h.derivative(grid), relu])),
        "c1_sin": (("x", "sin", "cos", "p", "dp"), np.column_stack([x, np.sin(x), np.cos(x), p(x), p.derivative(x)])),
    }
