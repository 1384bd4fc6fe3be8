"""The seven 2-D optimisation benchmarks with closed-form gradients.

Each function is available three ways: a vectorised numpy value, a
hand-derived numpy gradient, and a graph builder made from autodiff
primitives (used to cross-check the engine against the closed forms).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad

BUKIN_GUARD = 1e-9


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkFn:
    name: str
    domain: tuple  # ((x_lo, x_hi), (y_lo, y_hi))
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    df: Callable[[np.ndarray, np.ndarray], tuple]
    graph: Callable | None = None  # (x_node, y_node) -> node
    singular: Callable | None = None  # (x, y) -> distance-like mask of non-differentiable points

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.domain[0][0], self.domain[1][0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.domain[0][1], self.domain[1][1]])

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.lower) & (p <= self.upper), axis=1)

    def value(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return self.f(p[:, 0], p[:, 1])

    def gradient(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        gx, gy = self.df(p[:, 0], p[:, 1])
        return np.stack([np.broadcast_to(gx, p[:, 0].shape), np.broadcast_to(gy, p[:, 0].shape)], axis=1)


# -- formulas ---------------------------------------------------------------

def _ackley(x, y):
    r = np.sqrt(0.5 * (x**2 + y**2))
    c = 0.5 * (np.cos(2 * np.pi * x) + np.cos(2 * np.pi * y))
    return -20.0 * np.exp(-0.2 * r) - np.exp(c) + np.e + 20.0


def _ackley_grad(x, y):
    r = np.sqrt(0.5 * (x**2 + y**2))
    c = 0.5 * (np.cos(2 * np.pi * x) + np.cos(2 * np.pi * y))
    # d/dx of -20 exp(-0.2 r) = 4 exp(-0.2 r) * dr/dx, dr/dx = 0.5 x / r
    with np.errstate(invalid="ignore", divide="ignore"):
        radial = np.where(r > 0, 2.0 * np.exp(-0.2 * r) / np.where(r > 0, r, 1.0), 0.0)
    wave = np.pi * np.exp(c)
    return radial * x + wave * np.sin(2 * np.pi * x), radial * y + wave * np.sin(2 * np.pi * y)


def _ackley_graph(x, y):
    r = ad.sqrt(0.5 * (x * x + y * y))
    c = 0.5 * (ad.cos(2 * np.pi * x) + ad.cos(2 * np.pi * y))
    return -20.0 * ad.exp(-0.2 * r) - ad.exp(c) + (np.e + 20.0)


def _beale_terms(x, y):
    return 1.5 - x + x * y, 2.25 - x + x * y**2, 2.625 - x + x * y**3


def _beale(x, y):
    a, b, c = _beale_terms(x, y)
    return a**2 + b**2 + c**2


def _beale_grad(x, y):
    a, b, c = _beale_terms(x, y)
    gx = 2 * a * (y - 1) + 2 * b * (y**2 - 1) + 2 * c * (y**3 - 1)
    gy = 2 * a * x + 2 * b * 2 * x * y + 2 * c * 3 * x * y**2
    return gx, gy


def _beale_graph(x, y):
    y2 = y * y
    a = 1.5 - x + x * y
    b = 2.25 - x + x * y2
    c = 2.625 - x + x * (y2 * y)
    return a * a + b * b + c * c


def _booth(x, y):
    return (x + 2 * y - 7) ** 2 + (2 * x + y - 5) ** 2


def _booth_grad(x, y):
    a = x + 2 * y - 7
    b = 2 * x + y - 5
    return 2 * a + 4 * b, 4 * a + 2 * b


def _booth_graph(x, y):
    a = x + 2.0 * y - 7.0
    b = 2.0 * x + y - 5.0
    return a * a + b * b


def _bukin(x, y):
    return 100.0 * np.sqrt(np.abs(y - 0.01 * x**2)) + 0.01 * np.abs(x + 10)


def _bukin_grad(x, y):
    u = y - 0.01 * x**2
    root = np.sqrt(np.abs(u))
    # d sqrt|u| = sign(u) / (2 sqrt|u|) du
    k = 50.0 * np.sign(u) / root
    return k * (-0.02 * x) + 0.01 * np.sign(x + 10), k


def _bukin_graph(x, y):
    u = y - 0.01 * (x * x)
    return 100.0 * ad.sqrt(ad.abs(u)) + 0.01 * ad.abs(x + 10.0)


def _bukin_singular(x, y):
    return np.minimum(np.abs(y - 0.01 * x**2), np.abs(x + 10))


def _mccormick(x, y):
    return np.sin(x + y) + (x - y) ** 2 - 1.5 * x + 2.5 * y + 1


def _mccormick_grad(x, y):
    c = np.cos(x + y)
    return c + 2 * (x - y) - 1.5, c - 2 * (x - y) + 2.5


def _mccormick_graph(x, y):
    d = x - y
    return ad.sin(x + y) + d * d - 1.5 * x + 2.5 * y + 1.0


def _rosenbrock(x, y):
    return 100.0 * (y - x**2) ** 2 + (x - 1) ** 2


def _rosenbrock_grad(x, y):
    u = y - x**2
    return -400.0 * x * u + 2 * (x - 1), 200.0 * u


def _rosenbrock_graph(x, y):
    u = y - x * x
    w = x - 1.0
    return 100.0 * (u * u) + w * w


def _styblinski_tang(x, y):
    return 0.5 * (x**4 - 16 * x**2 + 5 * x + y**4 - 16 * y**2 + 5 * y)


def _styblinski_tang_grad(x, y):
    return 0.5 * (4 * x**3 - 32 * x + 5), 0.5 * (4 * y**3 - 32 * y + 5)


def _styblinski_tang_graph(x, y):
    def part(t):
        t2 = t * t
        return t2 * t2 - 16.0 * t2 + 5.0 * t
    return 0.5 * (part(x) + part(y))


BENCHMARKS: dict[str, BenchmarkFn] = {
    "ackley": BenchmarkFn("ackley", ((-5.0, 5.0), (-5.0, 5.0)), _ackley, _ackley_grad, _ackley_graph),
    "beale": BenchmarkFn("beale", ((-4.5, 4.5), (-4.5, 4.5)), _beale, _beale_grad, _beale_graph),
    "booth": BenchmarkFn("booth", ((-10.0, 10.0), (-10.0, 10.0)), _booth, _booth_grad, _booth_graph),
    "bukin": BenchmarkFn("bukin", ((-15.0, -5.0), (-3.0, 3.0)), _bukin, _bukin_grad, _bukin_graph,
                         _bukin_singular),
    "mccormick": BenchmarkFn("mccormick", ((-1.5, 4.0), (-3.0, 4.0)), _mccormick, _mccormick_grad,
                             _mccormick_graph),
    "rosenbrock": BenchmarkFn("rosenbrock", ((-2.0, 2.0), (-2.0, 2.0)), _rosenbrock, _rosenbrock_grad,
                              _rosenbrock_graph),
    "styblinski_tang": BenchmarkFn("styblinski_tang", ((-5.0, 5.0), (-5.0, 5.0)), _styblinski_tang,
                                   _styblinski_tang_grad, _styblinski_tang_graph),
}
NAMES = tuple(BENCHMARKS)


def get_benchmark(fn) -> BenchmarkFn:
    if isinstance(fn, BenchmarkFn):
        return fn
    try:
        return BENCHMARKS[fn]
    except KeyError:
        raise KeyError(f"unknown benchmark {fn!r}; choose from {', '.join(NAMES)}") from None


def _check_domain(bench: BenchmarkFn, points: np.ndarray) -> None:
    inside = bench.contains(points)
    if not np.all(inside):
        bad = np.atleast_2d(points)[~inside][0]
        raise DomainError(f"{bench.name}: point {tuple(bad)} outside domain {bench.domain}")


def eval_benchmark(name, point) -> np.ndarray | float:
    """Function value at one point ``(x, y)`` or at each row of an ``(n, 2)`` array."""
    bench = get_benchmark(name)
    p = np.asarray(point, dtype=np.float64)
    _check_domain(bench, p)
    out = bench.value(p)
    return float(out[0]) if p.ndim == 1 else out


def grad_benchmark(name, point) -> np.ndarray:
    bench = get_benchmark(name)
    p = np.asarray(point, dtype=np.float64)
    _check_domain(bench, p)
    if bench.singular is not None:
        pts = np.atleast_2d(p)
        if np.any(bench.singular(pts[:, 0], pts[:, 1]) == 0.0):
            raise DomainError(f"{bench.name}: gradient undefined on the non-differentiable locus")
    g = bench.gradient(p)
    return g[0] if p.ndim == 1 else g


def graph_benchmark(name, point_node: ad.Node) -> ad.Node:
    """Build the function from tape primitives on a ``(2,)`` or ``(n, 2)`` node."""
    bench = get_benchmark(name)
    if point_node.ndim == 1:
        x, y = point_node[0], point_node[1]
    else:
        x, y = point_node[:, 0], point_node[:, 1]
    return bench.graph(x, y)


def sample_domain(name, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. uniform points over the function's rectangle."""
    if n < 1:
        raise ValueError("n must be >= 1")
    bench = get_benchmark(name)
    pts = rng.uniform(bench.lower, bench.upper, size=(n, 2))
    if bench.singular is not None:
        bad = bench.singular(pts[:, 0], pts[:, 1]) < BUKIN_GUARD
        while np.any(bad):
            pts[bad] = rng.uniform(bench.lower, bench.upper, size=(int(bad.sum()), 2))
            bad = bench.singular(pts[:, 0], pts[:, 1]) < BUKIN_GUARD
    return pts


def lattice(name, shape=(50, 50)) -> np.ndarray:
    """Regular grid over the domain, row-major with x varying fastest."""
    bench = get_benchmark(name)
    xs = np.linspace(*bench.domain[0], shape[0])
    ys = np.linspace(*bench.domain[1], shape[1])
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def constant_benchmark(c: float = 0.0, domain=((-1.0, 1.0), (-1.0, 1.0)), name="constant") -> BenchmarkFn:
    """A flat target, handy as a trivially learnable fixture."""
    return BenchmarkFn(
        name,
        domain,
        lambda x, y: np.full(np.shape(x), float(c)),
        lambda x, y: (np.zeros(np.shape(x)), np.zeros(np.shape(y))),
        lambda x, y: 0.0 * x + float(c),
    )


MCCORMICK_MINIMUM = (-0.54719, -1.54719)
