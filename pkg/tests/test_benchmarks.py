import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from sobolev_training import benchmarks as bm
from sobolev_training.gradcheck import check_benchmarks


@pytest.mark.parametrize(
    "name, point",
    [("rosenbrock", (1, 1)), ("booth", (1, 3)), ("ackley", (0, 0)), ("bukin", (-10, 1)), ("beale", (3, 0.5))],
)
def test_known_minima(name, point):
    assert abs(bm.eval_benchmark(name, point)) <= 1e-12


def test_mccormick_minimum_against_search_oracle():
    bench = bm.get_benchmark("mccormick")
    grid = bm.lattice(bench, (200, 200))
    start = grid[np.argmin(bench.value(grid))]
    res = minimize(lambda p: float(bench.value(p)[0]), start, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-14})
    np.testing.assert_allclose(res.x, bm.MCCORMICK_MINIMUM, atol=1e-4)
    value = bm.eval_benchmark("mccormick", bm.MCCORMICK_MINIMUM)
    assert value == pytest.approx(res.fun, abs=1e-8)
    assert value == pytest.approx(-1.9133, abs=1e-4)


def test_styblinski_tang_gradient_at_origin():
    np.testing.assert_array_equal(bm.grad_benchmark("styblinski_tang", (0.0, 0.0)), [2.5, 2.5])


@pytest.mark.parametrize("name, point", [("booth", (1, 3)), ("beale", (3, 0.5))])
def test_gradient_vanishes_at_minimum(name, point):
    np.testing.assert_allclose(bm.grad_benchmark(name, point), [0.0, 0.0], atol=1e-12)


def test_outside_domain_raises():
    with pytest.raises(bm.DomainError):
        bm.eval_benchmark("booth", (11.0, 0.0))
    with pytest.raises(bm.DomainError):
        bm.grad_benchmark("rosenbrock", [[0.0, 0.0], [3.0, 0.0]])


def test_bukin_locus_has_no_gradient():
    with pytest.raises(bm.DomainError):
        bm.grad_benchmark("bukin", (-12.0, 1.44))
    with pytest.raises(bm.DomainError):
        bm.grad_benchmark("bukin", (-10.0, 2.0))


def test_unknown_function():
    with pytest.raises(KeyError):
        bm.get_benchmark("sphere")


def test_gradients_match_fd_at_1000_points():
    results = check_benchmarks(points=1000, seed=1)
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


@pytest.mark.parametrize("name", bm.NAMES)
def test_samples_inside_domain_and_deterministic(name):
    a = bm.sample_domain(name, 500, np.random.default_rng(4))
    b = bm.sample_domain(name, 500, np.random.default_rng(4))
    assert np.array_equal(a, b)
    assert np.all(bm.get_benchmark(name).contains(a))


def test_ackley_samples_are_centred():
    pts = bm.sample_domain("ackley", 10_000, np.random.default_rng(0))
    assert np.all(np.abs(pts.mean(axis=0)) < 0.1)


def test_bukin_samples_avoid_the_ridge():
    bench = bm.get_benchmark("bukin")
    pts = bm.sample_domain(bench, 5000, np.random.default_rng(1))
    assert np.all(bench.singular(pts[:, 0], pts[:, 1]) >= bm.BUKIN_GUARD)


def test_sample_count_must_be_positive():
    with pytest.raises(ValueError):
        bm.sample_domain("booth", 0, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(bm.NAMES), st.floats(0, 1), st.floats(0, 1))
def test_vectorised_and_pointwise_agree(name, u, v):
    bench = bm.get_benchmark(name)
    p = bench.lower + np.array([u, v]) * (bench.upper - bench.lower)
    single = bm.eval_benchmark(name, p)
    batch = bm.eval_benchmark(name, np.stack([p, p]))
    assert isinstance(single, float) and batch[0] == single


def test_lattice_shape_and_order():
    pts = bm.lattice("booth", (3, 2))
    assert pts.shape == (6, 2)
    np.testing.assert_array_equal(pts[:3, 1], -10.0)
    np.testing.assert_array_equal(pts[:3, 0], [-10.0, 0.0, 10.0])
