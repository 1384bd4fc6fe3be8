import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sobolev_training import autodiff as ad
from sobolev_training.gradcheck import check_sobolev_loss
from sobolev_training.nn import init_mlp
from sobolev_training.sobolev import (
    LossSpec,
    ProjectionSampler,
    SobolevBatch,
    pointwise_loss,
    sample_sphere,
    sobolev_loss,
    stochastic_sobolev_loss,
)


class Square:
    """m(x) = x^2 for scalar inputs."""

    activation = "tanh"

    def __call__(self, x):
        return ad.mul(x, x)


class Linear:
    """m(x) = x A + c."""

    activation = "tanh"

    def __init__(self, a, c):
        self.a, self.c = np.asarray(a, float), np.asarray(c, float)

    def __call__(self, x):
        return ad.add(ad.matmul(x, x.tape.constant(self.a)), x.tape.constant(self.c))


def test_hand_computed_one_point_loss():
    batch = SobolevBatch([[2.0]], [[0.0]], [[[0.0]]])
    assert float(sobolev_loss(Square(), batch, LossSpec()).value) == 32.0


def test_exact_model_has_zero_loss():
    rng = np.random.default_rng(0)
    a, c = rng.normal(size=(3, 2)), rng.normal(size=2)
    x = rng.normal(size=(10, 3))
    batch = SobolevBatch(x, x @ a + c, np.broadcast_to(a.T, (10, 2, 3)))
    assert float(sobolev_loss(Linear(a, c), batch, LossSpec()).value) == 0.0
    sampler = ProjectionSampler(2, seed=4)
    # J^T v is assembled by a different contraction order than grad <m, v>, so rounding remains
    assert float(stochastic_sobolev_loss(Linear(a, c), batch, LossSpec(), sampler).value) < 1e-28


def test_order_zero_is_plain_value_loss():
    net = init_mlp((2, 6, 1), 1)
    x = np.random.default_rng(1).normal(size=(7, 2))
    y = np.random.default_rng(2).normal(size=(7, 1))
    got = float(sobolev_loss(net, SobolevBatch(x, y), LossSpec(order=0, derivative_losses=())).value)
    pred = net(ad.Tape().constant(x)).value
    assert got == pytest.approx(np.mean(np.sum((pred - y) ** 2, axis=1)), rel=1e-14)


def test_missing_gradients_raise():
    with pytest.raises(ValueError):
        sobolev_loss(Square(), SobolevBatch([[1.0]], [[1.0]]), LossSpec())


def test_stochastic_loss_needs_jacobian():
    with pytest.raises(ValueError):
        stochastic_sobolev_loss(Square(), SobolevBatch([[1.0]], [[1.0]]), LossSpec(), ProjectionSampler(1))


def test_batch_shape_validation():
    with pytest.raises(ad.ShapeError):
        SobolevBatch(np.ones((3, 2)), np.ones((4, 1)))
    with pytest.raises(ad.ShapeError):
        SobolevBatch(np.ones((3, 2)), np.ones((3, 1)), np.ones((3, 1, 3)))


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        LossSpec(order=1, derivative_losses=())
    with pytest.raises(ValueError):
        LossSpec(derivative_weight=-1.0)


def test_relu_second_order_warns():
    net = init_mlp((2, 4, 1), 0, activation="relu")
    x = np.ones((2, 2))
    batch = SobolevBatch(x, np.ones((2, 1)), np.ones((2, 1, 2)), (np.ones((2, 2)), np.ones((2, 2))))
    with pytest.warns(RuntimeWarning):
        sobolev_loss(net, batch, LossSpec(order=2, derivative_losses=("l2", "l2")))


def test_derivative_weight_scales_only_the_derivative_term():
    net = init_mlp((2, 6, 1), 3, activation="tanh")
    rng = np.random.default_rng(5)
    batch = SobolevBatch(rng.normal(size=(5, 2)), rng.normal(size=(5, 1)), rng.normal(size=(5, 1, 2)))
    value = float(sobolev_loss(net, batch, LossSpec(order=0, derivative_losses=())).value)
    one = float(sobolev_loss(net, batch, LossSpec(derivative_weight=1.0)).value)
    three = float(sobolev_loss(net, batch, LossSpec(derivative_weight=3.0)).value)
    assert three - value == pytest.approx(3 * (one - value), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["l1", "l2"]))
def test_loss_is_nonnegative(seed, kind):
    rng = np.random.default_rng(seed)
    net = init_mlp((2, 5, 1), seed, activation="tanh")
    batch = SobolevBatch(rng.normal(size=(4, 2)), rng.normal(size=(4, 1)), rng.normal(size=(4, 1, 2)))
    assert float(sobolev_loss(net, batch, LossSpec(value_loss=kind, derivative_losses=(kind,))).value) >= 0.0


def test_scalar_output_projection_equals_full_loss():
    net = init_mlp((3, 6, 1), 2, activation="tanh")
    rng = np.random.default_rng(8)
    batch = SobolevBatch(rng.normal(size=(6, 3)), rng.normal(size=(6, 1)), rng.normal(size=(6, 1, 3)))
    full = float(sobolev_loss(net, batch, LossSpec()).value)
    for seed in range(5):
        proj = float(stochastic_sobolev_loss(net, batch, LossSpec(), ProjectionSampler(1, seed)).value)
        assert proj == pytest.approx(full, rel=1e-13)


def test_projected_term_expectation_is_full_term_over_output_dim():
    a_rng = np.random.default_rng(0)
    net = init_mlp((2, 5, 3), 6, activation="tanh")
    x = np.repeat(a_rng.normal(size=(1, 2)), 100_000, axis=0)
    tj = np.repeat(a_rng.normal(size=(1, 3, 2)), 100_000, axis=0)
    y = net(ad.Tape().constant(x[:1])).value.repeat(100_000, axis=0)  # value term vanishes
    batch = SobolevBatch(x, y, tj)
    full = float(sobolev_loss(net, batch, LossSpec()).value)
    proj = float(stochastic_sobolev_loss(net, batch, LossSpec(), ProjectionSampler(3, seed=1)).value)
    assert proj == pytest.approx(full / 3, rel=0.02)


def test_nested_parameter_gradient_matches_fd():
    assert all(r.passed for r in check_sobolev_loss("tanh", seed=3))


# -- sampler -----------------------------------------------------------------------

def test_samples_are_unit_vectors():
    s = ProjectionSampler(7, seed=0)
    v = s.sample(1000)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)
    assert abs(np.linalg.norm(sample_sphere(s)) - 1.0) < 1e-12


def test_one_dimensional_sphere_is_two_points():
    v = ProjectionSampler(1, seed=3).sample(500)
    assert set(np.unique(v)) <= {-1.0, 1.0}


def test_sphere_moments():
    v = ProjectionSampler(4, seed=11).sample(100_000)
    assert np.all(np.abs(v.mean(axis=0)) < 0.02)
    np.testing.assert_allclose((v**2).mean(axis=0), 0.25, rtol=0.02)


def test_sampler_determinism():
    assert np.array_equal(ProjectionSampler(3, seed=5).sample(10), ProjectionSampler(3, seed=5).sample(10))


@pytest.mark.parametrize("d", [2, 6, 32])
def test_projection_identity(d):
    a = np.random.default_rng(d).normal(size=d)
    v = ProjectionSampler(d, seed=100 + d).sample(100_000)
    assert np.mean((v @ a) ** 2) == pytest.approx(a @ a / d, rel=0.02)


def test_pointwise_kl_of_identical_distributions_is_zero():
    tape = ad.Tape()
    lp = tape.constant(np.log(np.full((3, 4), 0.25)))
    assert float(pointwise_loss("kl", lp, lp).value) == 0.0


def test_unknown_pointwise_loss():
    tape = ad.Tape()
    with pytest.raises(ValueError):
        pointwise_loss("huber", tape.constant(1.0), tape.constant(1.0))
