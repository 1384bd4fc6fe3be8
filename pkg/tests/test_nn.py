import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sobolev_training import autodiff as ad
from sobolev_training.gradcheck import check_mlp, fd_arrays, norm_rel
from sobolev_training.nn import (
    Mlp,
    TrainStep,
    init_mlp,
    input_gradient,
    load_mlp,
    make_optimizer,
    optimizer_step,
    predict,
    save_mlp,
)
from sobolev_training.sobolev import LossSpec, SobolevBatch, sobolev_loss


def test_init_is_deterministic():
    a = init_mlp((2, 256, 256, 1), 7)
    b = init_mlp((2, 256, 256, 1), 7)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def test_parameter_count():
    assert init_mlp((2, 256, 256, 1), 0).num_params == 66_817


def test_fresh_biases_are_zero():
    assert all(not np.any(b) for b in init_mlp((2, 256, 256, 1), 3).biases)


@pytest.mark.parametrize("sizes", [(), (3,), (2, 0, 1), (2, -1, 1)])
def test_invalid_layer_sizes(sizes):
    with pytest.raises(ValueError):
        init_mlp(sizes, 0)


def test_he_and_glorot_limits():
    relu = init_mlp((100, 50, 1), 0, activation="relu")
    tanh = init_mlp((100, 50, 1), 0, activation="tanh")
    assert np.max(np.abs(relu.weights[0])) <= np.sqrt(6 / 100)
    assert np.max(np.abs(tanh.weights[0])) <= np.sqrt(6 / 150)
    assert np.max(np.abs(relu.weights[0])) > np.sqrt(6 / 150)


def test_zero_network_outputs_zero():
    net = Mlp((3, 5, 1))
    out = predict(net, np.random.default_rng(0).normal(size=(4, 3)))
    assert np.array_equal(out, np.zeros((4, 1)))


def test_one_unit_network():
    net = Mlp((1, 1, 1), "relu", "linear", [np.array([[2.0]]), np.array([[1.0]])], [np.array([1.0]), np.array([0.0])])
    assert float(predict(net, np.array([[3.0]]))[0, 0]) == 7.0


def test_single_point_input():
    net = init_mlp((2, 4, 1), 0)
    tape = ad.Tape()
    assert net(tape.constant([0.5, -0.5])).shape == (1,)


def test_dimension_mismatch():
    net = init_mlp((2, 4, 1), 0)
    with pytest.raises(ad.ShapeError):
        net(ad.Tape().constant(np.ones((3, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_log_softmax_head_is_a_distribution(seed, scale):
    net = init_mlp((3, 8, 5), seed, head="log_softmax")
    x = np.random.default_rng(seed).normal(size=(6, 3)) * scale
    p = np.exp(predict(net, x))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_input_gradient_of_zero_network():
    net = Mlp((3, 4, 1))
    tape = ad.Tape()
    g = input_gradient(net, tape.constant(np.ones((2, 3))))
    assert np.array_equal(g.value, np.zeros((2, 3)))


def test_input_gradient_needs_projection_for_vector_output():
    net = init_mlp((3, 4, 2), 0)
    with pytest.raises(ValueError):
        input_gradient(net, ad.Tape().constant(np.ones((2, 3))))


@pytest.mark.parametrize("activation", ["tanh", "sigmoid"])
def test_input_and_parameter_gradients_match_fd(activation):
    results = check_mlp(activation, seed=1, points=100)
    assert all(r.passed for r in results), [r.line() for r in results]


def test_relu_gradient_constant_within_region():
    net = init_mlp((2, 16, 1), 4)
    x = np.array([[0.3, -0.7]])
    g1 = predict(net, x, with_grad=True)[1]
    g2 = predict(net, x * (1 + 1e-7), with_grad=True)[1]
    assert np.array_equal(g1, g2)


def test_nested_parameter_gradient_matches_fd_on_sampled_coordinates():
    rng = np.random.default_rng(2)
    net = init_mlp((2, 10, 10, 1), 9, activation="tanh")
    x = rng.normal(size=(8, 2))
    batch = SobolevBatch(x, np.sin(x[:, :1]), np.cos(x)[:, None, :])
    loss = sobolev_loss(net, batch, LossSpec(), tape=ad.Tape())
    (g,) = ad.grad(loss, [net.bind(loss.tape)[2]])
    w = net.weights[1]
    picks = rng.choice(w.size, size=50, replace=False)

    def value():
        loss.tape.invalidate()
        return float(loss.value)

    flat, approx = w.reshape(-1), np.zeros(50)
    for k, i in enumerate(picks):
        orig = flat[i]
        flat[i] = orig + 1e-5
        up = value()
        flat[i] = orig - 1e-5
        down = value()
        flat[i] = orig
        approx[k] = (up - down) / 2e-5
    loss.tape.invalidate()
    assert norm_rel(g.value.reshape(-1)[picks], approx) < 1e-4


# -- optimizers ------------------------------------------------------------------

def test_adam_first_step_has_magnitude_lr():
    p = [np.array([1.0, -2.0, 3.0])]
    g = [np.array([0.5, -4.0, 1e-3])]
    state = make_optimizer("adam", p, 0.01)
    optimizer_step(state, p, g)
    np.testing.assert_allclose(p[0], [0.99, -1.99, 2.99], rtol=0, atol=1e-7)
    assert state.step_count == 1


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, 2.0])]
    state = make_optimizer("adam", p, 0.1)
    optimizer_step(state, p, [np.zeros(2)])
    assert np.array_equal(p[0], [1.0, 2.0])


def test_sgd_momentum_second_update():
    p = [np.array([0.0])]
    g = [np.array([2.0])]
    state = make_optimizer("sgd_momentum", p, 0.1)
    optimizer_step(state, p, g)
    before = p[0].copy()
    optimizer_step(state, p, g)
    np.testing.assert_allclose(before - p[0], 0.1 * 1.9 * 2.0, rtol=1e-15)


def test_optimizer_shape_mismatch():
    p = [np.zeros(3)]
    state = make_optimizer("adam", p, 0.1)
    with pytest.raises(ad.ShapeError):
        optimizer_step(state, p, [np.zeros(4)])


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", [np.zeros(1)], 0.1)


def test_step_count_strictly_increases_and_buffers_mirror_params():
    net = init_mlp((2, 3, 1), 0)
    state = make_optimizer("adam", net.params, 1e-3)
    assert [m.shape for m in state.moments] == [p.shape for p in net.params]
    for k in range(1, 4):
        optimizer_step(state, net.params, [np.ones_like(p) for p in net.params])
        assert state.step_count == k


def _train(seed):
    net = init_mlp((2, 8, 1), seed, activation="tanh")
    x = np.random.default_rng(seed).normal(size=(16, 2))
    tape = ad.Tape()
    pred = net(tape.constant(x))
    d = ad.sub(pred, tape.constant(np.sin(x[:, :1])))
    step = TrainStep(ad.mean(ad.mul(d, d)), [net], make_optimizer("adam", net.params, 1e-2))
    losses = [step.step() for _ in range(50)]
    return net, losses


def test_training_trajectory_is_deterministic():
    a, la = _train(3)
    b, lb = _train(3)
    assert la == lb and all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert la[-1] < la[0]


def test_trainstep_gradients_match_fd():
    net = init_mlp((2, 5, 1), 1, activation="tanh")
    x = np.random.default_rng(1).normal(size=(6, 2))
    tape = ad.Tape()
    d = ad.sub(net(tape.constant(x)), tape.constant(np.cos(x[:, 1:])))
    loss = ad.mean(ad.mul(d, d))
    step = TrainStep(loss, [net])

    def value():
        tape.invalidate()
        return float(loss.value)

    ref = fd_arrays(value, net.params, 1e-4)
    got = step.gradients()
    assert norm_rel(np.concatenate([g.ravel() for g in got]), np.concatenate([r.ravel() for r in ref])) < 1e-8


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    net = init_mlp((3, 7, 2), 5, activation="tanh", head="log_softmax")
    path = save_mlp(net, tmp_path / "net.npz")
    back = load_mlp(path)
    assert back.layer_sizes == net.layer_sizes and back.activation == "tanh" and back.head == "log_softmax"
    assert all(np.array_equal(p, q) for p, q in zip(net.params, back.params))


def test_checkpoint_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, format=np.array("something-else"))
    with pytest.raises(ValueError):
        load_mlp(path)
