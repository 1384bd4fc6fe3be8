import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sobolev_training import autodiff as ad
from sobolev_training.distill import (
    DistillConfig,
    distill_loss,
    make_states,
    make_synthetic_teacher,
    policy_metrics,
    run_distillation,
)
from sobolev_training.gradcheck import check_distill_loss
from sobolev_training.nn import Mlp, init_mlp
from sobolev_training.sobolev import ProjectionSampler


def copy_of(teacher):
    net = teacher.network
    return Mlp(net.layer_sizes, net.activation, net.head,
               [w.copy() for w in net.weights], [b.copy() for b in net.biases])


def states(n, d=16, seed=0):
    return np.random.default_rng(seed).standard_normal((n, d))


def test_teacher_probabilities_sum_to_one():
    t = make_synthetic_teacher(seed=3)
    np.testing.assert_allclose(t.probs(states(1000)).sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(t.log_probs(states(1000) * 50)))


def test_teacher_is_deterministic_and_frozen():
    a, b = make_synthetic_teacher(seed=5), make_synthetic_teacher(seed=5)
    s = states(20)
    assert np.array_equal(a.log_probs(s), b.log_probs(s))
    with pytest.raises(ValueError):
        a.network.weights[0][0, 0] = 1.0


def test_hot_teacher_is_uniform():
    t = make_synthetic_teacher(temperature=1e6, seed=1)
    p = t.probs(states(500))
    kl = np.mean(np.sum(np.full_like(p, 1 / 6) * (np.log(1 / 6) - np.log(p)), axis=1))
    assert kl < 1e-6


def test_teacher_argument_validation():
    with pytest.raises(ValueError):
        make_synthetic_teacher(d=1)
    with pytest.raises(ValueError):
        make_synthetic_teacher(actions=1)
    with pytest.raises(ValueError):
        make_synthetic_teacher(temperature=0.0)


def test_teacher_jacobian_matches_fd():
    t = make_synthetic_teacher(d=4, actions=3, hidden=(8,), seed=2, activation="tanh")
    s = states(5, d=4)
    jac = t.log_prob_jacobian(s)
    h = 1e-6
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        fd = (t.log_probs(s + e) - t.log_probs(s - e)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, k], fd, atol=1e-7)


@pytest.mark.parametrize("alpha", [0.0, 1.0, 7.5])
def test_student_equal_to_teacher_has_zero_loss(alpha):
    t = make_synthetic_teacher(seed=4)
    loss = distill_loss(copy_of(t), t, states(64), alpha, ProjectionSampler(6, seed=0))
    assert abs(float(loss.value)) <= 1e-10


def test_alpha_zero_is_plain_kl():
    t = make_synthetic_teacher(seed=0)
    student = init_mlp((16, 32, 6), 1, head="log_softmax")
    s = states(50, seed=2)
    got = float(distill_loss(student, t, s, 0.0).value)
    kl, _ = policy_metrics(student, t.log_probs(s), s)
    assert got == pytest.approx(kl, rel=1e-13)


def test_sampler_must_match_action_count():
    t = make_synthetic_teacher(seed=0)
    student = init_mlp((16, 32, 6), 1, head="log_softmax")
    with pytest.raises(ValueError):
        distill_loss(student, t, states(4), 1.0, ProjectionSampler(5))
    with pytest.raises(ValueError):
        distill_loss(student, t, states(4), 1.0)
    with pytest.raises(ValueError):
        distill_loss(student, t, np.zeros((0, 16)), 0.0)


def _derivative_term(student, teacher, s, seed):
    total = float(distill_loss(student, teacher, s, 1.0, ProjectionSampler(teacher.action_count, seed)).value)
    return total - float(distill_loss(student, teacher, s, 0.0).value)


def test_two_action_monte_carlo_term_is_stable():
    t = make_synthetic_teacher(d=3, actions=2, hidden=(16,), seed=6)
    student = init_mlp((3, 8, 2), 2, head="log_softmax")
    s = np.repeat(states(1, d=3, seed=9), 100_000, axis=0)
    a = _derivative_term(student, t, s, seed=1)
    b = _derivative_term(student, t, s, seed=2)
    assert a == pytest.approx(b, rel=0.02)
    # v uniform on the circle: E |D^T v|^2 = |D|_F^2 / 2
    tape = ad.Tape()
    x = tape.constant(s[:1])
    out = student(x)
    rows = [ad.grad(ad.sum(out[:, k]), [x])[0].value[0] for k in range(2)]
    diff = np.stack(rows) - t.log_prob_jacobian(s[:1])[0]
    assert a == pytest.approx(np.sum(diff**2) / 2, rel=0.02)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(-20, 20))
def test_projected_term_ignores_logit_shift(seed, shift):
    t = make_synthetic_teacher(d=5, actions=4, hidden=(8,), seed=seed)
    student = init_mlp((5, 8, 4), seed + 1, head="log_softmax", activation="tanh")
    s = states(16, d=5, seed=seed)
    before = _derivative_term(student, t, s, seed=3)
    student.biases[-1] += shift
    after = _derivative_term(student, t, s, seed=3)
    assert after == pytest.approx(before, rel=1e-9, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 10))
def test_loss_is_nonnegative(seed, alpha):
    t = make_synthetic_teacher(d=4, actions=3, hidden=(8,), seed=seed)
    student = init_mlp((4, 6, 3), seed, head="log_softmax")
    assert float(distill_loss(student, t, states(8, d=4, seed=seed), alpha, ProjectionSampler(3, seed)).value) >= 0


def test_parameter_gradient_matches_fd():
    results = check_distill_loss(seed=2)
    assert all(r.passed for r in results), [r.line() for r in results]


def test_config_validation():
    for bad in (dict(data_fraction=0.0), dict(data_fraction=1.5), dict(alpha=-1.0), dict(num_projections=0),
                dict(derivative_loss="huber")):
        with pytest.raises(ValueError):
            DistillConfig(**bad)


def test_split_is_disjoint():
    cfg = DistillConfig(num_states=100, data_fraction=0.3)
    train, test = make_states(cfg)
    assert train.shape == (30, 16) and test.shape == (70, 16)
    assert not np.any(np.all(train[:, None, :] == test[None, :, :], axis=2))


def test_metrics_are_deterministic():
    cfg = DistillConfig(steps=30, num_states=300, seed=4)
    assert run_distillation(cfg, "sobolev").row() | {"wall_ms": 0} == \
        run_distillation(cfg, "sobolev").row() | {"wall_ms": 0}


def test_regular_mode_ignores_alpha():
    a = run_distillation(DistillConfig(steps=20, num_states=300, alpha=0.0), "sobolev")
    b = run_distillation(DistillConfig(steps=20, num_states=300, alpha=3.0), "regular")
    assert a.kl_test == b.kl_test and b.row()["alpha"] == 0.0


def test_unknown_mode():
    with pytest.raises(ValueError):
        run_distillation(DistillConfig(steps=1), "other")


@pytest.mark.parametrize("mode", ["regular", "sobolev"])
def test_full_data_student_matches_easy_teacher(mode):
    cfg = DistillConfig(data_fraction=1.0, steps=3000, learning_rate=3e-3, num_states=500, state_dim=4,
                        actions=3, teacher_hidden=(8,), student_hidden=(64,), temperature=1.0, seed=1)
    res = run_distillation(cfg, mode)
    assert res.top1_err <= 0.02
    assert res.kl_train < 0.01
