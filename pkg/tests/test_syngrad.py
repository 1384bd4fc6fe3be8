import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sobolev_training import autodiff as ad
from sobolev_training.gradcheck import check_sg_loss
from sobolev_training.nn import Mlp, init_mlp
from sobolev_training.syngrad import (
    BackpropTrainer,
    DecoupledTrainer,
    OracleSgModule,
    SgModule,
    SgTrainConfig,
    SplitNetwork,
    accuracy,
    cross_entropy_rows,
    decoupled_step,
    default_split_points,
    make_spiral_dataset,
    one_hot,
    run_sg_experiment,
    sg_losses,
    summarize,
)

SIZES = (20, 16, 16, 16, 8)


def network(seed=0, activation="relu"):
    return init_mlp(SIZES, seed, activation=activation, head="log_softmax")


def batch(n=32, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, SIZES[0])), one_hot(rng.integers(0, SIZES[-1], size=n), SIZES[-1])


def consts(*arrays):
    tape = ad.Tape()
    return [tape.constant(a) for a in arrays]


# -- sg_losses ---------------------------------------------------------------------

def test_hand_computed_sobolev_sg_loss():
    m, sg, loss, g = consts(2.0, [1.0, 0.0], 5.0, [0.0, 1.0])
    assert float(sg_losses("sobolev", m, sg, loss, g).value) == 5.0


def test_matched_module_has_zero_sobolev_loss():
    rng = np.random.default_rng(0)
    loss, g = rng.normal(size=7), rng.normal(size=(7, 4))
    m, sg, tl, tg = consts(loss, g, loss, g)
    assert float(sg_losses("sobolev", m, sg, tl, tg).value) == 0.0


def test_critic_ignores_gradient_mismatch():
    rng = np.random.default_rng(1)
    loss, g = rng.normal(size=5), rng.normal(size=(5, 3))
    m, sg, tl, tg = consts(loss + 0.3, g, loss, g)
    _, sg_bad, _, _ = consts(loss, g + rng.normal(size=g.shape), loss, g)
    assert float(sg_losses("critic", m, sg, tl, tg).value) == float(sg_losses("critic", m, sg_bad, tl, tg).value)


def test_direct_sg_uses_only_gradients():
    m, sg, loss, g = consts(2.0, [1.0, 0.0], 5.0, [0.0, 1.0])
    assert float(sg_losses("direct_sg", None, sg, loss, g).value) == 2.0


def test_noprop_has_no_sg_loss():
    m, sg, loss, g = consts(2.0, [1.0, 0.0], 5.0, [0.0, 1.0])
    with pytest.raises(ValueError):
        sg_losses("noprop", m, sg, loss, g)


def test_sg_loss_shape_checks():
    m, sg, loss, g = consts(np.ones(3), np.ones((3, 2)), np.ones(3), np.ones((3, 4)))
    with pytest.raises(ad.ShapeError):
        sg_losses("sobolev", m, sg, loss, g)
    with pytest.raises(ValueError):
        sg_losses("critic", None, sg, loss, sg)


def test_sg_loss_parameter_gradients_match_fd():
    results = check_sg_loss(seed=1)
    assert all(r.passed for r in results), [r.line() for r in results]


# -- split network -------------------------------------------------------------------

@pytest.mark.parametrize("points", [(1,), (2,), (3,), (1, 2), (1, 2, 3)])
def test_composition_equals_full_forward(points):
    net = network(2)
    x, _ = batch()
    tape = ad.Tape()
    xn = tape.constant(x)
    _, out = SplitNetwork(net, points).forward(xn)
    assert np.array_equal(out.value, net(xn).value)


@pytest.mark.parametrize("points", [(), (0,), (4,), (2, 1), (1, 1)])
def test_invalid_split_points(points):
    if not points:
        cfg = dict(variant="sobolev", split_points=points)
        with pytest.raises(ValueError):
            SgTrainConfig(**cfg)
        return
    with pytest.raises(ValueError):
        SplitNetwork(network(), points)


def test_default_split_points():
    assert default_split_points(4, 1) == (2,)
    assert default_split_points(4, 3) == (1, 2, 3)
    with pytest.raises(ValueError):
        default_split_points(4, 4)


def test_boundary_mismatch_is_rejected():
    net = SplitNetwork(network(), (2,))
    x, y = batch()
    with pytest.raises(ad.ShapeError):
        DecoupledTrainer(net, [SgModule("sobolev", 5, 8)], "sobolev", x, y)
    with pytest.raises(ValueError):
        DecoupledTrainer(net, [], "sobolev", x, y)


# -- SG module -----------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["direct_sg", "critic", "sobolev"])
def test_sg_output_has_shape_of_h(variant):
    mod = SgModule(variant, 16, 8, seed=3)
    h, y = consts(np.random.default_rng(0).normal(size=(10, 16)), batch(10)[1])
    m, sg = mod(h, y)
    assert sg.shape == (10, 16)
    assert (m is None) == (variant == "direct_sg")


def test_noprop_module_is_rejected():
    with pytest.raises(ValueError):
        SgModule("noprop", 4, 2)


def test_emitted_sg_is_input_gradient_of_loss_model():
    mod = SgModule("sobolev", 16, 8, seed=4, activation="tanh")
    rng = np.random.default_rng(5)
    h0, y0 = rng.normal(size=(6, 16)), batch(6, seed=6)[1]
    h, y = consts(h0, y0)
    _, sg = mod(h, y)

    def m_rows(hv):
        z = np.concatenate([hv, y0], axis=1)
        logp = mod.net(ad.Tape().constant(z)).value
        return -np.sum(y0 * logp, axis=1)

    eps, fd = 1e-6, np.zeros_like(h0)
    for k in range(16):
        e = np.zeros(16)
        e[k] = eps
        fd[:, k] = (m_rows(h0 + e) - m_rows(h0 - e)) / (2 * eps)
    np.testing.assert_allclose(sg.value, fd, rtol=1e-6, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_supervision_identity(seed):
    net = network(seed)
    split = SplitNetwork(net, (2,))
    mod = SgModule("critic", 16, 8, seed=seed + 1)
    x, y0 = batch(16, seed)
    tape = ad.Tape()
    xn, y = tape.constant(x), tape.constant(y0)
    hs, logp_true = split.forward(xn)
    m, _ = mod(ad.stop_gradient(hs[0]), y)
    loss = cross_entropy_rows(logp_true, y)
    logp_pred = mod.net(ad.concat([hs[0], y], axis=1)).value
    labels = y0.argmax(axis=1)
    rows = np.arange(16)
    expected = (logp_pred[rows, labels] - logp_true.value[rows, labels]) ** 2
    np.testing.assert_allclose((m.value - loss.value) ** 2, expected, rtol=1e-12, atol=1e-14)


# -- decoupled updates ---------------------------------------------------------------

def _copy(net):
    return Mlp(net.layer_sizes, net.activation, net.head, [w.copy() for w in net.weights],
               [b.copy() for b in net.biases])


@pytest.mark.parametrize("points", [(2,), (1, 2, 3)])
def test_oracle_sobolev_module_reproduces_backprop(points):
    ref = network(7)
    dec = _copy(ref)
    split = SplitNetwork(dec, points)
    oracles = [OracleSgModule(split.parts[k + 1:]) for k in range(len(points))]
    x, y = batch(64, seed=8)
    back = BackpropTrainer(ref, x, y)
    trainer = DecoupledTrainer(split, oracles, "sobolev", x, y)
    grads = dict(zip(map(id, trainer.main_arrays), trainer.gradients()[0]))
    for p, g in zip(dec.params, back.gradients()):
        assert np.array_equal(grads[id(p)], g)
    for step in range(3):
        x, y = batch(64, seed=20 + step)
        back.set_batch(x, y)
        trainer.set_batch(x, y)
        back.step()
        trainer.step()
    assert all(np.array_equal(p, q) for p, q in zip(ref.params, dec.params))


def test_noprop_leaves_upstream_untouched():
    net = network(9)
    split = SplitNetwork(net, (2,))
    before = [p.copy() for p in net.params]
    decoupled_step(split, None, batch(), variant="noprop")
    upstream = split.parts[0].params
    changed = [not np.array_equal(p, q) for p, q in zip(net.params, before)]
    assert not any(c for p, c in zip(net.params, changed) if any(p is u for u in upstream))
    assert any(changed)


@pytest.mark.parametrize("variant", ["direct_sg", "critic", "sobolev"])
def test_every_variant_updates_all_parts_and_modules(variant):
    net = network(1)
    split = SplitNetwork(net, (1, 3))
    mods = [SgModule(variant, w, 8, seed=k) for k, w in enumerate(split.boundary_dims)]
    before = [p.copy() for p in net.params]
    mod_before = [p.copy() for m in mods for p in m.params]
    info = decoupled_step(split, mods, batch(), variant=variant)
    assert len(info["sg_loss"]) == 2
    assert all(not np.array_equal(p, q) for p, q in zip(net.params[::2], before[::2]))
    assert all(not np.array_equal(p, q) for p, q in zip([p for m in mods for p in m.params][::2], mod_before[::2]))


def test_decoupled_step_is_deterministic():
    def once():
        net = network(3)
        split = SplitNetwork(net, (2,))
        mods = [SgModule("sobolev", 16, 8, seed=4)]
        info = decoupled_step(split, mods, batch(seed=5), variant="sobolev")
        return info, [p.copy() for p in net.params + mods[0].params]

    (a, pa), (b, pb) = once(), once()
    assert a == b and all(np.array_equal(p, q) for p, q in zip(pa, pb))


# -- experiment plumbing -------------------------------------------------------------

def test_dataset_is_seeded_and_balanced():
    a, b = make_spiral_dataset(3, 800, 200), make_spiral_dataset(3, 800, 200)
    assert np.array_equal(a.train_x, b.train_x) and a.train_x.shape == (800, 20)
    counts = np.bincount(a.train_y, minlength=8)
    assert counts.min() > 60


def test_short_runs_are_reproducible():
    cfg = SgTrainConfig(variant="sobolev", splits=1, steps=20, n_train=256, n_test=128)
    r1, r2 = run_sg_experiment(cfg), run_sg_experiment(cfg)
    assert r1.test_acc == r2.test_acc and r1.row()["splits"] == 1


def test_backprop_baseline_learns_the_dataset():
    res = run_sg_experiment(SgTrainConfig(variant="backprop"))
    assert res.test_acc >= 0.95


def test_config_validation():
    with pytest.raises(ValueError):
        SgTrainConfig(variant="vfbn")
    with pytest.raises(ValueError):
        SgTrainConfig(split_points=(4,))
    with pytest.raises(ValueError):
        SgTrainConfig(value_loss="huber")
    assert SgTrainConfig(variant="backprop").split_points == ()


def test_summary_statistics():
    class R:
        def __init__(self, variant, acc):
            self.config = SgTrainConfig(variant=variant, steps=0)
            self.test_acc = acc

    out = summarize([R("critic", 0.5), R("critic", 0.7), R("sobolev", 0.9)])
    assert out["critic"]["mean"] == pytest.approx(0.6) and out["critic"]["std"] == pytest.approx(0.1)
    assert out["sobolev"]["n"] == 1


def test_accuracy_of_perfect_network():
    net = network(0)
    x, _ = batch(10)
    labels = net(ad.Tape().constant(x)).value.argmax(axis=1)
    assert accuracy(net, x, labels) == 1.0
