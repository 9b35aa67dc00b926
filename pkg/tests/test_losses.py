import numpy as np
import pytest

from lens_lab import losses
from lens_lab.errors import ArgumentError, ConfigError
from lens_lab.losses import LayerReps, LensWeights, RepBatch
from lens_lab.subspace import LanguageSet, SubspaceModel

from oracles import central_diff, rel_error


def _axis_model(d=3):
    e = np.eye(d)
    return SubspaceModel(0, e[0], e[0], e[:, 1:2], np.array([[1.0], [-1.0]]), LanguageSet(("en", "xx")))


def _random_model(rng, d, r, n_lang=3):
    q, _ = np.linalg.qr(rng.normal(size=(d, r + 1)))
    langs = tuple(f"l{i}" for i in range(n_lang))
    return SubspaceModel(0, q[:, 0], q[:, 0] * 2.0, q[:, 1:], rng.normal(size=(n_lang, r)), LanguageSet(langs))


def _hand_batch():
    x_c = np.array([0.5, -1.0, 2.0])
    x_l = x_c + [3.0, 4.0, 0.0]
    return LayerReps(x_l, x_c, x_l - [5.0, 1.0, 0.0], x_c - [1.0, -1.0, 2.0])


def test_component_hand_values():
    m = _axis_model()
    assert losses.pull_loss(m, [3.0, 4.0, 0.0], [0.0, 0.0, 0.0]) == 9.0
    assert losses.push_loss(m, [5.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 3.0, 0.0], 1.0) == 4.0
    assert losses.retain_loss([1.0, -1.0, 2.0], [0.0, 0.0, 0.0]) == 6.0
    assert losses.retain_loss([1.0, 0.0, 0.0], [0.0, 0.0, 0.0]) == 1.0


def test_total_hand_value_is_sum_of_components():
    m = _axis_model()
    reps = _hand_batch()
    out = losses.total_loss({0: m}, {0: {"xx": np.array([0.0, 3.0, 0.0])}},
                            LensWeights(1.0, 1.0, {"xx": 1.0}, (0, 0)), RepBatch("xx", {0: reps}))
    assert (out.l1, out.l2, out.l3, out.total) == (9.0, 4.0, 6.0, 19.0)
    doubled = losses.total_loss({0: m}, {0: {"xx": np.array([0.0, 3.0, 0.0])}},
                                LensWeights(2.0, 1.0, {"xx": 1.0}, (0, 0)), RepBatch("xx", {0: reps}))
    assert doubled.total == out.total + out.l1


def test_zero_at_fixed_points_exactly():
    rng = np.random.default_rng(0)
    m = _random_model(rng, 6, 2)
    x = rng.normal(size=(4, 6))
    delta = m.m_s @ rng.normal(size=2)
    assert losses.pull_loss(m, x, x) == 0.0
    assert losses.push_loss(m, x, x, delta, 0.0) == 0.0
    assert losses.retain_loss(x, x) == 0.0
    # a difference orthogonal to u_a contributes nothing to pull
    perp = m.m_s[:, 0] * 2.5
    assert abs(losses.pull_loss(m, x[0] + perp, x[0])) < 1e-24
    # displacement equal to the requested step is a fixed point of push
    assert losses.push_loss(m, x[0] + 0.7 * delta, x[0], delta, 0.7) < 1e-24
    batch = RepBatch("l1", {0: LayerReps(x, x, x, x)})
    out = losses.total_loss({0: m}, {0: {"l1": delta}}, LensWeights(1.0, 1.0, {"l1": 0.0}, (0, 0)), batch)
    assert out.total == 0.0
    assert not np.any(out.grads[0][0]) and not np.any(out.grads[0][1])


def test_gradients_match_central_differences_on_50_configs():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        d, n = int(rng.integers(3, 9)), int(rng.integers(1, 4))
        r = int(rng.integers(1, d - 1))
        m = _random_model(rng, d, r)
        x_l, x_c, x_lr, x_cr = (rng.normal(size=(n, d)) for _ in range(4))
        delta = m.m_s @ rng.normal(size=r)
        lam = float(rng.uniform(0, 2))
        w = LensWeights(float(rng.uniform(0, 2)), float(rng.uniform(0, 2)), {"l1": lam}, (0, 0))

        _, g = losses.pull_grad(m, x_l, x_c)
        worst = max(worst, rel_error(g, central_diff(lambda v: losses.pull_loss(m, v, x_c), x_l, 1e-5)))
        worst = max(worst, rel_error(-g, central_diff(lambda v: losses.pull_loss(m, x_l, v), x_c, 1e-5)))
        _, g = losses.push_grad(m, x_l, x_lr, delta, lam)
        worst = max(worst, rel_error(g, central_diff(lambda v: losses.push_loss(m, v, x_lr, delta, lam), x_l, 1e-5)))
        _, g = losses.retain_grad(x_c, x_cr)
        worst = max(worst, rel_error(g, central_diff(lambda v: losses.retain_loss(v, x_cr), x_c, 1e-5)))

        def tot(a, b):
            return losses.total_loss({0: m}, {0: {"l1": delta}}, w, RepBatch("l1", {0: LayerReps(a, b, x_lr, x_cr)}))

        g_l, g_c = tot(x_l, x_c).grads[0]
        worst = max(worst, rel_error(g_l, central_diff(lambda v: tot(v, x_c).total, x_l, 1e-5)))
        worst = max(worst, rel_error(g_c, central_diff(lambda v: tot(x_l, v).total, x_c, 1e-5)))
    assert worst <= 1e-5, worst


def test_push_gradient_is_exact_when_delta_leaves_the_subspace():
    # the shortcut 2 * resid would be wrong here; the implementation keeps the P_s factor
    rng = np.random.default_rng(9)
    m = _random_model(rng, 5, 2)
    x, ref, delta = rng.normal(size=(3, 5))
    _, g = losses.push_grad(m, x, ref, delta, 1.0)
    assert rel_error(g, central_diff(lambda v: losses.push_loss(m, v, ref, delta, 1.0), x, 1e-5)) < 1e-7


def test_subspace_decoupling():
    rng = np.random.default_rng(2)
    m = _random_model(rng, 7, 2)
    x_l, x_c, x_lr = rng.normal(size=(3, 7))
    delta = m.m_s @ [0.3, -0.2]
    base_pull = losses.pull_loss(m, x_l, x_c)
    base_push = losses.push_loss(m, x_l, x_lr, delta, 1.0)
    assert abs(losses.pull_loss(m, x_l + m.m_s @ [4.0, -1.0], x_c) - base_pull) <= 1e-10
    assert abs(losses.push_loss(m, x_l + 3.0 * m.u_a, x_lr, delta, 1.0) - base_push) <= 1e-10


def test_references_receive_no_gradient():
    # the breakdown exposes gradients only for live reps; moving the references
    # changes the loss but there is no slot through which a gradient could flow
    rng = np.random.default_rng(3)
    m = _random_model(rng, 4, 1)
    reps = LayerReps(*rng.normal(size=(4, 2, 4)))
    out = losses.total_loss({0: m}, {0: {"l1": m.m_s[:, 0]}}, LensWeights(1, 1, {"l1": 1.0}, (0, 0)),
                            RepBatch("l1", {0: reps}))
    assert set(out.grads) == {0} and len(out.grads[0]) == 2
    assert out.grads[0][0].shape == (2, 4)


def test_batch_mean_and_layer_sum():
    rng = np.random.default_rng(4)
    m = _random_model(rng, 4, 1)
    delta = {"l1": m.m_s[:, 0]}
    w = LensWeights(1.0, 1.0, {"l1": 1.0}, (0, 1))
    rows = [LayerReps(*rng.normal(size=(4, 4))) for _ in range(3)]
    stacked = LayerReps(*(np.stack([getattr(r, k) for r in rows]) for k in ("x_l", "x_c", "x_l_ref", "x_c_ref")))
    single = [losses.total_loss({0: m}, {0: delta}, w, RepBatch("l1", {0: r})).total for r in rows]
    both = losses.total_loss({0: m, 1: m}, {0: delta, 1: delta}, w, RepBatch("l1", {0: stacked, 1: stacked}))
    assert np.isclose(both.per_layer[0][3], np.mean(single))
    assert np.isclose(both.total, 2 * np.mean(single))


def test_errors():
    m = _axis_model()
    with pytest.raises(ArgumentError):
        losses.pull_loss(m, np.ones(4), np.ones(4))
    with pytest.raises(ArgumentError):
        losses.retain_loss(np.ones(3), np.ones(2))
    batch = RepBatch("yy", {0: _hand_batch()})
    with pytest.raises(ConfigError, match="yy"):
        losses.total_loss({0: m}, {0: {}}, LensWeights(lambda_l={"xx": 1.0}, manipulated_layers=(0, 0)), batch)
    with pytest.raises(ArgumentError):
        losses.total_loss({}, {}, LensWeights(lambda_l={"yy": 1.0}), batch)
    with pytest.raises(ConfigError):
        LensWeights(lambda1=-1.0)
    with pytest.raises(ConfigError):
        LensWeights(manipulated_layers=(3, 2))
    with pytest.raises(ConfigError):
        LensWeights(lambda_l={"xx": -0.5})


def test_components_nonnegative():
    rng = np.random.default_rng(6)
    m = _random_model(rng, 5, 2)
    for _ in range(20):
        a, b, c, dl = rng.normal(size=(4, 5))
        assert losses.pull_loss(m, a, b) >= 0
        assert losses.push_loss(m, a, b, dl, 0.5) >= 0
        assert losses.retain_loss(a, c) >= 0
