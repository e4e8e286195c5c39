import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualembed.layers import Network, NetworkSpec
from dualembed.losses import (CenterBank, LossConfig, center_loss, contrastive_loss, dual_loss,
                              softmax_cross_entropy, weight_penalty, weight_penalty_grads)
from dualembed.tensor import finite_diff_grad, max_relative_error

FLOOR = 1e-4


def test_loss_config_validation():
    assert LossConfig("contrastive").lam == 1.0
    assert LossConfig("center").lam == 3e-3
    assert LossConfig().m_s == 0.0 and LossConfig().m_d == 1.0
    for bad in (dict(m_s=1.0, m_d=1.0), dict(lam=-1.0), dict(placement="pixels"),
                dict(embedding_kind="triplet"), dict(center_rate=0.0)):
        with pytest.raises(ValueError):
            LossConfig(**bad)


# ---------------------------------------------------------------- CE

def test_ce_uniform_is_ln_k():
    loss, _ = softmax_cross_entropy(np.zeros((3, 10)), np.array([0, 4, 9]))
    assert abs(loss - math.log(10)) <= 1e-9


def test_ce_saturates():
    logits = np.zeros((1, 5))
    logits[0, 2] = 30
    loss, _ = softmax_cross_entropy(logits, np.array([2]))
    assert loss < 1e-9


def test_ce_grad_finite_diff(rng):
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 3, 4, 1])
    _, g = softmax_cross_entropy(logits, labels)
    num = finite_diff_grad(lambda z: softmax_cross_entropy(z, labels)[0], logits)
    assert max_relative_error(g, num, FLOOR) <= 1e-6


def test_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


# ---------------------------------------------------------------- contrastive

def test_contrastive_examples():
    e = np.array([[0.3, -0.2]])
    loss, ga, gb = contrastive_loss(e, e.copy(), np.array([True]), m_s=0.0)
    assert loss == 0.0
    # dissimilar pair at squared distance 0.36
    loss, _, _ = contrastive_loss(np.array([[0.0, 0.0]]), np.array([[0.6, 0.0]]), np.array([False]), m_d=1.0)
    assert abs(loss - 0.64) <= 1e-9
    a, b = np.array([[0.0, 0.0]]), np.array([[math.sqrt(1.5), 0.0]])
    loss, ga, gb = contrastive_loss(a, b, np.array([False]), m_d=1.0)
    assert loss == 0.0 and not ga.any() and not gb.any()


def test_contrastive_hinge_point_has_zero_gradient():
    a, b = np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]])
    _, ga, _ = contrastive_loss(a, b, np.array([False]), m_d=1.0)
    assert not ga.any()


def test_contrastive_empty_raises():
    with pytest.raises(ValueError):
        contrastive_loss(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, bool))


def test_contrastive_grad_finite_diff(rng):
    a = rng.standard_normal((6, 3)) * 0.5
    b = rng.standard_normal((6, 3)) * 0.5
    same = np.array([True, False, True, False, False, True])
    m_s, m_d = 0.1, 2.0
    _, ga, gb = contrastive_loss(a, b, same, m_s, m_d)
    na = finite_diff_grad(lambda v: contrastive_loss(v, b, same, m_s, m_d)[0], a)
    nb = finite_diff_grad(lambda v: contrastive_loss(a, v, same, m_s, m_d)[0], b)
    assert max_relative_error(ga, na, FLOOR) <= 1e-6
    assert max_relative_error(gb, nb, FLOOR) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 31))
def test_contrastive_symmetric_and_order_invariant(n, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((n, 3)), r.standard_normal((n, 3))
    same = r.random(n) < 0.5
    base = contrastive_loss(a, b, same)[0]
    assert contrastive_loss(b, a, same)[0] == pytest.approx(base, abs=1e-12)
    perm = r.permutation(n)
    assert contrastive_loss(a[perm], b[perm], same[perm])[0] == pytest.approx(base, abs=1e-12)


def test_contrastive_pull_push_on_free_points(rng):
    # embeddings optimized directly: same pairs shrink to <= m_s, different ones expand to >= m_d
    labels = np.array([0, 0, 1, 1, 2, 2])
    pts = rng.standard_normal((6, 2)) * 0.1
    i, j = np.triu_indices(6, 1)
    same = labels[i] == labels[j]
    m_s, m_d = 0.0, 1.0
    for _ in range(4000):
        _, ga, gb = contrastive_loss(pts[i], pts[j], same, m_s, m_d)
        g = np.zeros_like(pts)
        np.add.at(g, i, ga)
        np.add.at(g, j, gb)
        pts -= 0.5 * g
    d2 = np.sum((pts[i] - pts[j]) ** 2, axis=1)
    assert d2[same].max() <= m_s + 1e-3
    assert d2[~same].min() >= m_d - 1e-3


# ---------------------------------------------------------------- center

def _bank(centers):
    centers = np.asarray(centers, dtype=float)
    return CenterBank(centers, np.ones(len(centers), bool))


def test_center_examples():
    embs = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss, _, _ = center_loss(embs, np.array([0, 0]), _bank([[0.5, 0.5]]))
    assert abs(loss - 0.25) <= 1e-9
    loss, g, _ = center_loss(embs, np.array([0, 1]), _bank(embs))
    assert loss == 0.0 and not g.any()


def test_center_grad_finite_diff(rng):
    embs = rng.standard_normal((5, 3))
    labels = np.array([0, 1, 1, 2, 0])
    bank = _bank(rng.standard_normal((3, 3)))
    _, g, _ = center_loss(embs, labels, bank)
    num = finite_diff_grad(lambda v: center_loss(v, labels, bank)[0], embs)
    assert max_relative_error(g, num, FLOOR) <= 1e-6


def test_center_initializes_and_updates(rng):
    embs = rng.standard_normal((4, 2))
    labels = np.array([1, 1, 0, 1])
    bank = CenterBank.empty(3, 2)
    loss, _, new = center_loss(embs, labels, bank, center_rate=0.5)
    assert not bank.initialized.any()  # input untouched
    np.testing.assert_array_equal(new.initialized, [True, True, False])
    mean1 = embs[[0, 1, 3]].mean(axis=0)
    np.testing.assert_allclose(new.centers[1], mean1, atol=1e-15)
    expect = np.sum((embs[[0, 1, 3]] - mean1) ** 2) + 0.0
    assert loss == pytest.approx(expect / 8, abs=1e-12)
    # update step toward the batch mean with rate 1 lands exactly on it
    old = _bank([[0.0, 0.0], [2.0, 2.0], [0.0, 0.0]])
    _, _, moved = center_loss(embs, labels, old, center_rate=1.0)
    np.testing.assert_allclose(moved.centers[1], mean1, atol=1e-15)
    _, _, half = center_loss(embs, labels, old, center_rate=0.5)
    np.testing.assert_allclose(half.centers[1], 0.5 * (old.centers[1] + mean1), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_center_loss_nonnegative_zero_iff_at_centers(seed):
    r = np.random.default_rng(seed)
    embs = r.standard_normal((6, 3))
    labels = r.integers(0, 3, 6)
    bank = _bank(r.standard_normal((3, 3)))
    loss = center_loss(embs, labels, bank)[0]
    assert loss > 0
    assert center_loss(bank.centers[labels], labels, bank)[0] == 0.0


# ---------------------------------------------------------------- dual

def tiny_net(rng, classes=3):
    spec = NetworkSpec.from_channels(8, (3, 2), (2, 3), (True, False), 5, classes)
    return Network.initialize(spec, rng)


def test_dual_lambda_zero_degenerates(rng):
    net = tiny_net(rng)
    x = rng.standard_normal((4, 1, 8, 8))
    y = np.array([0, 1, 0, 2])
    tr = net.forward(x, train=True)
    ce, g = softmax_cross_entropy(tr.classifier, y)
    reg = weight_penalty(net.params, 0.01)
    for kind in ("contrastive", "center"):
        res = dual_loss(tr, y, LossConfig(kind, "classifier", lam=0.0, weight_decay=0.01),
                        CenterBank.empty(3, 3), net.params)
        assert res.total == ce + reg
        assert res.d_classifier.tobytes() == g.tobytes()
        assert not res.tap_grads


def test_dual_composes_unit_losses(rng):
    net = tiny_net(rng)
    x = rng.standard_normal((4, 1, 8, 8))
    y = np.array([0, 1, 0, 2])  # pairs (0,0) same and (1,2) different
    tr = net.forward(x, train=True)
    res = dual_loss(tr, y, LossConfig("contrastive", "classifier", lam=1.0, weight_decay=0.0), None, net.params)
    ce = softmax_cross_entropy(tr.classifier, y)[0]
    z = tr.classifier
    d_same = np.sum((z[0] - z[2]) ** 2)
    d_diff = np.sum((z[1] - z[3]) ** 2)
    contrast = (max(0.0, d_same - 0.0) + max(0.0, 1.0 - d_diff)) / 2
    assert res.total == pytest.approx(ce + contrast, abs=1e-12)


def test_dual_odd_batch_rejected(rng):
    net = tiny_net(rng)
    tr = net.forward(rng.standard_normal((3, 1, 8, 8)), train=True)
    with pytest.raises(ValueError, match="even"):
        dual_loss(tr, np.array([0, 1, 2]), LossConfig("contrastive"), None, net.params)


def test_weight_penalty_skips_biases(rng):
    net = tiny_net(rng)
    grads = weight_penalty_grads(net.params, 0.5)
    assert set(grads) == {n for n in net.params if n.endswith(".weight")}
    expect = 0.5 * sum(np.sum(v ** 2) for n, v in net.params.items() if n.endswith(".weight"))
    assert weight_penalty(net.params, 0.5) == pytest.approx(expect, rel=1e-12)
