import math

import numpy as np
import pytest
from scipy.special import log_softmax

from errors import InvalidConfig, LabelOutOfRange, ShapeMismatch
from margin_loss import ClassifierHead, MarginConfig, arcface_grad_case, arcface_loss
from nn_core import gradient_check


def _batch(seed, n=6, d=16, k=5):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((n, d))
    head = ClassifierHead(rng.standard_normal((k, d)))
    labels = rng.integers(0, k, size=n)
    return e, head, labels


def test_zero_margin_unit_scale_is_plain_softmax():
    e, head, labels = _batch(0)
    loss, _ = arcface_loss(e, head, labels, MarginConfig(scale=1.0, margin=0.0))
    en = e / np.linalg.norm(e, axis=1, keepdims=True)
    wn = head.class_weights / np.linalg.norm(head.class_weights, axis=1, keepdims=True)
    logp = log_softmax(en @ wn.T, axis=1)
    expected = -np.mean(logp[np.arange(len(labels)), labels])
    assert loss == pytest.approx(expected, abs=1e-6)


def test_aligned_embedding_has_near_zero_loss():
    e = np.array([[1.0, 0.0]])
    head = ClassifierHead(np.array([[1.0, 0.0], [0.0, 1.0]]))
    loss, _ = arcface_loss(e, head, [0], MarginConfig(scale=64.0, margin=0.5))
    assert 0.0 <= loss < 1e-10


def test_default_config():
    cfg = MarginConfig()
    assert (cfg.scale, cfg.margin) == (64.0, 0.5)


def test_gradient_check():
    assert gradient_check(arcface_grad_case(), [(4, 16), (8, 16)], seed=0) < 1e-4


def test_gradient_check_with_large_margin():
    factory = arcface_grad_case(MarginConfig(scale=8.0, margin=1.4))
    assert gradient_check(factory, [(6, 8), (3, 8)], seed=1) < 1e-4


def test_fallback_target_logit():
    # cos_y = -0.9 -> theta > pi - m for m = 0.5
    e = np.array([[-0.9, math.sqrt(1 - 0.81)]])
    head = ClassifierHead(np.array([[1.0, 0.0], [0.0, 1.0]]))
    cfg = MarginConfig(scale=2.0, margin=0.5)
    loss, _ = arcface_loss(e, head, [0], cfg)
    target = -0.9 - 0.5 * math.sin(0.5)
    other = math.sqrt(0.19)
    expected = -(2.0 * target - np.logaddexp(2.0 * target, 2.0 * other))
    assert loss == pytest.approx(expected, rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_loss_ignores_embedding_scale(seed):
    e, head, labels = _batch(seed)
    a, _ = arcface_loss(e, head, labels)
    b, _ = arcface_loss(3.0 * e, head, labels)
    assert a == pytest.approx(b, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_margin_never_lowers_loss(seed):
    e, head, labels = _batch(seed)
    plain, _ = arcface_loss(e, head, labels, MarginConfig(margin=0.0))
    margin, _ = arcface_loss(e, head, labels, MarginConfig(margin=0.5))
    assert margin >= plain - 1e-9


def test_batch_order_does_not_matter():
    e, head, labels = _batch(3, n=10)
    perm = np.random.default_rng(0).permutation(10)
    a, ga = arcface_loss(e, head, labels)
    b, gb = arcface_loss(e[perm], head, labels[perm])
    assert a == pytest.approx(b, abs=1e-7)
    np.testing.assert_allclose(ga.embeddings[perm], gb.embeddings, rtol=1e-9, atol=1e-12)


def test_gradients_keep_dtype():
    e, head, labels = _batch(1)
    head = ClassifierHead(head.class_weights.astype(np.float32))
    _, grads = arcface_loss(e.astype(np.float32), head, labels)
    assert grads.embeddings.dtype == np.float32
    assert grads.class_weights.dtype == np.float32
    assert grads.class_weights.shape == head.class_weights.shape


def test_head_create():
    head = ClassifierHead.create(7, 32, np.random.default_rng(0))
    assert head.num_classes == 7
    assert head.class_weights.shape == (7, 32)
    assert head.class_weights.dtype == np.float32


def test_errors():
    e, head, labels = _batch(0)
    with pytest.raises(LabelOutOfRange):
        arcface_loss(e, head, np.full(len(labels), head.num_classes))
    with pytest.raises(LabelOutOfRange):
        arcface_loss(e, head, np.full(len(labels), -1))
    with pytest.raises(ShapeMismatch):
        arcface_loss(e[:, :8], head, labels)
    with pytest.raises(ShapeMismatch):
        arcface_loss(e, head, labels[:-1])
    with pytest.raises(InvalidConfig):
        arcface_loss(e, head, labels, MarginConfig(scale=0.0))
    with pytest.raises(InvalidConfig):
        arcface_loss(e, head, labels, MarginConfig(margin=2.0))
