import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pacia.adapter import EmptyClassError
from pacia.autodiff import ShapeError, Tape, finite_diff_check, tensor
from pacia.classifier import ClassifierHead, HeadGenWeights, fit_head, predict
from pacia.diagnostics import tiny_model
from pacia.layers import ModelParams
from pacia.model import episode_loss


@pytest.fixture(scope="module")
def heads():
    cfg = tiny_model(3)
    w = HeadGenWeights(cfg)
    params = ModelParams()
    w.init(params, np.random.default_rng(0))
    return cfg, w, params


def head(wp, wm, bp, bm):
    return ClassifierHead(tensor(wp), tensor(wm), tensor([bp]), tensor([bm]))


def test_symmetric_head_is_half():
    h = head([1.0, -2.0], [1.0, -2.0], 0.3, 0.3)
    np.testing.assert_array_equal(predict(h, tensor([[4.0, 5.0]])).data, [[0.5, 0.5]])


def test_ln3_margin_gives_three_quarters():
    h = head([0.0, 0.0], [0.0, 0.0], math.log(3), 0.0)
    p = predict(h, tensor([[1.0, 2.0]])).data
    np.testing.assert_allclose(p, [[0.25, 0.75]], atol=1e-15)


def test_zero_weights_ignore_query_scale():
    h = head([0.0, 0.0], [0.0, 0.0], 0.7, -0.2)
    q = np.array([[1.0, -3.0]])
    assert predict(h, tensor(q)).data.tobytes() == predict(h, tensor(q * 1e3)).data.tobytes()


def test_predict_dimension_error():
    with pytest.raises(ShapeError):
        predict(head([0.0, 0.0], [0.0, 0.0], 0.0, 0.0), tensor([[1.0, 2.0, 3.0]]))


def test_zero_generators_give_half(heads):
    cfg, w, params = heads
    zero = ModelParams({k: tensor(np.zeros(params[k].shape)) for k in params})
    support = tensor(np.random.default_rng(1).normal(size=(4, cfg.d_rel)))
    h = fit_head(zero, w, support, [1, 0, 1, 0])
    assert not np.any(h.w_plus.data) and not np.any(h.b_minus.data)
    np.testing.assert_array_equal(predict(h, tensor(np.ones((3, cfg.d_rel)))).data, np.full((3, 2), 0.5))


def test_head_shapes_and_empty_class(heads):
    cfg, w, params = heads
    support = tensor(np.random.default_rng(2).normal(size=(4, cfg.d_rel)))
    h = fit_head(params, w, support, [1, 0, 0, 1])
    assert h.w_plus.shape == (cfg.d_rel,) and h.b_plus.shape == (1,)
    with pytest.raises(EmptyClassError):
        fit_head(params, w, support, [0, 0, 0, 0])


def test_head_depends_only_on_class_means(heads):
    cfg, w, params = heads
    rng = np.random.default_rng(3)
    pos, neg = rng.normal(size=(3, cfg.d_rel)), rng.normal(size=(2, cfg.d_rel))
    a = fit_head(params, w, tensor(np.vstack([pos, neg])), [1, 1, 1, 0, 0])
    means = np.vstack([np.tile(pos.mean(0), (3, 1)), np.tile(neg.mean(0), (2, 1))])
    b = fit_head(params, w, tensor(means), [1, 1, 1, 0, 0])
    for x, y in zip((a.w_plus, a.w_minus, a.b_plus, a.b_minus), (b.w_plus, b.w_minus, b.b_plus, b.b_minus)):
        np.testing.assert_allclose(x.data, y.data, rtol=1e-12, atol=1e-14)


def test_duplicated_support_equals_single(heads):
    cfg, w, params = heads
    rng = np.random.default_rng(4)
    p, n = rng.normal(size=cfg.d_rel), rng.normal(size=cfg.d_rel)
    one = fit_head(params, w, tensor([p, n]), [1, 0])
    many = fit_head(params, w, tensor([p, p, n, p, n]), [1, 1, 0, 1, 0])
    np.testing.assert_allclose(many.w_plus.data, one.w_plus.data, rtol=1e-14)
    np.testing.assert_allclose(many.b_minus.data, one.b_minus.data, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_probabilities_and_permutation(heads, seed):
    cfg, w, params = heads
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    support = rng.normal(size=(n, cfg.d_rel)) * 5
    labels = np.array([1, 0] + list(rng.integers(0, 2, n - 2)))
    perm = rng.permutation(n)
    query = tensor(rng.normal(size=(4, cfg.d_rel)))
    a = predict(fit_head(params, w, tensor(support), labels), query).data
    b = predict(fit_head(params, w, tensor(support[perm]), labels[perm]), query).data
    assert a.tobytes() == b.tobytes()
    assert np.all((a > 0) & (a < 1))
    np.testing.assert_allclose(a.sum(1), 1.0, atol=1e-12)


def test_head_generation_gradients():
    cfg = tiny_model(3)
    w = HeadGenWeights(cfg)
    params = ModelParams()
    w.init(params, np.random.default_rng(5))
    rng = np.random.default_rng(6)
    support, query = rng.normal(size=(4, cfg.d_rel)), rng.normal(size=(3, cfg.d_rel))

    def f():
        return episode_loss(predict(fit_head(params, w, tensor(support), [1, 0, 0, 1]), tensor(query)), [1, 0, 1])

    assert finite_diff_check(f, params, tol=1e-4).passed


# loss


def test_episode_loss_examples():
    assert episode_loss([[0.0, 1.0], [1.0, 0.0]], [1, 0]).data.item() == 0.0
    np.testing.assert_allclose(episode_loss(np.full((4, 2), 0.5), [1, 0, 0, 1]).data.item(), 4 * math.log(2), rtol=1e-15)
    np.testing.assert_allclose(episode_loss([[0.25, 0.75]], [1]).data.item(), -math.log(0.75), rtol=1e-15)
    # clamped: a confident miss costs -log(1e-12)
    np.testing.assert_allclose(episode_loss([[1.0, 0.0]], [1]).data.item(), -math.log(1e-12), rtol=1e-15)
    with pytest.raises(ValueError):
        episode_loss([[0.5, 0.5]], [1, 0])


def test_episode_loss_gradient_is_minus_inverse_prob():
    p = tensor([[0.2, 0.8], [0.6, 0.4]])
    p.requires_grad = True
    with Tape() as tape:
        loss = episode_loss(p, [1, 0])
    g = tape.backward(loss, {"p": p})["p"]
    np.testing.assert_allclose(g, [[0.0, -1 / 0.8], [-1 / 0.6, 0.0]], rtol=1e-14)
