import numpy as np
import pytest

from graphprompt import autodiff as ad
from graphprompt.autodiff import Tensor, backward, corrupt_backward, finite_diff_check, gradient_check
from graphprompt.errors import ContractError, ShapeError


def _loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
    np.testing.assert_allclose(ad.matmul(a, b).data, _loop_matmul(a, b), atol=1e-6)


def test_matmul_shape_error_lists_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\) vs \(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_segment_sum_example():
    out = ad.segment_sum(np.array([[1.0], [2.0], [3.0]]), [0, 0, 1], 2)
    assert out.data.tolist() == [[3.0], [3.0]]


def test_segment_sum_unsorted_and_empty_segments(rng):
    v = rng.standard_normal((7, 2))
    ids = np.array([3, 0, 3, 1, 0, 3, 1])
    expected = np.zeros((5, 2))
    for i, s in enumerate(ids):
        expected[s] += v[i]
    np.testing.assert_allclose(ad.segment_sum(v, ids, 5).data, expected, atol=1e-12)


def test_segment_sum_out_of_range():
    with pytest.raises(IndexError):
        ad.segment_sum(np.ones((2, 1)), [0, 2], 2)
    with pytest.raises(IndexError):
        ad.segment_sum(np.ones((2, 1)), [-1, 0], 2)


def test_relu_values_and_gradients():
    x = Tensor(np.array([-2.0, 3.0, 0.0]), requires_grad=True)
    y = ad.relu(x)
    assert y.data.tolist() == [0.0, 3.0, 0.0]
    g = backward(ad.sum(y), {"x": x})["x"]
    assert g.tolist() == [0.0, 1.0, 0.0]


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    assert float(backward(ad.mul(x, x), {"x": x})["x"]) == 6.0


def test_log_exp_identity_gradient(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    g = backward(ad.sum(ad.log(ad.exp(x))), {"x": x})["x"]
    np.testing.assert_allclose(g, 1.0, atol=1e-6)


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))
    assert backward(ad.sum(y), {"x": x})["x"].tolist() == [7.0]


def test_untouched_param_gets_zero():
    x, unused = Tensor(np.ones(3), requires_grad=True), Tensor(np.ones((2, 2)), requires_grad=True)
    g = backward(ad.sum(x), {"x": x, "unused": unused})
    assert g["unused"].shape == (2, 2) and not g["unused"].any()


def test_non_scalar_loss_rejected():
    with pytest.raises(ContractError):
        backward(Tensor(np.ones(2), requires_grad=True))


def test_row_broadcast_only():
    ad.add(np.ones((2, 3)), np.ones(3))
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ShapeError):
        ad.mul(np.ones((2, 3)), np.ones((1, 3)))


def test_linearity_of_backward(rng):
    w0 = rng.standard_normal((3, 2))
    x = rng.standard_normal((4, 3))

    def f(w):
        return ad.sum(ad.exp(ad.scale(ad.matmul(x, w), 0.3)))

    def g(w):
        return ad.sum(ad.relu(ad.matmul(x, w)))

    def grad(fn):
        w = Tensor(w0.copy(), requires_grad=True)
        return backward(fn(w), {"w": w})["w"]

    a, b = 1.7, -0.4
    combo = grad(lambda w: ad.add(ad.scale(f(w), a), ad.scale(g(w), b)))
    np.testing.assert_allclose(combo, a * grad(f) + b * grad(g), atol=1e-6)


def test_forward_bit_deterministic(rng):
    x, w = rng.standard_normal((5, 4)).astype(np.float32), rng.standard_normal((4, 3)).astype(np.float32)
    a = ad.l2_normalize(ad.matmul(x, w)).data
    b = ad.l2_normalize(ad.matmul(x, w)).data
    assert a.tobytes() == b.tobytes()


def test_l2_normalize_zero_row_is_zero():
    out = ad.l2_normalize(np.zeros((1, 3))).data
    assert not out.any()


def test_finite_diff_linear_is_exact(rng):
    c = rng.standard_normal((3, 2))
    err = finite_diff_check(lambda p: ad.sum(ad.mul(p["w"], Tensor(c))), {"w": rng.standard_normal((3, 2))})
    assert err < 1e-9


def test_relu_exact_zero_excluded():
    res = gradient_check(lambda p: ad.sum(ad.relu(p["x"])), {"x": np.array([0.0, 1.0, -1.0])})
    assert res.excluded == 1 and res.checked == 2
    assert res.max_relative_error < 1e-9


def test_every_op_passes_gradient_check(rng):
    ids = np.array([0, 2, 2, 1, 0])
    c = rng.standard_normal((5, 3))

    def loss(p):
        x, w, r = p["x"], p["w"], p["r"]
        h = ad.relu(ad.add(ad.matmul(x, w), r))
        z = ad.concat([h, ad.mul(x, Tensor(c))], axis=1)
        s = ad.segment_sum(ad.gather(z, [4, 0, 1, 3, 2]), ids, 3)
        n = ad.l2_normalize(ad.sub(s, ad.div_scalar(ad.transpose(ad.transpose(s)), 3.0)))
        v = ad.sum(n, axis=1)
        return ad.add(ad.mean(ad.log(ad.add(ad.exp(v), Tensor(np.ones(3))))), ad.dot(ad.sum(x, axis=0), ad.sum(c, axis=0)))

    params = {"x": rng.standard_normal((5, 3)), "w": rng.standard_normal((3, 4)), "r": rng.standard_normal(4)}
    res = gradient_check(loss, params)
    assert res.checked > 20 and res.max_relative_error < 1e-6


def test_corrupted_rule_is_detected(rng):
    params = {"w": rng.standard_normal((3, 2))}
    x = rng.standard_normal((4, 3))

    def loss(p):
        return ad.sum(ad.exp(ad.matmul(x, p["w"])))

    assert gradient_check(loss, params).max_relative_error < 1e-6
    with corrupt_backward("matmul"):
        assert gradient_check(loss, params).max_relative_error > 0.1
    assert gradient_check(loss, params).max_relative_error < 1e-6
