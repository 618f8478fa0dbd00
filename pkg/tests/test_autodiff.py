"""Tensor engine: forward values, gradients, and the fd harness itself."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seedlab import autodiff as ad
from seedlab.autodiff import (
    NonFiniteError,
    Tensor,
    finite_difference_check,
    no_grad,
    value_and_grad,
)
from seedlab.mappings import ClassifierHead, generation_loss, score_usage


def test_sum_of_squares_value_and_grad():
    value, grads = value_and_grad(lambda x: ad.tsum(x * x), [np.array([1.0, 2.0])])
    assert value.item() == 5.0
    np.testing.assert_array_equal(grads[0], [2.0, 4.0])


def test_softmax_dot_hand_jacobian():
    # softmax([0,0]) = [.5,.5]; d(y0)/dx = y0*(1-y0), -y0*y1 = .25, -.25
    def f(x):
        return ad.tsum(ad.softmax(x) * Tensor([1.0, 0.0]))

    value, grads = value_and_grad(f, [np.zeros(2)])
    assert value.item() == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(grads[0], [0.25, -0.25], atol=1e-15)


def test_generation_loss_of_score_usage_matches_fd():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(2, 2, 3))
    w = rng.normal(size=(2, 3))
    y = np.array([1.0, 0.0])

    def f(a, b):
        head = ClassifierHead(weights=b)
        return generation_loss(score_usage(a, head, 1.0), y)

    report = finite_difference_check(f, [feats, w], tolerance=1e-4)
    assert report.passed, report.summary()
    assert report.max_rel_error < 1e-4


def test_fd_constant_gradient_is_exact():
    # dyadic values and a power-of-two epsilon make the differences exact
    report = finite_difference_check(
        lambda x: ad.tsum(x), [np.array([0.25, -1.5, 4.0])],
        epsilon=2.0**-17, tolerance=1e-12,
    )
    assert report.passed
    assert report.max_rel_error == 0.0


def test_fd_flags_tied_max_as_non_differentiable():
    report = finite_difference_check(
        lambda x: ad.tmax(x), [np.array([1.0, 1.0, 0.5])], tolerance=1e-4
    )
    assert report.passed  # flagged, not failed
    flagged = {e["index"] for e in report.non_differentiable}
    assert flagged == {0, 1}
    assert all(e["flag"] == "non-differentiable point" for e in report.non_differentiable)


def test_fd_rejects_empty_inputs_and_bad_epsilon():
    with pytest.raises(ValueError):
        finite_difference_check(lambda: Tensor(0.0), [])
    with pytest.raises(ValueError):
        finite_difference_check(lambda x: ad.tsum(x), [np.ones(2)], epsilon=0.0)
    with pytest.raises(ValueError):
        finite_difference_check(lambda x: ad.tsum(x), [np.ones(2)], epsilon=0.1)
    with pytest.raises(ValueError):
        finite_difference_check(lambda x: x * 2.0, [np.ones(3)])  # non-scalar


def test_value_and_grad_is_deterministic_bitwise():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 4))

    def f(t):
        return ad.tmean(ad.sigmoid(ad.matmul(t, ad.transpose(t, (1, 0)))))

    v1, g1 = value_and_grad(f, [x])
    v2, g2 = value_and_grad(f, [x])
    assert v1.data.tobytes() == v2.data.tobytes()
    assert g1[0].tobytes() == g2[0].tobytes()


def test_power_floor_handles_zero_without_nan():
    value, grads = value_and_grad(
        lambda x: ad.tsum(ad.power(x, 0.5, floor=1e-12)), [np.array([0.0, 4.0])]
    )
    assert np.isfinite(value.data).all()
    assert grads[0][0] == 0.0  # clamped entry gets zero gradient
    assert grads[0][1] == pytest.approx(0.25)


def test_non_finite_intermediate_names_the_op():
    with pytest.raises(NonFiniteError, match="exp"):
        ad.exp(Tensor([1e6]))
    with pytest.raises(NonFiniteError, match="log"):
        ad.log(Tensor([-1.0]))
    with pytest.raises(NonFiniteError, match="div"):
        ad.div(Tensor([1.0]), Tensor([0.0]))


def test_unsupported_op_fails_at_construction():
    with pytest.raises(AttributeError):
        Tensor([1.0]).sin()


def test_no_grad_suspends_taping():
    with no_grad():
        out = ad.mul(Tensor([2.0]), Tensor([3.0]))
    out.backward()
    assert out._parents == ()


def test_broadcast_gradients_unbroadcast_to_input_shape():
    a = np.ones((3, 4))
    b = np.ones(4)
    _, grads = value_and_grad(lambda x, y: ad.tsum(x * y), [a, b])
    assert grads[0].shape == (3, 4)
    assert grads[1].shape == (4,)
    np.testing.assert_array_equal(grads[1], [3.0, 3.0, 3.0, 3.0])


def test_matmul_batched_weight_gradient_matches_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 3, 5, 4))
    b = rng.normal(size=(4, 6))
    _, grads = value_and_grad(lambda x, y: ad.tsum(ad.matmul(x, y)), [a, b])
    expected = np.zeros_like(b)
    for i in range(2):
        for j in range(3):
            expected += a[i, j].T @ np.ones((5, 6))
    np.testing.assert_allclose(grads[1], expected, rtol=1e-12)


def test_layernorm_matches_composed_ops():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 5))
    g = rng.normal(size=5)
    b = rng.normal(size=5)

    def composed(t, gain, off):
        mu = ad.tmean(t, axis=-1, keepdims=True)
        xc = ad.sub(t, mu)
        var = ad.tmean(ad.mul(xc, xc), axis=-1, keepdims=True)
        inv = ad.power(ad.add(var, 1e-6), -0.5)
        return ad.tsum(ad.sigmoid(ad.add(ad.mul(ad.mul(xc, inv), gain), off)))

    def fused(t, gain, off):
        return ad.tsum(ad.sigmoid(ad.layernorm(t, gain, off)))

    v1, g1 = value_and_grad(composed, [x, g, b])
    v2, g2 = value_and_grad(fused, [x, g, b])
    assert v1.item() == pytest.approx(v2.item(), rel=1e-12)
    for ga, gb in zip(g1, g2):
        np.testing.assert_allclose(ga, gb, rtol=1e-9, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(logits):
    out = ad.softmax(Tensor(logits)).data
    assert abs(out.sum() - 1.0) < 1e-9
    assert (out > 0).all()


@settings(max_examples=30, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.sampled_from([(3,), (2, 3), (2, 1, 4)]),
)
def test_reduction_grads_are_uniform(seed, shape):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    _, g_sum = value_and_grad(lambda t: ad.tsum(t), [x])
    _, g_mean = value_and_grad(lambda t: ad.tmean(t), [x])
    np.testing.assert_array_equal(g_sum[0], np.ones(shape))
    np.testing.assert_allclose(g_mean[0], np.ones(shape) / x.size, rtol=1e-15)
