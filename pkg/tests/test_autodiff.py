"""Tape mechanics and per-op gradient checks against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_grads
from ppma import autodiff as ad
from ppma.autodiff import NumericsError, Tensor


def rng_arrays(seed, *shapes):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(s) for s in shapes]


# elementwise and broadcasting ops


@pytest.mark.parametrize("sa,sb", [((3, 4), (3, 4)), ((3, 4), (4,)), ((2, 1, 4), (3, 1)),
                                   ((5,), ()), ((2, 3), (1, 3))])
def test_add_mul_broadcast_grads(sa, sb):
    a, b = rng_arrays(1, sa, sb)
    check_grads(lambda x, y: ad.tsum(ad.add(x, y)), [a, b])
    check_grads(lambda x, y: ad.tsum(ad.mul(x, y)), [a, b])


def test_scale_grad_and_promotion_guard():
    (a,) = rng_arrays(2, (4, 3))
    check_grads(lambda x: ad.tsum(ad.scale(x, -2.5)), [a])
    # numpy float64 scalars must not promote float32 chains
    t = Tensor(np.ones((2, 2), dtype=np.float32))
    out = ad.scale(t, np.float64(0.5))
    assert out.data.dtype == np.float32


@pytest.mark.parametrize("sa,sb", [((3, 4), (4, 2)), ((2, 3, 4), (2, 4, 2)),
                                   ((2, 2, 3, 4), (2, 2, 4, 5))])
def test_matmul_grads(sa, sb):
    a, b = rng_arrays(3, sa, sb)
    check_grads(lambda x, y: ad.tsum(ad.matmul(x, y)), [a, b])


def test_matmul_inner_dim_error():
    a, b = rng_arrays(4, (3, 4), (3, 2))
    with pytest.raises(ValueError, match="inner"):
        ad.matmul(Tensor(a), Tensor(b))


@pytest.mark.parametrize("xs", [(5, 4), (2, 3, 4), (2, 2, 3, 4)])
def test_linear_grads_and_oracle(xs):
    x, w, b = rng_arrays(5, xs, (4, 6), (6,))
    check_grads(lambda t, u, v: ad.tsum(ad.linear(t, u, v)), [x, w, b])
    got = ad.linear(Tensor(x), Tensor(w), Tensor(b)).data
    want = x @ w + b
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_linear_without_bias():
    x, w = rng_arrays(6, (3, 4), (4, 2))
    check_grads(lambda t, u: ad.tsum(ad.linear(t, u)), [x, w])


def test_gelu_grad():
    (x,) = rng_arrays(7, (5, 3))
    check_grads(lambda t: ad.tsum(ad.gelu(t)), [x])


def test_layer_norm_grad_and_known_values():
    x, g, b = rng_arrays(8, (6, 5), (5,), (5,))
    check_grads(lambda t, u, v: ad.tsum(ad.mul(ad.layer_norm(t, u, v), t)), [x, g, b])
    out = ad.layer_norm(Tensor(np.array([[1.0, 2.0, 3.0]])),
                        Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-12).data
    np.testing.assert_allclose(out[0], [-1.22474487, 0.0, 1.22474487], atol=1e-6)


def test_softmax_grad_and_rows():
    (z,) = rng_arrays(9, (4, 6))
    check_grads(lambda t: ad.tsum(ad.mul(ad.softmax(t), t)), [z])
    p = ad.softmax(Tensor(z)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p > 0)


def test_softmax_cross_entropy_grad_and_oracle():
    rng = np.random.default_rng(10)
    z = rng.standard_normal((5, 4))
    labels = rng.dirichlet(np.ones(4), size=5)
    check_grads(lambda t: ad.softmax_cross_entropy(t, labels), [z])
    got = float(ad.softmax_cross_entropy(Tensor(z), labels).data)
    logp = z - np.log(np.exp(z - z.max(1, keepdims=True)).sum(1, keepdims=True)) \
        - z.max(1, keepdims=True)
    want = float(-(labels * logp).sum(1).mean())
    assert abs(got - want) < 1e-12


def test_softmax_cross_entropy_rejects_bad_labels():
    z = np.zeros((2, 3))
    bad = np.full((2, 3), 0.5)
    with pytest.raises(ValueError, match="sum"):
        ad.softmax_cross_entropy(Tensor(z), bad)


def test_softmax_cross_entropy_keeps_chain_dtype():
    z = Tensor(np.zeros((2, 3), dtype=np.float32), requires_grad=True)
    loss = ad.softmax_cross_entropy(z, np.eye(3)[[0, 1]])
    ad.backward(loss)
    assert z.grad.dtype == np.float32


# shape ops


def test_reshape_transpose_grads():
    (x,) = rng_arrays(11, (2, 3, 4))
    check_grads(lambda t: ad.tsum(ad.mul(ad.reshape(t, (6, 4)),
                                         ad.reshape(t, (6, 4)))), [x])
    check_grads(lambda t: ad.tsum(ad.mul(ad.transpose(t, (2, 0, 1)),
                                         ad.transpose(t, (2, 0, 1)))), [x])


@pytest.mark.parametrize("axis", [0, 1, -1])
def test_concat_grads(axis):
    a, b = rng_arrays(12, (2, 3, 4), (2, 3, 4))
    check_grads(lambda x, y: ad.tsum(ad.mul(ad.concat([x, y], axis=axis),
                                            ad.concat([y, x], axis=axis))), [a, b])


def test_broadcast_to_grad():
    (x,) = rng_arrays(13, (1, 3))
    check_grads(lambda t: ad.tsum(ad.mul(ad.broadcast_to(t, (4, 3)),
                                         ad.broadcast_to(t, (4, 3)))), [x])


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True), ((0, 2), False)])
def test_sum_mean_grads(axis, keepdims):
    (x,) = rng_arrays(14, (2, 3, 4))
    check_grads(lambda t: ad.tsum(ad.mul(ad.tsum(t, axis=axis, keepdims=keepdims),
                                         ad.tsum(t, axis=axis, keepdims=keepdims))), [x])
    check_grads(lambda t: ad.tsum(ad.mul(ad.tmean(t, axis=axis, keepdims=keepdims),
                                         ad.tmean(t, axis=axis, keepdims=keepdims))), [x])


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_tmax_grad(axis):
    # well-separated values so finite differences never cross the argmax
    rng = np.random.default_rng(21)
    x = rng.permutation(2 * 3 * 4).reshape(2, 3, 4).astype(np.float64)
    check_grads(lambda t: ad.tsum(ad.mul(ad.tmax(t, axis=axis),
                                         ad.tmax(t, axis=axis))), [x])


def test_tmax_values_and_tie_break():
    x = ad.Tensor(np.array([[1.0, 5.0, 5.0], [7.0, 2.0, 7.0]]), requires_grad=True)
    out = ad.tmax(x, axis=1)
    assert np.array_equal(out.data, [5.0, 7.0])
    ad.backward(ad.tsum(out))
    # first max wins: columns 1 and 0
    assert np.array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


def test_gather_rows_grads_all_forms():
    rng = np.random.default_rng(15)
    x3 = rng.standard_normal((2, 5, 3))
    idx2 = np.array([[4, 0, 2], [1, 1, 3]])
    check_grads(lambda t: ad.tsum(ad.mul(ad.gather_rows(t, idx2),
                                         ad.gather_rows(t, idx2))), [x3])
    x2 = rng.standard_normal((6, 3))
    idx1 = np.array([5, 0, 0, 2])
    check_grads(lambda t: ad.tsum(ad.mul(ad.gather_rows(t, idx1),
                                         ad.gather_rows(t, idx1))), [x2])
    x1 = rng.standard_normal(7)
    check_grads(lambda t: ad.tsum(ad.mul(ad.gather_rows(t, idx1),
                                         ad.gather_rows(t, idx1))), [x1])


def test_dropout_grad_deterministic_mask():
    (x,) = rng_arrays(16, (8, 4))

    def build(t):
        return ad.tsum(ad.dropout(t, 0.4, np.random.default_rng(99), train=True))

    check_grads(build, [x])
    off = ad.dropout(Tensor(x), 0.4, np.random.default_rng(99), train=False)
    np.testing.assert_array_equal(off.data, x)


# tape mechanics


def test_leaves_only_retain_grad():
    a = Tensor(np.ones(3), requires_grad=True)
    mid = ad.mul(a, a)
    loss = ad.tsum(mid)
    ad.backward(loss)
    assert a.grad is not None
    assert mid.grad is None and loss.grad is None


def test_repeated_backward_accumulates():
    a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    loss = ad.tsum(ad.mul(a, a))
    ad.backward(loss)
    once = a.grad.copy()
    ad.backward(loss)
    np.testing.assert_array_equal(a.grad, 2.0 * once)


def test_shared_subgraph_accumulates():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = ad.mul(a, a)
    loss = ad.add(ad.tsum(b), ad.tsum(b))
    ad.backward(loss)
    np.testing.assert_allclose(a.grad, 4.0 * a.data)


def test_no_grad_builds_no_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.mul(a, a)
    assert not out.requires_grad
    with pytest.raises(ValueError):
        ad.backward(out)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_non_finite_raises_and_suspension():
    big = Tensor(np.array([1e308]), requires_grad=True)
    with pytest.raises(NumericsError):
        ad.mul(big, big)
    with ad.finite_checks(False):
        out = ad.mul(big, big)
        assert np.isinf(out.data[0])
    with pytest.raises(NumericsError):
        ad.mul(big, big)


def test_backward_requires_scalar():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(ad.mul(a, a))


# property tests


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_linear_matches_matmul_plus_bias(n, d_in, d_out, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d_in))
    w = rng.standard_normal((d_in, d_out))
    b = rng.standard_normal(d_out)
    got = ad.linear(Tensor(x), Tensor(w), Tensor(b)).data
    want = ad.add(ad.matmul(Tensor(x), Tensor(w)), Tensor(b)).data
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_unbroadcast_restores_input_shapes(seed):
    rng = np.random.default_rng(seed)
    base = [rng.integers(1, 4) for _ in range(3)]
    sa = tuple(1 if rng.random() < 0.4 else d for d in base)
    sb = tuple(1 if rng.random() < 0.4 else d for d in base[rng.integers(0, 3):])
    a = Tensor(rng.standard_normal(sa), requires_grad=True)
    b = Tensor(rng.standard_normal(sb), requires_grad=True)
    ad.backward(ad.tsum(ad.mul(a, b)))
    assert a.grad.shape == sa and b.grad.shape == sb


@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_are_distributions(rows, cols, seed):
    z = np.random.default_rng(seed).standard_normal((rows, cols)) * 10
    p = ad.softmax(Tensor(z)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p >= 0)
