"""AdamW against a closed-form reference, plus the warmup-cosine schedule."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppma.autodiff import Tensor
from ppma.optim import AdamW, cosine_warmup_lr


def reference_adamw(theta, grads, lr, beta1, beta2, eps, wd):
    """Textbook decoupled-decay Adam, float64 throughout."""
    theta = theta.astype(np.float64).copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        g = g.astype(np.float64)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        theta -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * theta)
    return theta


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_adamw_matches_reference(dtype):
    rng = np.random.default_rng(0)
    theta0 = rng.standard_normal(64).astype(dtype)
    grads = [rng.standard_normal(64).astype(dtype) for _ in range(5)]
    p = Tensor(theta0.copy(), requires_grad=True)
    opt = AdamW([p], lr=1e-2, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.05)
    for g in grads:
        p.grad = g.copy()
        opt.step()
    want = reference_adamw(theta0, grads, 1e-2, 0.9, 0.95, 1e-8, 0.05)
    tol = 1e-12 if dtype == np.float64 else 2e-7
    np.testing.assert_allclose(p.data.astype(np.float64), want, rtol=0, atol=tol)


def test_no_decay_set_honored():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal(8), requires_grad=True)
    b = Tensor(rng.standard_normal(8), requires_grad=True)
    w0, b0 = w.data.copy(), b.data.copy()
    g = rng.standard_normal(8)
    opt = AdamW([w, b], lr=1e-2, weight_decay=0.5, no_decay=[b])
    w.grad = g.copy()
    b.grad = g.copy()
    opt.step()
    want_w = reference_adamw(w0, [g], 1e-2, 0.9, 0.95, 1e-8, 0.5)
    want_b = reference_adamw(b0, [g], 1e-2, 0.9, 0.95, 1e-8, 0.0)
    np.testing.assert_allclose(w.data, want_w, atol=1e-12)
    np.testing.assert_allclose(b.data, want_b, atol=1e-12)


def test_none_grads_are_skipped():
    p = Tensor(np.ones(4), requires_grad=True)
    q = Tensor(np.ones(4), requires_grad=True)
    opt = AdamW([p, q], lr=0.1)
    q.grad = np.ones(4)
    opt.step()
    np.testing.assert_array_equal(p.data, np.ones(4))
    assert not np.array_equal(q.data, np.ones(4))


def test_zero_grad_clears():
    p = Tensor(np.ones(4), requires_grad=True)
    opt = AdamW([p])
    p.grad = np.ones(4)
    opt.zero_grad()
    assert p.grad is None


def test_moments_stay_float64_for_float32_params():
    p = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
    opt = AdamW([p])
    p.grad = np.ones(4, dtype=np.float32)
    opt.step()
    assert opt._m[0].dtype == np.float64 and opt._v[0].dtype == np.float64


def test_schedule_endpoints_and_shape():
    assert cosine_warmup_lr(0, 100, 10, 1e-6, 1e-3) == pytest.approx(1e-6)
    assert cosine_warmup_lr(10, 100, 10, 1e-6, 1e-3) == pytest.approx(1e-3)
    assert cosine_warmup_lr(100, 100, 10, 1e-6, 1e-3) == pytest.approx(0.0, abs=1e-12)
    mid = cosine_warmup_lr(55, 100, 10, 1e-6, 1e-3)
    assert 0 < mid < 1e-3


def test_schedule_validation():
    with pytest.raises(ValueError):
        cosine_warmup_lr(0, 0, 0, 1e-6, 1e-3)
    with pytest.raises(ValueError):
        cosine_warmup_lr(0, 10, 11, 1e-6, 1e-3)
    with pytest.raises(ValueError):
        cosine_warmup_lr(-1, 10, 2, 1e-6, 1e-3)


@given(st.integers(2, 500), st.integers(0, 100), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_schedule_warmup_rises_then_cosine_falls(total, warm, seed):
    warm = min(warm, total)
    lrs = [cosine_warmup_lr(s, total, warm, 1e-7, 1e-3) for s in range(total + 1)]
    for a, b in zip(lrs[:warm], lrs[1:warm + 1]):
        assert b >= a
    for a, b in zip(lrs[warm:-1], lrs[warm + 1:]):
        assert b <= a + 1e-15
    assert all(lr >= 0 for lr in lrs)
