"""Central finite-difference gradient oracle, shared by unit and acceptance tests.

A "probe" is one input tensor fully swept by central differences against the
tape's analytic gradient. Checks run in float64; each element must satisfy
|analytic - numeric| <= atol + rtol * |numeric|.
"""

from __future__ import annotations

import numpy as np

from ppma.autodiff import Tensor, backward

ATOL = 1e-6
RTOL = 1e-4


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar-valued f over every element of x."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return g


def check_grads(build, inputs, h: float = 1e-6) -> tuple[int, float]:
    """Compare tape gradients of build(*tensors) -> scalar against differences.

    Returns (probes, worst relative error). Raises AssertionError on any
    element outside ATOL + RTOL * |numeric|.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    if loss.data.shape != ():
        raise ValueError("build must return a scalar loss")
    backward(loss)
    worst = 0.0
    for i, (t, a) in enumerate(zip(tensors, arrays)):
        assert t.grad is not None, f"input {i} received no gradient"

        def f(x, i=i):
            probe = [Tensor(b.copy()) for b in arrays]
            probe[i] = Tensor(np.asarray(x, dtype=np.float64))
            return float(build(*probe).data)

        num = numeric_grad(f, a, h)
        err = np.abs(t.grad - num)
        bound = ATOL + RTOL * np.abs(num)
        if not np.all(err <= bound):
            worst_idx = np.unravel_index(np.argmax(err - bound), err.shape)
            raise AssertionError(
                f"input {i} gradient mismatch at {worst_idx}: "
                f"analytic {t.grad[worst_idx]!r} vs numeric {num[worst_idx]!r}")
        denom = np.maximum(np.abs(num), 1.0)
        worst = max(worst, float(np.max(err / denom)))
    return len(arrays), worst
