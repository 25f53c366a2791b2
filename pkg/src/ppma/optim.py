"""AdamW with decoupled weight decay plus a warmup/cosine learning-rate ramp."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from ppma.autodiff import Tensor
from ppma.backend import kernels

__all__ = ["AdamW", "cosine_warmup_lr"]


class AdamW:
    """Decoupled-weight-decay Adam over a list of tape tensors.

    Moment buffers are float64 views over raveled parameter storage; `lr` is
    set per step by the caller (schedules live outside the optimizer). Params
    registered with `no_decay` (biases, norm gains, scalars) skip decay.
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
        no_decay: Sequence[Tensor] = (),
    ):
        self.params = list(params)
        if not self.params:
            raise ValueError("optimizer needs at least one parameter")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        no_decay_ids = {id(p) for p in no_decay}
        self._decay = [0.0 if id(p) in no_decay_ids else weight_decay for p in self.params]
        self._m = [np.zeros(p.size, dtype=np.float64) for p in self.params]
        self._v = [np.zeros(p.size, dtype=np.float64) for p in self.params]
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        for p, m, v, decay in zip(self.params, self._m, self._v, self._decay):
            if p.grad is None:
                continue
            flat = p.data.reshape(-1)
            if flat.base is None and p.data.ndim > 0:
                # reshape produced a copy; keep parameter storage 1-D friendly
                flat = np.ascontiguousarray(p.data).reshape(-1)
                p.data = flat.reshape(p.data.shape)
            grad = np.ascontiguousarray(p.grad.reshape(-1), dtype=p.data.dtype)
            if p.data.dtype == np.float64:
                kernels.adamw_update(
                    flat, grad, m, v, self.step_count,
                    self.lr, self.beta1, self.beta2, self.eps, decay,
                )
            else:
                # single-precision params keep float64 moments for stability
                self._update_mixed(flat, grad, m, v, decay)

    def _update_mixed(self, flat, grad, m, v, decay):
        g64 = grad.astype(np.float64)
        m *= self.beta1
        m += (1.0 - self.beta1) * g64
        v *= self.beta2
        v += (1.0 - self.beta2) * g64 * g64
        mhat = m / (1.0 - self.beta1 ** self.step_count)
        vhat = v / (1.0 - self.beta2 ** self.step_count)
        update = mhat / (np.sqrt(vhat) + self.eps) + decay * flat.astype(np.float64)
        flat -= (self.lr * update).astype(flat.dtype)


def cosine_warmup_lr(
    step: int,
    total_steps: int,
    warmup_steps: int,
    lr_start: float,
    lr_max: float,
) -> float:
    """Per-step learning rate: linear warmup then a half-cosine decay to 0.

    `step` counts from 0. During warmup the rate ramps linearly from
    `lr_start` at step 0 to `lr_max` at step `warmup_steps`; afterwards it
    follows a cosine from `lr_max` down to 0 at `total_steps`.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= warmup_steps <= total_steps:
        raise ValueError("warmup_steps must lie in [0, total_steps]")
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps > 0 and step < warmup_steps:
        frac = step / warmup_steps
        return lr_start + (lr_max - lr_start) * frac
    if total_steps == warmup_steps:
        return lr_max
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(progress, 1.0)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))
