"""Weight-space model mixing.

Fixed-proportion averaging combines encoder parameters of architecture-
identical checkpoints. The adaptive variant learns the two-model mixing
ratio beta = softmax(z)[1] jointly with a linear-probe head: the effective
encoder is rebuilt from the current z on every step, so the loss gradient
flows into z while both source encoders stay frozen.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from ppma import autodiff as ad
from ppma.autodiff import NumericsError, Tensor
from ppma.checkpoint import Checkpoint, model_from_checkpoint
from ppma.evaluate import EvalConfig, _embed, top1
from ppma.model import VitConfig, patchify, trunc_normal
from ppma.optim import AdamW, cosine_warmup_lr
from ppma.worldgen import DownstreamTask, clips_array, labels_onehot

__all__ = ["MixSpec", "AdaptiveMix", "average_weights", "adaptive_lp",
           "mix_beta", "mixed_params", "trunk_keys"]

logger = logging.getLogger(__name__)


def trunk_keys(params: dict) -> list[str]:
    """Encoder-side parameter names; heads and decoder never participate."""
    return sorted(k for k in params if k.startswith(("embed.", "enc.")))


def _check_same_arch(checkpoints) -> None:
    base = checkpoints[0]
    base_keys = trunk_keys(base.params)
    for i, ck in enumerate(checkpoints[1:], start=1):
        if ck.vit != base.vit:
            raise ValueError(f"checkpoint {i} architecture differs from checkpoint 0")
        if trunk_keys(ck.params) != base_keys:
            raise ValueError(f"checkpoint {i} parameter names differ from checkpoint 0")
        for k in base_keys:
            if ck.params[k].shape != base.params[k].shape:
                raise ValueError(f"checkpoint {i} shape mismatch at {k}")


@dataclass(frozen=True)
class MixSpec:
    checkpoints: tuple[Checkpoint, ...]
    alphas: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "checkpoints", tuple(self.checkpoints))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if len(self.checkpoints) < 1 or len(self.checkpoints) != len(self.alphas):
            raise ValueError("need one proportion per checkpoint")
        if any(a < 0.0 for a in self.alphas):
            raise ValueError("proportions must be non-negative")
        if abs(sum(self.alphas) - 1.0) > 1e-9:
            raise ValueError(f"proportions sum to {sum(self.alphas)!r}, not 1")
        _check_same_arch(self.checkpoints)


@dataclass(frozen=True)
class AdaptiveMix:
    """Two frozen encoders plus the learnable logit pair behind beta."""

    m1: Checkpoint
    m2: Checkpoint
    z: Tensor

    def __post_init__(self):
        _check_same_arch((self.m1, self.m2))
        if self.z.data.shape != (2,):
            raise ValueError("z must have shape (2,)")

    @property
    def beta(self) -> float:
        e = np.exp(self.z.data - self.z.data.max())
        return float(e[1] / e.sum())


def average_weights(spec: MixSpec) -> Checkpoint:
    """Convex combination of encoder parameters.

    Terms accumulate in float64 and cast back to the model dtype; zero
    proportions contribute nothing, so an endpoint mix is a bitwise copy.
    """
    base = spec.checkpoints[0]
    dtype = VitConfig(**base.vit).np_dtype
    out = {}
    for k in trunk_keys(base.params):
        acc = np.zeros(base.params[k].shape, dtype=np.float64)
        for ck, a in zip(spec.checkpoints, spec.alphas):
            if a == 0.0:
                continue
            acc += a * ck.params[k].astype(np.float64)
        out[k] = acc.astype(dtype)
    prov = ["mix:" + ",".join(f"{a:g}" for a in spec.alphas)]
    for i, ck in enumerate(spec.checkpoints):
        prov.append(f"m{i}:" + "|".join(ck.provenance))
    return Checkpoint(out, dict(base.vit), prov, {})


def mix_beta(z: Tensor) -> tuple[Tensor, Tensor]:
    """Gradient-carrying (1-beta, beta) pair, each of shape (1,)."""
    probs = ad.reshape(ad.softmax(ad.reshape(z, (1, 2))), (2, 1))
    b0 = ad.reshape(ad.gather_rows(probs, np.array([0])), (1,))
    b1 = ad.reshape(ad.gather_rows(probs, np.array([1])), (1,))
    return b0, b1


def mixed_params(p1: dict[str, Tensor], p2: dict[str, Tensor],
                 b0: Tensor, b1: Tensor) -> dict[str, Tensor]:
    """Per-parameter blend b0*W1 + b1*W2, rebuilt on the current tape."""
    return {k: ad.add(ad.mul(p1[k], b0), ad.mul(p2[k], b1)) for k in p1}


def adaptive_lp(
    m1: Checkpoint,
    m2: Checkpoint,
    task: DownstreamTask,
    cfg: EvalConfig,
    seed: int,
    mode: str = "LP",
    out_csv: str | None = None,
) -> tuple[float, float]:
    """Learn beta and a linear head together on the probe objective.

    Returns (beta_final, test_top1). Only the probe protocol applies: the
    blend is differentiable because the backbone stays fixed, which updating
    backbone weights would break.
    """
    if mode != "LP":
        raise ValueError(f"adaptive mixing requires LP mode, got {mode!r}")
    _check_same_arch((m1, m2))
    if task.n_classes < 1:
        raise ValueError("task declares zero classes")
    rng = np.random.default_rng([seed, 43])
    vit = VitConfig(**m1.vit)
    model = model_from_checkpoint(m1, np.random.default_rng([seed, 43]))
    keys = trunk_keys(m1.params)
    p1 = {k: Tensor(m1.params[k].astype(vit.np_dtype)) for k in keys}
    p2 = {k: Tensor(m2.params[k].astype(vit.np_dtype)) for k in keys}
    z = Tensor(np.zeros(2, dtype=vit.np_dtype), requires_grad=True)
    w = Tensor(trunc_normal(rng, (vit.feat_dim, task.n_classes), 0.02, vit.np_dtype),
               requires_grad=True)
    b = Tensor(np.zeros(task.n_classes, dtype=vit.np_dtype), requires_grad=True)
    opt = AdamW([z, w, b], betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                weight_decay=0.0, no_decay=[z, b])
    clips = clips_array(task.train)
    patches = patchify(clips, vit).astype(vit.np_dtype)
    labels = labels_onehot(task.train, task.n_classes)
    n = len(task.train)
    steps_per_epoch = int(np.ceil(n / cfg.batch_size))
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    warmup_steps = min(cfg.warmup_epochs * steps_per_epoch, total_steps)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            opt.lr = cosine_warmup_lr(step, total_steps, warmup_steps,
                                      cfg.lr_start, cfg.lp_lr_peak)
            with ad.finite_checks(False):
                b0, b1 = mix_beta(z)
                eff = mixed_params(p1, p2, b0, b1)
                feats = model.pool(model.encoder_forward(
                    Tensor(np.ascontiguousarray(patches[idx])), params=eff))
                loss = ad.softmax_cross_entropy(ad.linear(feats, w, b), labels[idx])
                opt.zero_grad()
                ad.backward(loss)
            if not np.isfinite(loss.data):
                raise NumericsError(f"non-finite adaptive-mix loss at step {step}")
            opt.step()
            losses.append(float(loss.data))
            step += 1
        beta = AdaptiveMix(m1, m2, z).beta
        history.append((epoch, beta, float(np.mean(losses))))
        logger.info("adaptive epoch %d beta %.4f loss %.4f", epoch, beta, history[-1][2])
    beta = AdaptiveMix(m1, m2, z).beta
    final = average_weights(MixSpec((m1, m2), (1.0 - beta, beta)))
    eval_model = model_from_checkpoint(final, np.random.default_rng([seed, 43]))
    x_test = _embed(eval_model, task.test)
    acc = top1(x_test @ w.data + b.data, [s.motion_label for s in task.test])
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "beta", "train_loss"])
            for row in history:
                writer.writerow([row[0], repr(row[1]), repr(row[2])])
    return beta, acc
