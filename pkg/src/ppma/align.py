"""Stage-2 supervised alignment over one or more labelled clip sources.

One encoder is shared; each source gets its own linear head. Every batch is
drawn from a single source, every example of every source appears exactly
once per epoch, and all sources enter the loss with weight 1. Light
augmentation (mixup + random erasing) produces soft labels.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from ppma import autodiff as ad
from ppma.autodiff import NumericsError, Tensor
from ppma.checkpoint import Checkpoint, model_from_checkpoint
from ppma.model import VideoViT, VitConfig, patchify
from ppma.optim import AdamW, cosine_warmup_lr
from ppma.worldgen import clips_array, labels_onehot

__all__ = ["AlignConfig", "schedule_epoch", "augment", "align_train"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignConfig:
    epochs: int = 15
    batch_size: int = 32
    warmup_epochs: int = 2
    lr_start: float = 5e-7
    lr_peak: float = 2e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    mixup_alpha: float = 0.8
    erase_prob: float = 0.25

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mixup_alpha < 0 or not 0 <= self.erase_prob <= 1:
            raise ValueError("augmentation parameters out of range")


def schedule_epoch(
    datasets: list[tuple[str, int]],
    batch_size: int,
    rng: np.random.Generator,
) -> list[tuple[str, np.ndarray]]:
    """One epoch of single-source batches covering every example once.

    `datasets` pairs each source id with its size. Per-source example order
    is shuffled, cut into batches (final partial batch kept), and the batch
    list is shuffled across sources.
    """
    if not datasets:
        raise ValueError("no datasets to schedule")
    batches = []
    for name, size in datasets:
        if size < 1:
            raise ValueError(f"dataset {name!r} is empty")
        order = rng.permutation(size)
        for lo in range(0, size, batch_size):
            batches.append((name, order[lo:lo + batch_size]))
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def _erase_box(shape, rng: np.random.Generator):
    """Random spatio-temporal box covering a modest fraction of the clip."""
    t, h, w = shape
    dt = int(rng.integers(1, t + 1))
    dh = int(rng.integers(max(h // 8, 1), max(h // 2, 2)))
    dw = int(rng.integers(max(w // 8, 1), max(w // 2, 2)))
    t0 = int(rng.integers(0, t - dt + 1))
    y0 = int(rng.integers(0, h - dh + 1))
    x0 = int(rng.integers(0, w - dw + 1))
    return slice(t0, t0 + dt), slice(y0, y0 + dh), slice(x0, x0 + dw)


def augment(
    clips: np.ndarray,
    labels: np.ndarray,
    cfg: AlignConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Mixup (one lambda per batch, reversed-batch pairing) + random erasing.

    Inputs: clips (B, T, H, W, C), labels (B, K) with unit row sums. Output
    labels stay valid soft distributions.
    """
    if labels.ndim != 2 or clips.shape[0] != labels.shape[0]:
        raise ValueError("clips and labels disagree on batch size")
    if np.max(np.abs(labels.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError("label rows must sum to 1")
    out = clips.astype(np.float32, copy=True)
    lab = labels.copy()
    if cfg.mixup_alpha > 0:
        lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
        out = lam * out + (1.0 - lam) * out[::-1]
        lab = lam * lab + (1.0 - lam) * lab[::-1]
    for i in range(out.shape[0]):
        if rng.random() < cfg.erase_prob:
            ts, ys, xs = _erase_box(out.shape[1:4], rng)
            out[i, ts, ys, xs, :] = 0.0
    return out, lab


def align_train(
    encoder_init: Checkpoint | None,
    datasets: dict[str, tuple[list, int]],
    cfg: AlignConfig,
    vit: VitConfig,
    seed: int,
    out_csv=None,
) -> tuple[Checkpoint, list]:
    """Supervised alignment; returns (checkpoint with heads, per-epoch log).

    `datasets` maps source id -> (samples, class count). `encoder_init` is a
    stage-1 checkpoint, or None to align from scratch. Log rows are
    (epoch, source, mean_loss, train_top1). The checkpoint's provenance gains
    one `align:` entry naming the sources joined by '+'.
    """
    if not datasets:
        raise ValueError("no alignment datasets given")
    for name, (samples, n_classes) in datasets.items():
        if n_classes < 1:
            raise ValueError(f"dataset {name!r} declares zero classes")
        if not samples:
            raise ValueError(f"dataset {name!r} is empty")
    sizes = {name: len(s) for name, (s, _) in datasets.items()}
    if max(sizes.values()) > 2 * min(sizes.values()):
        logger.warning("alignment sources beyond 2:1 size imbalance: %s", sizes)

    init_rng = np.random.default_rng([seed, 10])
    heads = {name: k for name, (_, k) in sorted(datasets.items())}
    if encoder_init is not None:
        model = model_from_checkpoint(encoder_init, init_rng, heads=heads)
        prior = list(encoder_init.provenance)
    else:
        model = VideoViT(vit, init_rng, with_decoder=False)
        for name, k in heads.items():
            model.add_head(name, k, init_rng)
        prior = []

    order_rng = np.random.default_rng([seed, 11])
    aug_rng = np.random.default_rng([seed, 12])

    patch_cache = {}
    label_cache = {}
    for name, (samples, n_classes) in datasets.items():
        patch_cache[name] = clips_array(samples)
        label_cache[name] = labels_onehot(samples, n_classes)

    spec_list = sorted(sizes.items())
    steps_per_epoch = sum(math.ceil(s / cfg.batch_size) for _, s in spec_list)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    warmup_steps = min(cfg.warmup_epochs * steps_per_epoch, total_steps)
    opt = AdamW(
        model.param_list(),
        lr=cfg.lr_start,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
        no_decay=model.no_decay_list(),
    )
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        stats = {name: [0.0, 0, 0] for name in sizes}  # loss sum, hits, count
        for name, idx in schedule_epoch(spec_list, cfg.batch_size, order_rng):
            clips = patch_cache[name][idx]
            labels = label_cache[name][idx]
            clips, soft = augment(clips, labels, cfg, aug_rng)
            patches = patchify(clips, vit).astype(vit.np_dtype)
            opt.lr = cosine_warmup_lr(step, total_steps, warmup_steps, cfg.lr_start, cfg.lr_peak)
            with ad.finite_checks(False):
                logits = model.classify(Tensor(patches), name)
                loss = ad.softmax_cross_entropy(logits, soft)
                opt.zero_grad()
                ad.backward(loss)
            if not np.isfinite(loss.data):
                raise NumericsError(f"non-finite loss during alignment epoch {epoch} step {step}")
            opt.step()
            hard = np.argmax(labels, axis=1)
            pred = np.argmax(logits.data, axis=1)
            s = stats[name]
            s[0] += float(loss.data) * len(idx)
            s[1] += int(np.sum(pred == hard))
            s[2] += len(idx)
            step += 1
        for name in sorted(sizes):
            loss_sum, hits, count = stats[name]
            history.append((epoch, name, loss_sum / count, hits / count))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "dataset", "mean_loss", "train_top1"])
            writer.writerows(history)
    stage = "align:" + "+".join(sorted(sizes))
    ckpt = Checkpoint(
        params=model.state_dict(),
        vit=model.config_dict(),
        provenance=prior + [stage],
        meta={"epochs": cfg.epochs, "sources": sorted(sizes)},
    )
    return ckpt, history
