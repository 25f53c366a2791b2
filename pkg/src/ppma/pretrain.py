"""Stage-1 self-supervised pre-training by masked patch reconstruction.

Each clip is patchified, a random 90% of patches is hidden, the encoder sees
only the visible rows, and a narrow decoder predicts every patch's pixels.
Targets are per-patch standardized, the loss covers masked patches only, and
each video appears several times per batch under different masks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ppma import autodiff as ad
from ppma.autodiff import NumericsError, Tensor
from ppma.checkpoint import Checkpoint
from ppma.model import VideoViT, VitConfig, patchify
from ppma.optim import AdamW, cosine_warmup_lr
from ppma.worldgen import clips_array

__all__ = [
    "MaskPlan",
    "MaeConfig",
    "sample_mask",
    "replicate_batch",
    "normalize_targets",
    "mae_loss",
    "mae_forward",
    "mae_pretrain",
    "eval_masked_mse",
]

_NORM_EPS = 1e-6


@dataclass(frozen=True)
class MaskPlan:
    n_patches: int
    masked: np.ndarray    # sorted int64 indices
    visible: np.ndarray   # sorted complement

    def __post_init__(self):
        m, v = set(self.masked.tolist()), set(self.visible.tolist())
        if m & v or (m | v) != set(range(self.n_patches)):
            raise ValueError("masked and visible must partition the patch grid")

    def restore_order(self) -> np.ndarray:
        """Grid position -> row index in [visible rows, masked rows]."""
        return np.argsort(np.concatenate([self.visible, self.masked]), kind="stable")


@dataclass(frozen=True)
class MaeConfig:
    mask_ratio: float = 0.9
    replicas: int = 4
    epochs: int = 30
    batch_videos: int = 32
    warmup_epochs: int = 3
    lr_start: float = 5e-7
    lr_peak: float = 8e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie strictly inside (0, 1)")
        if self.replicas < 1:
            raise ValueError("replicas must be at least 1")
        if self.epochs < 0 or self.batch_videos < 1:
            raise ValueError("epochs must be >= 0 and batch_videos >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniform subset of exactly floor(ratio * n) masked indices."""
    n_masked = int(np.floor(ratio * n_patches))
    if n_masked < 1 or n_masked > n_patches - 1:
        raise ValueError(
            f"ratio {ratio} leaves {n_masked} masked of {n_patches}; need both sets non-empty"
        )
    perm = rng.permutation(n_patches)
    masked = np.sort(perm[:n_masked]).astype(np.int64)
    visible = np.sort(perm[n_masked:]).astype(np.int64)
    return MaskPlan(n_patches, masked, visible)


def replicate_batch(
    videos: list,
    replicas: int,
    rng: np.random.Generator,
    n_patches: int,
    ratio: float,
) -> list:
    """(video, MaskPlan) rows: every video `replicas` times, distinct masks.

    Distinctness is per video; colliding plans are resampled (vanishingly
    rare beyond tiny grids, but guaranteed by retry).
    """
    if replicas < 1:
        raise ValueError("replicas must be at least 1")
    rows = []
    for video in videos:
        plans: list[MaskPlan] = []
        seen: set = set()
        while len(plans) < replicas:
            plan = sample_mask(n_patches, ratio, rng)
            key = plan.masked.tobytes()
            if key in seen:
                continue
            seen.add(key)
            plans.append(plan)
        rows.extend((video, plan) for plan in plans)
    return rows


def normalize_targets(patches: np.ndarray) -> np.ndarray:
    """Per-patch standardization over the last axis (population variance)."""
    if patches.shape[-1] < 2:
        raise ValueError("patch rows need at least 2 values to standardize")
    mean = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mean) / np.sqrt(var + _NORM_EPS)


def mae_loss(pred: Tensor, target_norm: np.ndarray, plan: MaskPlan) -> Tensor:
    """MSE over masked patch rows only; visible rows never enter the graph."""
    if plan.masked.size == 0:
        raise ValueError("plan has no masked patches")
    if pred.shape != target_norm.shape:
        raise ValueError("prediction and target shapes differ")
    p = ad.gather_rows(pred, plan.masked)
    t = target_norm[plan.masked]
    diff = ad.add(p, Tensor(np.ascontiguousarray(-t, dtype=pred.dtype)))
    return ad.tmean(ad.mul(diff, diff))


def mae_forward(model: VideoViT, patches: np.ndarray, plan: MaskPlan) -> Tensor:
    """Single-clip reconstruction: encode visible rows, decode the full grid."""
    if patches.shape != (model.cfg.n_tokens, model.cfg.patch_volume):
        raise ValueError("patch array does not match the model grid")
    vis = patches[plan.visible][None]
    latents = model.encoder_forward(
        Tensor(np.ascontiguousarray(vis, dtype=model.cfg.np_dtype)),
        plan.visible[None, :],
    )
    pred = model.decoder_forward(latents, plan.restore_order()[None, :])
    return ad.reshape(pred, (model.cfg.n_tokens, model.cfg.patch_volume))


def _batched_forward(model, patch_rows, vis_idx, restore_idx):
    vis = np.take_along_axis(patch_rows, vis_idx[:, :, None], axis=1)
    latents = model.encoder_forward(
        Tensor(np.ascontiguousarray(vis, dtype=model.cfg.np_dtype)), vis_idx
    )
    return model.decoder_forward(latents, restore_idx)


def _batched_loss(pred, targets, mask_idx):
    p = ad.gather_rows(pred, mask_idx)
    t = np.take_along_axis(targets, mask_idx[:, :, None], axis=1)
    diff = ad.add(p, Tensor(np.ascontiguousarray(-t, dtype=pred.dtype)))
    return ad.tmean(ad.mul(diff, diff))


def mae_pretrain(
    dataset: list,
    cfg: MaeConfig,
    vit: VitConfig,
    seed: int,
    dataset_name: str = "dataset",
    out_csv=None,
    keep_decoder: bool = False,
) -> tuple[Checkpoint, list]:
    """Full pre-training loop; returns the encoder checkpoint and loss curve.

    The decoder is dropped from the checkpoint unless keep_decoder is set
    (reconstruction-quality probes need it; downstream transfer does not —
    loaders ignore decoder weights unless asked for them). RNG streams are
    split by
    purpose (init / batch order / masks), so the run is a pure function of
    (dataset, configs, seed). History rows are (epoch, mean_loss, lr), where
    lr is the rate of the epoch's final step.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    model = VideoViT(vit, np.random.default_rng([seed, 0]), with_decoder=True)
    order_rng = np.random.default_rng([seed, 1])
    mask_rng = np.random.default_rng([seed, 2])
    all_patches = patchify(clips_array(dataset), vit).astype(vit.np_dtype)
    all_targets = normalize_targets(all_patches).astype(vit.np_dtype)
    n = len(dataset)
    steps_per_epoch = int(np.ceil(n / cfg.batch_videos))
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
        order = order_rng.permutation(n)
        losses = []
        lr = cfg.lr_start
        for lo in range(0, n, cfg.batch_videos):
            video_ids = order[lo:lo + cfg.batch_videos]
            plans = replicate_batch(
                list(video_ids), cfg.replicas, mask_rng, vit.n_tokens, cfg.mask_ratio
            )
            row_ids = np.array([vid for vid, _ in plans])
            vis_idx = np.stack([p.visible for _, p in plans])
            mask_idx = np.stack([p.masked for _, p in plans])
            restore_idx = np.stack([p.restore_order() for _, p in plans])
            patch_rows = all_patches[row_ids]
            target_rows = all_targets[row_ids]
            lr = cosine_warmup_lr(step, total_steps, warmup_steps, cfg.lr_start, cfg.lr_peak)
            opt.lr = lr
            with ad.finite_checks(False):  # hot loop; the loss is checked below
                pred = _batched_forward(model, patch_rows, vis_idx, restore_idx)
                loss = _batched_loss(pred, target_rows, mask_idx)
                opt.zero_grad()
                ad.backward(loss)
            if not np.isfinite(loss.data):
                raise NumericsError(
                    f"non-finite loss during stage-1 epoch {epoch} step {step}"
                )
            opt.step()
            losses.append(float(loss.data))
            step += 1
        history.append((epoch, float(np.mean(losses)), lr))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "mean_loss", "lr"])
            writer.writerows(history)
    ckpt = Checkpoint(
        params=model.state_dict() if keep_decoder else model.encoder_state(),
        vit=model.config_dict(),
        provenance=[f"mae:{dataset_name}"],
        meta={"epochs": cfg.epochs, "final_loss": history[-1][1] if history else None},
    )
    return ckpt, history


def eval_masked_mse(model: VideoViT, dataset: list, ratio: float, seed: int) -> float:
    """Mean masked-patch reconstruction MSE over held-out clips.

    The zero predictor scores 1.0 on standardized targets, so values below 1
    mean the decoder genuinely reconstructs from visible context.
    """
    rng = np.random.default_rng([seed, 3])
    patches = patchify(clips_array(dataset), model.cfg).astype(model.cfg.np_dtype)
    targets = normalize_targets(patches).astype(model.cfg.np_dtype)
    total = 0.0
    with ad.no_grad():
        for i in range(len(dataset)):
            plan = sample_mask(model.cfg.n_tokens, ratio, rng)
            pred = mae_forward(model, patches[i], plan)
            total += float(mae_loss(pred, targets[i], plan).data)
    return total / len(dataset)
