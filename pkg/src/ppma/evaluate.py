"""Downstream transfer evaluation: fine-tune and linear-probe protocols.

Fine-tuning updates every parameter with the alignment augmentation recipe;
linear probing freezes the encoder, embeds each clip once, and trains only a
fresh linear head. Suites run the full regime x task x mode x seed cross
product and render byte-reproducible CSV and Markdown reports.
"""

from __future__ import annotations

import csv
import io
import logging
import zlib
from dataclasses import dataclass

import numpy as np

from ppma import autodiff as ad
from ppma.autodiff import NumericsError, Tensor
from ppma.align import AlignConfig, augment
from ppma.checkpoint import Checkpoint, model_from_checkpoint
from ppma.model import VideoViT, VitConfig, patchify, trunc_normal
from ppma.optim import AdamW, cosine_warmup_lr
from ppma.worldgen import DownstreamTask, clips_array, labels_onehot

__all__ = [
    "EvalConfig",
    "EvalRow",
    "EvalReport",
    "top1",
    "linear_probe",
    "finetune",
    "run_suite",
    "scratch_checkpoint",
    "report_csv",
    "report_markdown",
    "parse_report_csv",
]

logger = logging.getLogger(__name__)

_HEAD = "task"


@dataclass(frozen=True)
class EvalConfig:
    epochs: int = 10
    batch_size: int = 32
    ft_lr_peak: float = 2e-3
    lp_lr_peak: float = 1.6e-2
    lr_start: float = 5e-7
    warmup_epochs: int = 1
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    mixup_alpha: float = 0.8
    erase_prob: float = 0.25

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class EvalRow:
    regime: str
    task: str
    mode: str
    seed: int
    top1: float
    train_top1: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    aggregates: dict  # (regime, mode) -> {"mean": float, "min": float, "max": float}
    tasks: list[str]
    seeds: list[int]

    def cell(self, regime: str, task: str, mode: str) -> list[float]:
        return [r.top1 for r in self.rows
                if r.regime == regime and r.task == task and r.mode == mode]

    def seed_means(self, regime: str, mode: str) -> list[float]:
        """Per-seed mean over tasks, in seed order."""
        out = []
        for seed in self.seeds:
            vals = [r.top1 for r in self.rows
                    if r.regime == regime and r.mode == mode and r.seed == seed]
            out.append(float(np.mean(vals)))
        return out


def top1(logits: np.ndarray, labels) -> float:
    """Fraction of argmax hits; ties resolve to the lowest class index."""
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError("logits must be (B, K) with B >= 1")
    pred = np.argmax(logits, axis=1)
    truth = np.asarray(labels)
    return float(np.mean(pred == truth))


def scratch_checkpoint(vit: VitConfig, seed: int) -> Checkpoint:
    """Fresh random encoder, for no-pre-training baselines."""
    model = VideoViT(vit, np.random.default_rng([seed, 0]), with_decoder=False)
    return Checkpoint(model.encoder_state(), model.config_dict(), ["scratch"], {})


def _embed(model: VideoViT, samples, batch: int = 64) -> np.ndarray:
    """Frozen pooled features for every clip, in dataset order."""
    vit = model.cfg
    out = []
    with ad.no_grad():
        for lo in range(0, len(samples), batch):
            patches = patchify(clips_array(samples[lo:lo + batch]), vit).astype(vit.np_dtype)
            feats = model.pool(model.encoder_forward(Tensor(patches)))
            out.append(feats.data)
    return np.concatenate(out, axis=0)


def linear_probe(
    ckpt: Checkpoint,
    task: DownstreamTask,
    cfg: EvalConfig,
    seed: int,
    embeddings: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[float, float]:
    """Head-only training on frozen features; returns (test, train) top-1.

    The encoder is used once to embed the splits (or reuse precomputed
    `embeddings`) and is never part of the optimization, so its bytes cannot
    change. No augmentation: features are fixed, batches reshuffle only.
    Weight decay is 0 for the lone trained layer.
    """
    if task.n_classes < 1:
        raise ValueError("task declares zero classes")
    rng = np.random.default_rng([seed, 40])
    vit = VitConfig(**ckpt.vit)
    if embeddings is None:
        model = model_from_checkpoint(ckpt, rng)
        x_train, x_test = _embed(model, task.train), _embed(model, task.test)
    else:
        x_train, x_test = embeddings
    y_train = labels_onehot(task.train, task.n_classes)
    w = Tensor(trunc_normal(rng, (vit.feat_dim, task.n_classes), 0.02, vit.np_dtype),
               requires_grad=True)
    b = Tensor(np.zeros(task.n_classes, dtype=vit.np_dtype), requires_grad=True)
    opt = AdamW([w, b], betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                weight_decay=0.0, no_decay=[b])
    n = x_train.shape[0]
    steps_per_epoch = int(np.ceil(n / cfg.batch_size))
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    warmup_steps = min(cfg.warmup_epochs * steps_per_epoch, total_steps)
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            opt.lr = cosine_warmup_lr(step, total_steps, warmup_steps,
                                      cfg.lr_start, cfg.lp_lr_peak)
            feats = Tensor(np.ascontiguousarray(x_train[idx]))
            loss = ad.softmax_cross_entropy(ad.linear(feats, w, b), y_train[idx])
            opt.zero_grad()
            ad.backward(loss)
            if not np.isfinite(loss.data):
                raise NumericsError(f"non-finite probe loss at step {step}")
            opt.step()
            step += 1
    test_logits = x_test @ w.data + b.data
    train_logits = x_train @ w.data + b.data
    return (
        top1(test_logits, [s.motion_label for s in task.test]),
        top1(train_logits, [s.motion_label for s in task.train]),
    )


def finetune(
    ckpt: Checkpoint,
    task: DownstreamTask,
    cfg: EvalConfig,
    seed: int,
) -> tuple[float, float]:
    """All-parameter training with the alignment augmentations; (test, train) top-1."""
    if task.n_classes < 1:
        raise ValueError("task declares zero classes")
    rng = np.random.default_rng([seed, 41])
    aug_rng = np.random.default_rng([seed, 42])
    model = model_from_checkpoint(ckpt, rng, heads={_HEAD: task.n_classes})
    vit = model.cfg
    aug_cfg = AlignConfig(mixup_alpha=cfg.mixup_alpha, erase_prob=cfg.erase_prob)
    clips = clips_array(task.train)
    labels = labels_onehot(task.train, task.n_classes)
    opt = AdamW(model.param_list(), betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay, no_decay=model.no_decay_list())
    n = len(task.train)
    steps_per_epoch = int(np.ceil(n / cfg.batch_size))
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    warmup_steps = min(cfg.warmup_epochs * steps_per_epoch, total_steps)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            x, soft = augment(clips[idx], labels[idx], aug_cfg, aug_rng)
            patches = patchify(x, vit).astype(vit.np_dtype)
            opt.lr = cosine_warmup_lr(step, total_steps, warmup_steps,
                                      cfg.lr_start, cfg.ft_lr_peak)
            with ad.finite_checks(False):
                logits = model.classify(Tensor(patches), _HEAD)
                loss = ad.softmax_cross_entropy(logits, soft)
                opt.zero_grad()
                ad.backward(loss)
            if not np.isfinite(loss.data):
                raise NumericsError(f"non-finite loss in fine-tune epoch {epoch}")
            opt.step()
            step += 1
    test_feats = _embed(model, task.test)
    train_feats = _embed(model, task.train)
    with ad.no_grad():
        test_logits = model.head_forward(_HEAD, Tensor(test_feats)).data
        train_logits = model.head_forward(_HEAD, Tensor(train_feats)).data
    return (
        top1(test_logits, [s.motion_label for s in task.test]),
        top1(train_logits, [s.motion_label for s in task.train]),
    )


def _cell_seed(seed: int, regime: str, task: str, mode: str) -> int:
    """Distinct per cell: the suite seed in high bits, a name hash in low bits."""
    return (seed << 32) | zlib.crc32(f"{regime}|{task}|{mode}".encode())


def run_suite(
    ckpts: dict[str, Checkpoint],
    tasks: list[DownstreamTask],
    modes: tuple[str, ...] = ("FT", "LP"),
    seeds: tuple[int, ...] = (0, 1, 2),
    cfg: EvalConfig | None = None,
) -> EvalReport:
    """Evaluate every (regime, task, mode, seed) cell; deterministic given seeds.

    Linear-probe embeddings are computed once per (regime, task) and shared
    across seeds: they depend only on the frozen encoder. Aggregates are the
    mean over tasks then seeds, with min/max per-seed spread.
    """
    if not ckpts or not tasks:
        raise ValueError("need at least one checkpoint and one task")
    bad = [m for m in modes if m not in ("FT", "LP")]
    if bad:
        raise ValueError(f"unknown eval modes: {bad}")
    cfg = cfg or EvalConfig()
    rows = []
    for regime in sorted(ckpts):
        ckpt = ckpts[regime]
        lp_model = None
        for task in tasks:
            embeddings = None
            for mode in modes:
                for seed in seeds:
                    cell = _cell_seed(seed, regime, task.name, mode)
                    if mode == "FT":
                        acc, train_acc = finetune(ckpt, task, cfg, seed=cell)
                    else:
                        if embeddings is None:
                            if lp_model is None:
                                lp_model = model_from_checkpoint(
                                    ckpt, np.random.default_rng([0, 40]))
                            embeddings = (_embed(lp_model, task.train),
                                          _embed(lp_model, task.test))
                        acc, train_acc = linear_probe(
                            ckpt, task, cfg, seed=cell, embeddings=embeddings)
                    rows.append(EvalRow(regime, task.name, mode, seed, acc, train_acc))
        del lp_model
    report = EvalReport(rows, {}, [t.name for t in tasks], list(seeds))
    _fill_aggregates(report)
    _train_test_warning(report)
    return report


def _fill_aggregates(report: EvalReport) -> None:
    report.aggregates.clear()
    combos = sorted({(r.regime, r.mode) for r in report.rows})
    for regime, mode in combos:
        means = report.seed_means(regime, mode)
        report.aggregates[(regime, mode)] = {
            "mean": float(np.mean(means)),
            "min": float(np.min(means)),
            "max": float(np.max(means)),
        }


def parse_report_csv(text: str) -> EvalReport:
    """Rebuild a report from its CSV dump; aggregates are recomputed."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["regime", "task", "mode", "seed", "top1", "train_top1"]:
        raise ValueError("not a results CSV: unexpected header")
    rows = []
    for rec in reader:
        if not rec:
            break
        rows.append(EvalRow(rec[0], rec[1], rec[2], int(rec[3]),
                            float(rec[4]), float(rec[5])))
    if not rows:
        raise ValueError("results CSV has no rows")
    tasks = list(dict.fromkeys(r.task for r in rows))
    seeds = list(dict.fromkeys(r.seed for r in rows))
    report = EvalReport(rows, {}, tasks, seeds)
    _fill_aggregates(report)
    return report


def _train_test_warning(report: EvalReport) -> None:
    """Trained models usually fit train at least as well as test; warn if not."""
    combos = {(r.regime, r.task, r.mode) for r in report.rows}
    for regime, task, mode in sorted(combos):
        cells = [r for r in report.rows
                 if (r.regime, r.task, r.mode) == (regime, task, mode)]
        train_mean = float(np.mean([r.train_top1 for r in cells]))
        test_mean = float(np.mean([r.top1 for r in cells]))
        if train_mean < test_mean:
            logger.warning(
                "train accuracy below test for %s/%s/%s (%.3f < %.3f); "
                "small-sample noise is the usual cause",
                regime, task, mode, train_mean, test_mean,
            )


def report_csv(report: EvalReport) -> str:
    """Exact row dump; float cells use repr so parsing returns equal floats."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["regime", "task", "mode", "seed", "top1", "train_top1"])
    for r in report.rows:
        writer.writerow([r.regime, r.task, r.mode, r.seed, repr(r.top1), repr(r.train_top1)])
    writer.writerow([])
    writer.writerow(["regime", "mode", "mean", "seed_min", "seed_max"])
    for (regime, mode), agg in sorted(report.aggregates.items()):
        writer.writerow([regime, mode, repr(agg["mean"]), repr(agg["min"]), repr(agg["max"])])
    return buf.getvalue()


def report_markdown(report: EvalReport) -> str:
    """Regime rows; per-task FT/LP percentage columns; trailing Average pair."""
    modes = sorted({r.mode for r in report.rows})
    header = ["Regime"]
    for task in report.tasks:
        header += [f"{task} {m}" for m in modes]
    header += [f"Average {m}" for m in modes]
    lines = ["| " + " | ".join(header) + " |",
             "|" + "---|" * len(header)]
    regimes = sorted({r.regime for r in report.rows})
    for regime in regimes:
        cells = [regime]
        for task in report.tasks:
            for mode in modes:
                vals = report.cell(regime, task, mode)
                cells.append("%.1f" % (100.0 * float(np.mean(vals))))
        for mode in modes:
            agg = report.aggregates.get((regime, mode))
            if agg is None:
                cells.append("-")
            else:
                cells.append("%.1f [%.1f, %.1f]" % (
                    100 * agg["mean"], 100 * agg["min"], 100 * agg["max"]))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
