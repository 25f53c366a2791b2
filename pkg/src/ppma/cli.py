"""Experiment runner.

Verbs: `gen` materializes the pre-training corpora, `pretrain` and `align`
run the two training stages for every configured pipeline, `soup` builds
weight mixes and learns adaptive ratios, `eval` runs the downstream suite,
`report` re-renders the Markdown summary from CSVs, and `run` chains
everything. Completed stages are skipped on rerun when their recorded
digest matches the requested configuration; a mismatch refuses to proceed
unless --force is given.

Exit codes: 0 success, 2 configuration or artifact-state error, 3 numeric
failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from ppma.align import align_train
from ppma.autodiff import NumericsError
from ppma.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from ppma.config import (ConfigError, ExperimentConfig, _plain, config_digest,
                         dump_config, parse_config, preset)
from ppma.evaluate import (_cell_seed, parse_report_csv, report_csv,
                           report_markdown, run_suite)
from ppma.pretrain import mae_pretrain
from ppma.soup import MixSpec, adaptive_lp, average_weights
from ppma.worldgen import REGIME_NAMES, WorldSpec, make_regimes, make_tasks, write_dataset

__all__ = ["main", "run_pipeline"]

logger = logging.getLogger(__name__)

_ADAPTIVE_HEADER = ["job", "task", "seed", "beta", "top1"]


def pretrain_world(cfg: ExperimentConfig) -> WorldSpec:
    """The agent-visible pre-training world implied by the configuration."""
    return WorldSpec(
        seed=cfg.world.seed,
        rho=cfg.world.rho,
        noise=cfg.world.noise,
        frames=cfg.vit.frames,
        height=cfg.vit.height,
        width=cfg.vit.width,
        channels=cfg.vit.channels,
    )


def _regimes(cfg: ExperimentConfig) -> dict[str, list]:
    worlds = make_regimes(pretrain_world(cfg), cfg.world.n_clips, cfg.world.removal)
    return dict(zip(REGIME_NAMES, worlds))


def _tasks(cfg: ExperimentConfig) -> list:
    return make_tasks(cfg.world.seed, cfg.world.n_train, cfg.world.n_test,
                      frames=cfg.vit.frames, height=cfg.vit.height, width=cfg.vit.width)


def _sha(*parts: str) -> str:
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()


def _base_digest(cfg: ExperimentConfig) -> str:
    return _sha(yaml.safe_dump(_plain(cfg.world)), yaml.safe_dump(_plain(cfg.vit)))


def _stage1_digest(cfg: ExperimentConfig, dataset: str) -> str:
    return _sha("stage1", _base_digest(cfg), yaml.safe_dump(_plain(cfg.mae)),
                dataset, str(cfg.train_seed))


def _stage2_digest(cfg: ExperimentConfig, name: str) -> str:
    pipe = cfg.pipelines[name]
    s1 = _stage1_digest(cfg, pipe.stage1) if pipe.stage1 is not None else "none"
    return _sha("stage2", _base_digest(cfg), s1, yaml.safe_dump(_plain(cfg.align)),
                ",".join(pipe.stage2), str(cfg.train_seed))


def _final_digest(cfg: ExperimentConfig, name: str) -> str:
    pipe = cfg.pipelines[name]
    if pipe.stage2:
        return _stage2_digest(cfg, name)
    return _stage1_digest(cfg, pipe.stage1)


def _soup_digest(cfg: ExperimentConfig, name: str) -> str:
    job = cfg.soups[name]
    return _sha("soup", *[_final_digest(cfg, m) for m in job.models],
                ",".join(f"{a:g}" for a in job.alphas))


def _eval_digest(cfg: ExperimentConfig) -> str:
    finals = [_final_digest(cfg, n) for n in sorted(cfg.pipelines)]
    soups = [_soup_digest(cfg, n) for n in sorted(cfg.soups)]
    return _sha("eval", _base_digest(cfg), *finals, *soups,
                yaml.safe_dump(_plain(cfg.eval)),
                ",".join(map(str, cfg.seeds)), ",".join(cfg.modes))


def _adaptive_digest(cfg: ExperimentConfig) -> str:
    parts = []
    for name in sorted(cfg.adaptive):
        job = cfg.adaptive[name]
        parts += [name, _final_digest(cfg, job.m1), _final_digest(cfg, job.m2)]
    return _sha("adaptive", _base_digest(cfg), yaml.safe_dump(_plain(cfg.eval)),
                ",".join(map(str, cfg.seeds)), *parts)


def _stage1_path(out: Path, dataset: str) -> Path:
    return out / "ckpt" / f"mae_{dataset}.ppck"


def _final_path(cfg: ExperimentConfig, out: Path, name: str) -> Path:
    pipe = cfg.pipelines[name]
    if pipe.stage2:
        return out / "ckpt" / f"{name}.align.ppck"
    return _stage1_path(out, pipe.stage1)


def _ensure_out(cfg: ExperimentConfig, force: bool) -> Path:
    out = Path(cfg.out)
    (out / "ckpt").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    echo = dump_config(cfg)
    cpath = out / "config.yaml"
    if cpath.exists() and cpath.read_text() != echo:
        if not force:
            raise ConfigError(
                f"{cpath} holds a different resolved configuration "
                f"(digest {config_digest(cfg)[:12]} requested); pass --force to overwrite")
        cpath.write_text(echo)
    elif not cpath.exists():
        cpath.write_text(echo)
    return out


def _reusable(path: Path, digest: str, force: bool, what: str) -> Checkpoint | None:
    """Load a finished artifact if its digest matches; None means redo."""
    if not path.exists():
        return None
    ck = load_checkpoint(path)
    if ck.meta.get("config_digest") == digest:
        logger.info("%s up to date at %s", what, path)
        return ck
    if force:
        return None
    raise ConfigError(
        f"{path} was produced under a different configuration; "
        f"pass --force to retrain {what}")


def run_gen(cfg: ExperimentConfig, force: bool) -> Path:
    out = _ensure_out(cfg, force)
    data = out / "data"
    data.mkdir(exist_ok=True)
    spec = pretrain_world(cfg)
    regimes = _regimes(cfg)
    for name in REGIME_NAMES:
        path = data / f"{name}.ppma"
        if path.exists() and not force:
            logger.info("dataset %s already materialized", path)
            continue
        write_dataset(path, regimes[name], spec)
        logger.info("wrote %d clips to %s", len(regimes[name]), path)
    return out


def run_stage1(cfg: ExperimentConfig, force: bool) -> dict[str, Checkpoint]:
    """One MAE run per distinct stage-1 dataset; pipelines share them."""
    out = _ensure_out(cfg, force)
    datasets = sorted({p.stage1 for p in cfg.pipelines.values() if p.stage1 is not None})
    regimes = None
    ckpts = {}
    for dataset in datasets:
        path = _stage1_path(out, dataset)
        digest = _stage1_digest(cfg, dataset)
        ck = _reusable(path, digest, force, f"stage 1 on {dataset}")
        if ck is None:
            if regimes is None:
                regimes = _regimes(cfg)
            logger.info("stage 1: reconstruction pre-training on %s", dataset)
            ck, _ = mae_pretrain(regimes[dataset], cfg.mae, cfg.vit, seed=cfg.train_seed,
                                 dataset_name=dataset,
                                 out_csv=out / "logs" / f"mae_{dataset}.csv")
            ck.meta["config_digest"] = digest
            save_checkpoint(ck, path)
        ckpts[dataset] = ck
    return ckpts


def run_stage2(cfg: ExperimentConfig, force: bool) -> dict[str, Checkpoint]:
    """Alignment per pipeline; returns every pipeline's final checkpoint."""
    out = _ensure_out(cfg, force)
    stage1 = run_stage1(cfg, force)
    n_classes = pretrain_world(cfg).n_motion
    regimes = None
    finals = {}
    for name in sorted(cfg.pipelines):
        pipe = cfg.pipelines[name]
        if not pipe.stage2:
            finals[name] = stage1[pipe.stage1]
            continue
        path = _final_path(cfg, out, name)
        digest = _stage2_digest(cfg, name)
        ck = _reusable(path, digest, force, f"stage 2 for {name}")
        if ck is None:
            if regimes is None:
                regimes = _regimes(cfg)
            init = stage1[pipe.stage1] if pipe.stage1 is not None else None
            logger.info("stage 2: alignment for %s on %s", name, "+".join(pipe.stage2))
            ck, _ = align_train(init, {d: (regimes[d], n_classes) for d in pipe.stage2},
                                cfg.align, cfg.vit, seed=cfg.train_seed,
                                out_csv=out / "logs" / f"{name}.align.csv")
            ck.meta["config_digest"] = digest
            save_checkpoint(ck, path)
        finals[name] = ck
    return finals


def run_soup(cfg: ExperimentConfig, force: bool) -> dict[str, Checkpoint]:
    """Fixed-proportion mixes plus adaptive-ratio probes; returns the mixes."""
    out = _ensure_out(cfg, force)
    if not cfg.soups and not cfg.adaptive:
        return {}
    finals = run_stage2(cfg, force)
    mixes = {}
    for name in sorted(cfg.soups):
        job = cfg.soups[name]
        path = out / "ckpt" / f"soup_{name}.ppck"
        digest = _soup_digest(cfg, name)
        ck = _reusable(path, digest, force, f"soup {name}")
        if ck is None:
            ck = average_weights(MixSpec(tuple(finals[m] for m in job.models), job.alphas))
            ck.meta["config_digest"] = digest
            save_checkpoint(ck, path)
            logger.info("soup %s mixed from %s", name, list(job.models))
        mixes[name] = ck
    if cfg.adaptive:
        apath = out / "adaptive.csv"
        dpath = out / "adaptive.digest"
        digest = _adaptive_digest(cfg)
        if apath.exists() and dpath.exists() and dpath.read_text() == digest:
            logger.info("adaptive results up to date")
            return mixes
        if apath.exists() and dpath.exists() and not force:
            raise ConfigError(f"{apath} came from a different configuration; "
                              "pass --force to redo adaptive mixing")
        tasks = _tasks(cfg)
        rows = []
        for name in sorted(cfg.adaptive):
            job = cfg.adaptive[name]
            for task in tasks:
                for seed in cfg.seeds:
                    cell = _cell_seed(seed, name, task.name, "LP")
                    beta, acc = adaptive_lp(
                        finals[job.m1], finals[job.m2], task, cfg.eval, seed=cell,
                        out_csv=out / "logs" / f"adaptive_{name}_{task.name}_{seed}.csv")
                    rows.append([name, task.name, seed, repr(beta), repr(acc)])
                    logger.info("adaptive %s %s seed %d: beta %.3f top1 %.3f",
                                name, task.name, seed, beta, acc)
        with open(apath, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(_ADAPTIVE_HEADER)
            writer.writerows(rows)
        dpath.write_text(digest)
    return mixes


def run_eval(cfg: ExperimentConfig, force: bool) -> Path:
    out = _ensure_out(cfg, force)
    rpath = out / "results.csv"
    dpath = out / "eval.digest"
    digest = _eval_digest(cfg)
    if rpath.exists() and dpath.exists() and dpath.read_text() == digest:
        logger.info("evaluation results up to date")
        return rpath
    if rpath.exists() and dpath.exists() and not force:
        raise ConfigError(f"{rpath} came from a different configuration; "
                          "pass --force to re-evaluate")
    ckpts = dict(run_stage2(cfg, force))
    for name, ck in run_soup(cfg, force).items():
        ckpts[f"soup_{name}"] = ck
    tasks = _tasks(cfg)
    logger.info("evaluating %d checkpoints x %d tasks x %s x %d seeds",
                len(ckpts), len(tasks), "/".join(cfg.modes), len(cfg.seeds))
    report = run_suite(ckpts, tasks, modes=cfg.modes, seeds=cfg.seeds, cfg=cfg.eval)
    rpath.write_text(report_csv(report))
    dpath.write_text(digest)
    return rpath


def run_report(cfg: ExperimentConfig, force: bool) -> Path:
    """Markdown summary rendered purely from the CSV artifacts."""
    out = _ensure_out(cfg, force)
    rpath = out / "results.csv"
    if not rpath.exists():
        raise ConfigError(f"{rpath} missing; run `ppma eval` (or `ppma run`) first")
    report = parse_report_csv(rpath.read_text())
    lines = ["# Desk transfer suite", "",
             "Top-1 percent by regime; averages carry [min, max] over seeds.", "",
             report_markdown(report)]
    apath = out / "adaptive.csv"
    if apath.exists():
        lines += ["", "## Adaptive mixing", "",
                  "| Job | Task | Mean beta | Mean top-1 |", "|---|---|---|---|"]
        with open(apath, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != _ADAPTIVE_HEADER:
                raise ConfigError(f"{apath} has an unexpected header")
            cells: dict[tuple[str, str], list[tuple[float, float]]] = {}
            order = []
            for job, task, _seed, beta, acc in reader:
                key = (job, task)
                if key not in cells:
                    cells[key] = []
                    order.append(key)
                cells[key].append((float(beta), float(acc)))
        for job, task in order:
            betas = [b for b, _ in cells[(job, task)]]
            accs = [a for _, a in cells[(job, task)]]
            lines.append(f"| {job} | {task} | {np.mean(betas):.3f} | "
                         f"{100 * np.mean(accs):.1f} |")
    mpath = out / "report.md"
    mpath.write_text("\n".join(lines) + "\n")
    logger.info("wrote %s", mpath)
    return mpath


def run_pipeline(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Datagen, both training stages, soups, the eval suite, and the report."""
    out = _ensure_out(cfg, force)
    run_stage1(cfg, force)
    run_stage2(cfg, force)
    run_soup(cfg, force)
    run_eval(cfg, force)
    run_report(cfg, force)
    return out


_VERBS = {
    "gen": run_gen,
    "pretrain": lambda cfg, force: run_stage1(cfg, force) and None,
    "align": lambda cfg, force: run_stage2(cfg, force) and None,
    "soup": lambda cfg, force: run_soup(cfg, force) and None,
    "eval": run_eval,
    "report": run_report,
    "run": run_pipeline,
}


def _load_cfg(args) -> ExperimentConfig:
    if args.config is not None and args.preset is not None:
        raise ConfigError("--config and --preset are mutually exclusive")
    if args.config is not None:
        cfg = parse_config(args.config)
    elif args.preset is not None:
        cfg = preset(args.preset)
    else:
        cfg = ExperimentConfig()
    try:
        if args.seed is not None:
            cfg = replace(cfg, train_seed=args.seed, seeds=(args.seed,))
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppma",
        description="Two-stage video pre-training laboratory: masked "
                    "reconstruction, label alignment, transfer evaluation, "
                    "and weight mixing on procedural toy worlds.")
    sub = parser.add_subparsers(dest="verb", required=True)
    helps = {
        "gen": "materialize the pre-training corpora to container files",
        "pretrain": "run stage 1 (masked reconstruction) for all pipelines",
        "align": "run stage 2 (supervised alignment) for all pipelines",
        "soup": "build weight mixes and learn adaptive ratios",
        "eval": "run the downstream FT/LP suite",
        "report": "re-render the Markdown summary from CSVs",
        "run": "full pipeline: stages, soups, evaluation, report",
    }
    for verb, fn in _VERBS.items():
        p = sub.add_parser(verb, help=helps[verb])
        p.add_argument("--config", help="YAML experiment configuration")
        p.add_argument("--preset", help="named built-in configuration")
        p.add_argument("--seed", type=int,
                       help="use a single seed for training and evaluation")
        p.add_argument("--out", help="artifact directory (overrides config)")
        p.add_argument("--force", action="store_true",
                       help="redo artifacts whose recorded digest mismatches")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_cfg(args)
        args.fn(cfg, args.force)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
