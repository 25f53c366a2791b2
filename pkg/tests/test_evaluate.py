"""Transfer evaluation: probes, fine-tuning, suite orchestration, reports."""

import logging

import numpy as np
import pytest

from ppma.evaluate import (
    EvalConfig,
    EvalReport,
    EvalRow,
    _train_test_warning,
    finetune,
    linear_probe,
    parse_report_csv,
    report_csv,
    report_markdown,
    run_suite,
    scratch_checkpoint,
    top1,
)
from ppma.model import VitConfig
from ppma.worldgen import DownstreamTask, WorldSpec, gen_dataset

TINY = VitConfig(frames=4, height=32, width=32, enc_depth=2, enc_dim=32,
                 enc_heads=2, dec_depth=1, dec_dim=16, dec_heads=2)
FAST = EvalConfig(epochs=2, batch_size=8, warmup_epochs=1)


def tiny_task(seed=3, n_train=12, n_test=8, rho=0.9):
    spec = WorldSpec(n_motion=4, n_textures=4, frames=4, height=32, width=32,
                     seed=seed, rho=rho)
    train = gen_dataset(spec, n_train)
    test = gen_dataset(spec, n_test, start_id=n_train)
    return DownstreamTask("demo", train, test, 4, "high", rho)


# top-1 -----------------------------------------------------------------------

def test_top1_counts_argmax_hits():
    logits = np.array([[0.1, 0.9], [0.8, 0.2], [0.3, 0.7]])
    assert top1(logits, [1, 0, 0]) == pytest.approx(2 / 3)


def test_top1_tie_goes_to_lowest_index():
    logits = np.array([[0.5, 0.5, 0.1]])
    assert top1(logits, [0]) == 1.0
    assert top1(logits, [1]) == 0.0


def test_top1_rejects_bad_shapes():
    with pytest.raises(ValueError):
        top1(np.zeros(3), [0, 1, 2])
    with pytest.raises(ValueError):
        top1(np.zeros((0, 4)), [])


# scratch checkpoints ---------------------------------------------------------

def test_scratch_checkpoint_is_bare_encoder():
    ckpt = scratch_checkpoint(TINY, seed=0)
    assert ckpt.provenance == ["scratch"]
    assert not any(k.startswith(("dec.", "head.")) for k in ckpt.params)
    assert any(k.startswith("enc.") for k in ckpt.params)
    again = scratch_checkpoint(TINY, seed=0)
    for k in ckpt.params:
        assert np.array_equal(ckpt.params[k], again.params[k])
    other = scratch_checkpoint(TINY, seed=1)
    assert any(not np.array_equal(ckpt.params[k], other.params[k])
               for k in ckpt.params)


# linear probe ----------------------------------------------------------------

def test_linear_probe_never_touches_encoder_bytes():
    ckpt = scratch_checkpoint(TINY, seed=0)
    task = tiny_task()
    before = {k: v.copy() for k, v in ckpt.params.items()}
    test_acc, train_acc = linear_probe(ckpt, task, FAST, seed=0)
    assert 0.0 <= test_acc <= 1.0 and 0.0 <= train_acc <= 1.0
    assert set(ckpt.params) == set(before)
    for k, v in before.items():
        assert np.array_equal(ckpt.params[k], v), f"{k} changed during probe"


def test_linear_probe_is_deterministic():
    ckpt = scratch_checkpoint(TINY, seed=0)
    task = tiny_task()
    assert linear_probe(ckpt, task, FAST, seed=5) == \
        linear_probe(ckpt, task, FAST, seed=5)


def test_linear_probe_accepts_precomputed_embeddings():
    ckpt = scratch_checkpoint(TINY, seed=0)
    task = tiny_task()
    ref = linear_probe(ckpt, task, FAST, seed=5)
    rng = np.random.default_rng(0)
    from ppma.checkpoint import model_from_checkpoint
    from ppma.evaluate import _embed
    model = model_from_checkpoint(ckpt, rng)
    emb = (_embed(model, task.train), _embed(model, task.test))
    assert linear_probe(ckpt, task, FAST, seed=5, embeddings=emb) == ref


def test_linear_probe_rejects_zero_classes():
    ckpt = scratch_checkpoint(TINY, seed=0)
    task = tiny_task()
    object.__setattr__(task, "n_classes", 0)
    with pytest.raises(ValueError):
        linear_probe(ckpt, task, FAST, seed=0)


# fine-tune -------------------------------------------------------------------

def test_finetune_returns_test_and_train_accuracy():
    ckpt = scratch_checkpoint(TINY, seed=0)
    task = tiny_task()
    test_acc, train_acc = finetune(ckpt, task, FAST, seed=0)
    assert 0.0 <= test_acc <= 1.0 and 0.0 <= train_acc <= 1.0
    assert finetune(ckpt, task, FAST, seed=0) == (test_acc, train_acc)


def test_finetune_does_not_mutate_the_checkpoint():
    ckpt = scratch_checkpoint(TINY, seed=0)
    task = tiny_task()
    before = {k: v.copy() for k, v in ckpt.params.items()}
    finetune(ckpt, task, FAST, seed=0)
    for k, v in before.items():
        assert np.array_equal(ckpt.params[k], v), k


# suite -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_suite():
    ckpts = {
        "init_a": scratch_checkpoint(TINY, seed=0),
        "init_b": scratch_checkpoint(TINY, seed=1),
    }
    tasks = [tiny_task(seed=3), ]
    report = run_suite(ckpts, tasks, modes=("FT", "LP"), seeds=(0, 1), cfg=FAST)
    return ckpts, tasks, report


def test_run_suite_covers_the_cross_product(small_suite):
    _, tasks, report = small_suite
    combos = {(r.regime, r.task, r.mode, r.seed) for r in report.rows}
    want = {(reg, t.name, m, s)
            for reg in ("init_a", "init_b")
            for t in tasks for m in ("FT", "LP") for s in (0, 1)}
    assert combos == want
    assert len(report.rows) == len(want)
    assert report.tasks == ["demo"] and report.seeds == [0, 1]


def test_run_suite_reports_are_byte_reproducible(small_suite):
    ckpts, tasks, report = small_suite
    again = run_suite(ckpts, tasks, modes=("FT", "LP"), seeds=(0, 1), cfg=FAST)
    assert report_csv(again) == report_csv(report)


def test_aggregates_equal_recomputed_means(small_suite):
    _, _, report = small_suite
    for (regime, mode), agg in report.aggregates.items():
        means = report.seed_means(regime, mode)
        assert agg["mean"] == float(np.mean(means))
        assert agg["min"] == float(np.min(means))
        assert agg["max"] == float(np.max(means))


def test_csv_round_trip_is_exact(small_suite):
    _, _, report = small_suite
    parsed = parse_report_csv(report_csv(report))
    assert parsed.rows == report.rows
    assert parsed.aggregates == report.aggregates
    assert parsed.tasks == report.tasks and parsed.seeds == report.seeds


def test_markdown_layout(small_suite):
    _, _, report = small_suite
    md = report_markdown(report)
    lines = md.strip().split("\n")
    assert lines[0].startswith("| Regime | demo FT | demo LP | "
                               "Average FT | Average LP |")
    assert len(lines) == 2 + 2  # header, rule, one row per regime
    assert lines[2].startswith("| init_a | ")
    assert "[" in lines[2] and "]" in lines[2]  # seed min/max spread


def test_markdown_dashes_without_aggregates(small_suite):
    _, _, report = small_suite
    bare = EvalReport(report.rows, {}, report.tasks, report.seeds)
    md = report_markdown(bare)
    assert "| - | - |" in md.replace("\n", " ")


def test_run_suite_validates_inputs():
    ckpt = scratch_checkpoint(TINY, seed=0)
    task = tiny_task()
    with pytest.raises(ValueError):
        run_suite({}, [task])
    with pytest.raises(ValueError):
        run_suite({"a": ckpt}, [])
    with pytest.raises(ValueError):
        run_suite({"a": ckpt}, [task], modes=("FT", "zero-shot"))


def test_parse_report_csv_rejects_garbage():
    with pytest.raises(ValueError):
        parse_report_csv("time,value\n0,1\n")
    with pytest.raises(ValueError):
        parse_report_csv("regime,task,mode,seed,top1,train_top1\n")


def test_train_below_test_triggers_warning(caplog):
    rows = [EvalRow("r", "t", "FT", 0, top1=0.9, train_top1=0.2)]
    report = EvalReport(rows, {}, ["t"], [0])
    with caplog.at_level(logging.WARNING, logger="ppma.evaluate"):
        _train_test_warning(report)
    assert any("train accuracy below test" in r.message for r in caplog.records)
    caplog.clear()
    healthy = EvalReport([EvalRow("r", "t", "FT", 0, 0.5, 0.9)], {}, ["t"], [0])
    with caplog.at_level(logging.WARNING, logger="ppma.evaluate"):
        _train_test_warning(healthy)
    assert not caplog.records
