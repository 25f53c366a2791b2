"""Command-line runner: artifact layout, digests, reruns, exit codes."""

import numpy as np
import pytest
import yaml

import ppma.cli as cli
from ppma.autodiff import NumericsError
from ppma.checkpoint import load_checkpoint
from ppma.cli import main
from ppma.worldgen import read_dataset

MICRO = """
world: {seed: 0, n_clips: 8, n_train: 8, n_test: 8}
vit: {frames: 4, height: 32, width: 32, enc_depth: 2, enc_dim: 32,
      enc_heads: 2, dec_depth: 1, dec_dim: 16, dec_heads: 2}
mae: {epochs: 1, batch_videos: 4, replicas: 2, warmup_epochs: 1,
      mask_ratio: 0.75}
align: {epochs: 1, batch_size: 8, warmup_epochs: 1}
eval: {epochs: 1, batch_size: 8, warmup_epochs: 1}
pipelines:
  solo: {stage1: agent}
  pair: {stage1: agent, stage2: [agent]}
soups:
  mix: {models: [solo, pair], alphas: [0.5, 0.5]}
adaptive:
  pick: {m1: solo, m2: pair}
seeds: [0]
modes: [FT, LP]
"""


@pytest.fixture
def micro(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(MICRO + f"out: {tmp_path / 'run'}\n")
    return cfg, tmp_path / "run"


# full pipeline ---------------------------------------------------------------

def test_run_produces_the_complete_artifact_tree(micro):
    cfg, out = micro
    assert main(["run", "--config", str(cfg)]) == 0
    assert (out / "config.yaml").exists()
    assert (out / "ckpt" / "mae_agent.ppck").exists()
    assert (out / "ckpt" / "pair.align.ppck").exists()
    assert (out / "ckpt" / "soup_mix.ppck").exists()
    assert (out / "logs" / "mae_agent.csv").exists()
    assert (out / "logs" / "pair.align.csv").exists()
    assert (out / "results.csv").exists()
    assert (out / "eval.digest").exists()
    assert (out / "adaptive.csv").exists()
    assert (out / "report.md").exists()
    # results cover (pipelines + soup) x 3 tasks x 2 modes x 1 seed
    rows = (out / "results.csv").read_text().split("\n\n")[0].strip().split("\n")
    assert len(rows) == 1 + 3 * 3 * 2
    report = (out / "report.md").read_text()
    assert "| soup_mix |" in report and "Adaptive mixing" in report
    # the stage-1 checkpoint is a valid slim encoder
    ck = load_checkpoint(out / "ckpt" / "mae_agent.ppck")
    assert ck.provenance == ["mae:agent"]
    assert not any(k.startswith("head.") for k in ck.params)


def test_rerun_reuses_every_artifact(micro, monkeypatch):
    cfg, out = micro
    assert main(["run", "--config", str(cfg)]) == 0
    results = (out / "results.csv").read_bytes()

    def boom(*a, **kw):
        raise AssertionError("training reran despite matching digests")

    monkeypatch.setattr(cli, "mae_pretrain", boom)
    monkeypatch.setattr(cli, "align_train", boom)
    monkeypatch.setattr(cli, "run_suite", boom)
    monkeypatch.setattr(cli, "adaptive_lp", boom)
    assert main(["run", "--config", str(cfg)]) == 0
    assert (out / "results.csv").read_bytes() == results


def test_stagewise_resume_matches_single_run(micro, tmp_path):
    cfg, out = micro
    assert main(["run", "--config", str(cfg)]) == 0
    other_cfg = tmp_path / "exp2.yaml"
    other_out = tmp_path / "run2"
    other_cfg.write_text(MICRO + f"out: {other_out}\n")
    for verb in ("gen", "pretrain", "align", "soup", "eval", "report"):
        assert main([verb, "--config", str(other_cfg)]) == 0, verb
    assert (other_out / "results.csv").read_text() == \
        (out / "results.csv").read_text()
    assert (other_out / "adaptive.csv").read_text() == \
        (out / "adaptive.csv").read_text()


def test_changed_config_is_refused_then_forced(micro, capsys):
    cfg, out = micro
    assert main(["run", "--config", str(cfg)]) == 0
    text = cfg.read_text().replace("align: {epochs: 1,", "align: {epochs: 2,")
    assert text != cfg.read_text()
    cfg.write_text(text)
    assert main(["align", "--config", str(cfg)]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["align", "--config", str(cfg), "--force"]) == 0
    ck = load_checkpoint(out / "ckpt" / "pair.align.ppck")
    assert ck.meta["epochs"] == 2


# datagen ---------------------------------------------------------------------

def test_gen_materializes_loadable_corpora(micro):
    cfg, out = micro
    assert main(["gen", "--config", str(cfg)]) == 0
    for name in ("agent", "no_agent", "synth"):
        samples, _digest = read_dataset(out / "data" / f"{name}.ppma")
        assert len(samples) == 8
    assert main(["gen", "--config", str(cfg)]) == 0  # idempotent


# exit codes ------------------------------------------------------------------

def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("world:\n  n_cilps: 10\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_config_and_preset_are_exclusive(micro, capsys):
    cfg, _ = micro
    assert main(["run", "--config", str(cfg), "--preset", "desk"]) == 2
    assert "mutually exclusive" in capsys.readouterr().err


def test_report_before_eval_exits_2(micro, capsys):
    cfg, _ = micro
    assert main(["report", "--config", str(cfg)]) == 2
    assert "missing" in capsys.readouterr().err.lower()


def test_numeric_failure_exits_3(micro, monkeypatch, capsys):
    cfg, _ = micro

    def sick(*a, **kw):
        raise NumericsError("non-finite loss in stage-1 epoch 0")

    monkeypatch.setattr(cli, "mae_pretrain", sick)
    assert main(["pretrain", "--config", str(cfg)]) == 3
    assert "numeric failure" in capsys.readouterr().err


def test_unknown_preset_exits_2(tmp_path):
    assert main(["run", "--preset", "galaxy", "--out", str(tmp_path / "x")]) == 2


# overrides -------------------------------------------------------------------

def test_seed_and_out_overrides_land_in_the_echo(micro, tmp_path):
    cfg, _ = micro
    other = tmp_path / "elsewhere"
    assert main(["gen", "--config", str(cfg), "--seed", "5",
                 "--out", str(other)]) == 0
    echo = yaml.safe_load((other / "config.yaml").read_text())
    assert echo["train_seed"] == 5
    assert echo["seeds"] == [5]
    assert echo["out"] == str(other)


def test_stage1_is_shared_across_pipelines(micro):
    cfg, out = micro
    assert main(["pretrain", "--config", str(cfg)]) == 0
    # solo and pair both pre-train on "agent": exactly one stage-1 artifact
    ckpts = sorted(p.name for p in (out / "ckpt").glob("*.ppck"))
    assert ckpts == ["mae_agent.ppck"]
