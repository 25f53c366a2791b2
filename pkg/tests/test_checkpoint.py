"""Checkpoint persistence: binary round trips, corruption detection, loading."""

import numpy as np
import pytest

from ppma.checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from ppma.model import VideoViT, VitConfig

TINY = VitConfig(frames=4, height=32, width=32, enc_depth=2, enc_dim=32,
                 enc_heads=2, dec_depth=1, dec_dim=16, dec_heads=2)


def tiny_ckpt(seed=0, with_decoder=False, heads=()):
    model = VideoViT(TINY, np.random.default_rng(seed), with_decoder=with_decoder)
    for name in heads:
        model.add_head(name, 4, np.random.default_rng(seed + 1))
    params = model.state_dict() if (with_decoder or heads) else model.encoder_state()
    return Checkpoint(params, model.config_dict(), ["stage-x"], {"note": 1})


# round trips -----------------------------------------------------------------

def test_round_trip_is_bitwise(tmp_path):
    ckpt = tiny_ckpt(heads=("task",), with_decoder=True)
    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert set(back.params) == set(ckpt.params)
    for k, v in ckpt.params.items():
        assert back.params[k].dtype == v.dtype
        assert back.params[k].shape == v.shape
        assert np.array_equal(back.params[k], v), k
    assert back.vit == ckpt.vit
    assert back.provenance == ["stage-x"]
    assert back.meta == {"note": 1}


def test_save_is_deterministic(tmp_path):
    ckpt = tiny_ckpt()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(ckpt, a)
    save_checkpoint(ckpt, b)
    assert a.read_bytes() == b.read_bytes()


def test_float64_tensors_survive(tmp_path):
    ckpt = tiny_ckpt()
    ckpt.params["extra.stats"] = np.linspace(0, 1, 7, dtype=np.float64)
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.params["extra.stats"].dtype == np.float64
    assert np.array_equal(back.params["extra.stats"], ckpt.params["extra.stats"])


# corruption ------------------------------------------------------------------

def test_missing_file_raises_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_ckpt(), path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"WHAT"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_tiny_or_empty_file_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"PPCK" + b"\x00" * 10)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncation_detected_anywhere(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_ckpt(), path)
    blob = path.read_bytes()
    for cut in (len(blob) - 1, len(blob) - 33, len(blob) // 2, 60):
        path.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_single_flipped_bit_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_ckpt(), path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x10
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path)


def test_trailing_garbage_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_ckpt(), path)
    path.write_bytes(path.read_bytes() + b"\x00" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unsupported_version_rejected(tmp_path):
    import hashlib
    import struct

    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_ckpt(), path)
    blob = bytearray(path.read_bytes())[:-32]
    struct.pack_into("<H", blob, 4, 9)
    digest = hashlib.sha256(bytes(blob)).digest()
    path.write_bytes(bytes(blob) + digest)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


# provenance & digest ---------------------------------------------------------

def test_with_stage_appends_and_copies():
    ckpt = tiny_ckpt()
    derived = ckpt.with_stage("stage-y")
    assert derived.provenance == ["stage-x", "stage-y"]
    assert ckpt.provenance == ["stage-x"], "original untouched"
    k = next(iter(ckpt.params))
    derived.params[k][...] = -1.0
    assert not np.array_equal(ckpt.params[k], derived.params[k]), \
        "with_stage must deep-copy tensors"


def test_config_digest_tracks_architecture():
    a = tiny_ckpt()
    assert a.config_digest() == tiny_ckpt(seed=5).config_digest()
    other = VitConfig(frames=4, height=32, width=32, enc_depth=3, enc_dim=32,
                      enc_heads=2, dec_depth=1, dec_dim=16, dec_heads=2)
    model = VideoViT(other, np.random.default_rng(0), with_decoder=False)
    b = Checkpoint(model.encoder_state(), model.config_dict(), [], {})
    assert a.config_digest() != b.config_digest()


# model loading ---------------------------------------------------------------

def test_model_from_checkpoint_restores_trunk_bitwise():
    ckpt = tiny_ckpt(seed=3)
    model = model_from_checkpoint(ckpt, np.random.default_rng(99))
    for k, v in ckpt.params.items():
        assert np.array_equal(model.params[k].data, v), k


def test_model_from_checkpoint_adds_fresh_heads():
    ckpt = tiny_ckpt(seed=3)
    model = model_from_checkpoint(ckpt, np.random.default_rng(0),
                                  heads={"task": 4})
    assert "head.task.w" in model.params
    assert model.params["head.task.w"].data.shape == (TINY.feat_dim, 4)


def test_model_from_checkpoint_restores_decoder_on_request():
    full = tiny_ckpt(seed=3, with_decoder=True)
    model = model_from_checkpoint(full, np.random.default_rng(0),
                                  with_decoder=True)
    for k, v in full.params.items():
        assert np.array_equal(model.params[k].data, v), k
    slim = model_from_checkpoint(full, np.random.default_rng(0))
    assert not any(k.startswith("dec.") for k in slim.params)


def test_model_from_checkpoint_rejects_unknown_trunk_keys():
    ckpt = tiny_ckpt(seed=3)
    ckpt.params["enc.block9.mlp.w1"] = np.zeros((2, 2), TINY.np_dtype)
    with pytest.raises(CheckpointError, match="unknown trunk"):
        model_from_checkpoint(ckpt, np.random.default_rng(0))


def test_model_from_checkpoint_requires_full_trunk():
    ckpt = tiny_ckpt(seed=3)
    del ckpt.params["embed.w"]
    with pytest.raises(Exception):
        model_from_checkpoint(ckpt, np.random.default_rng(0))


def test_stale_head_keys_are_ignored():
    ckpt = tiny_ckpt(seed=3, heads=("old",))
    model = model_from_checkpoint(ckpt, np.random.default_rng(0),
                                  heads={"new": 4})
    assert "head.new.w" in model.params
    assert "head.old.w" not in model.params
