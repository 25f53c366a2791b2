"""Checkpoint persistence: named tensors + config digest + stage provenance.

Binary layout: magic, version, manifest length, JSON manifest (architecture
config, provenance list, metadata, tensor table), raw tensor bytes in table
order, then a sha256 trailer over everything before it. Loads verify the
trailer before touching any tensor, so truncated or corrupt files never
produce a partial model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ppma.model import VideoViT, VitConfig

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "model_from_checkpoint"]

_MAGIC = b"PPCK"
_VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64}


class CheckpointError(Exception):
    """Unreadable, corrupt, or mismatched checkpoint file."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    vit: dict
    provenance: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def config_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.vit, sort_keys=True).encode()).hexdigest()

    def with_stage(self, stage: str) -> "Checkpoint":
        """Copy with one provenance entry appended (history is append-only)."""
        return Checkpoint(
            params={k: v.copy() for k, v in self.params.items()},
            vit=dict(self.vit),
            provenance=list(self.provenance) + [stage],
            meta=dict(self.meta),
        )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = sorted(ckpt.params)
    table = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name])
        table.append({
            "name": name,
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    manifest = json.dumps({
        "vit": ckpt.vit,
        "config_digest": ckpt.config_digest(),
        "provenance": ckpt.provenance,
        "meta": ckpt.meta,
        "tensors": table,
    }, sort_keys=True).encode()
    body = bytearray()
    body += _MAGIC
    body += struct.pack("<HHI", _VERSION, 0, len(manifest))
    body += manifest
    for name in names:
        body += np.ascontiguousarray(ckpt.params[name]).tobytes()
    digest = hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as f:
        f.write(bytes(body))
        f.write(digest)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if len(blob) < 44 or blob[:4] != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, trailer = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError("digest mismatch: file is corrupt or truncated")
    version, _, manifest_len = struct.unpack_from("<HHI", body, 4)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 12
    manifest = json.loads(body[start:start + manifest_len].decode())
    data_start = start + manifest_len
    params = {}
    for entry in manifest["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"unsupported tensor dtype {entry['dtype']}")
        lo = data_start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(body):
            raise CheckpointError("tensor table points past end of file")
        arr = np.frombuffer(body[lo:hi], dtype=dtype).reshape(entry["shape"]).copy()
        params[entry["name"]] = arr
    ckpt = Checkpoint(params, manifest["vit"], manifest["provenance"], manifest["meta"])
    if ckpt.config_digest() != manifest["config_digest"]:
        raise CheckpointError("config digest mismatch inside manifest")
    return ckpt


def model_from_checkpoint(
    ckpt: Checkpoint,
    rng: np.random.Generator,
    heads: dict[str, int] | None = None,
    with_decoder: bool = False,
) -> VideoViT:
    """Instantiate the architecture and load stored parameters.

    Missing groups (fresh heads, a decoder the checkpoint dropped) keep their
    rng initialization; stored encoder weights must cover the trunk fully.
    """
    cfg = VitConfig(**ckpt.vit)
    model = VideoViT(cfg, rng, with_decoder=with_decoder)
    for name, n_classes in (heads or {}).items():
        model.add_head(name, n_classes, rng)
    state = {k: v for k, v in ckpt.params.items() if k in model.params}
    unknown = set(ckpt.params) - set(model.params)
    trunk_unknown = {k for k in unknown if k.startswith(("embed.", "enc."))}
    if trunk_unknown:
        raise CheckpointError(f"checkpoint has unknown trunk params: {sorted(trunk_unknown)[:3]}")
    model.load_state(state, strict_prefixes=("embed.", "enc."))
    return model
