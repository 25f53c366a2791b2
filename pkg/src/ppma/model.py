"""Video transformer over spatio-temporal patches.

Clips are cut into non-overlapping (patch_t, patch_h, patch_w) cells flattened
time-major (time block, then row, then column). The encoder is a pre-norm
transformer with fixed interleaved sin/cos position codes, global mean pooling
over tokens (no class token), and one linear head per labelled dataset. A
narrower decoder of the same shape family reconstructs patch pixels during
masked pre-training and is dropped afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from ppma import autodiff as ad
from ppma.autodiff import Tensor

__all__ = [
    "VitConfig",
    "patch_grid",
    "patchify",
    "unpatchify",
    "sinusoidal_posenc",
    "trunc_normal",
    "VideoViT",
]


@dataclass(frozen=True)
class VitConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    patch_t: int = 2
    patch_h: int = 8
    patch_w: int = 8
    enc_depth: int = 4
    enc_dim: int = 64
    enc_heads: int = 4
    dec_depth: int = 2
    dec_dim: int = 32
    dec_heads: int = 2
    mlp_ratio: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.frames % self.patch_t or self.height % self.patch_h or self.width % self.patch_w:
            raise ValueError("patch shape must tile the clip exactly")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("model dim must be divisible by head count")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype: {self.dtype}")

    @property
    def n_tokens(self) -> int:
        nt, nh, nw = patch_grid(self)
        return nt * nh * nw

    @property
    def patch_volume(self) -> int:
        return self.patch_t * self.patch_h * self.patch_w * self.channels

    @property
    def feat_dim(self) -> int:
        """Width of the pooled clip representation heads consume."""
        return 2 * self.enc_dim

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def patch_grid(cfg: VitConfig) -> tuple[int, int, int]:
    return (cfg.frames // cfg.patch_t, cfg.height // cfg.patch_h, cfg.width // cfg.patch_w)


def patchify(video: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """(T, H, W, C) or (B, T, H, W, C) -> (N, V) or (B, N, V), time-major."""
    squeeze = video.ndim == 4
    if squeeze:
        video = video[None]
    b = video.shape[0]
    if video.shape[1:] != (cfg.frames, cfg.height, cfg.width, cfg.channels):
        raise ValueError(f"clip shape {video.shape[1:]} does not match config")
    nt, nh, nw = patch_grid(cfg)
    x = video.reshape(b, nt, cfg.patch_t, nh, cfg.patch_h, nw, cfg.patch_w, cfg.channels)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    out = x.reshape(b, nt * nh * nw, cfg.patch_volume)
    return out[0] if squeeze else out


def unpatchify(patches: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """Inverse of patchify."""
    squeeze = patches.ndim == 2
    if squeeze:
        patches = patches[None]
    b = patches.shape[0]
    nt, nh, nw = patch_grid(cfg)
    if patches.shape[1:] != (nt * nh * nw, cfg.patch_volume):
        raise ValueError(f"patch array shape {patches.shape[1:]} does not match config")
    x = patches.reshape(b, nt, nh, nw, cfg.patch_t, cfg.patch_h, cfg.patch_w, cfg.channels)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6, 7)
    out = x.reshape(b, cfg.frames, cfg.height, cfg.width, cfg.channels)
    return out[0] if squeeze else out


def sinusoidal_posenc(n_positions: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Interleaved sin/cos codes; position 0 is [0, 1, 0, 1, ...]."""
    if dim % 2:
        raise ValueError("position code dim must be even")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    idx = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * idx / dim)
    pe = np.empty((n_positions, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) with draws beyond 2 std resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return np.ascontiguousarray(out, dtype=dtype)


def _block_param_shapes(dim: int, mlp_ratio: int) -> dict[str, tuple]:
    hidden = dim * mlp_ratio
    return {
        "ln1.g": (dim,), "ln1.b": (dim,),
        "attn.wq": (dim, dim), "attn.bq": (dim,),
        "attn.wk": (dim, dim), "attn.bk": (dim,),
        "attn.wv": (dim, dim), "attn.bv": (dim,),
        "attn.wo": (dim, dim), "attn.bo": (dim,),
        "ln2.g": (dim,), "ln2.b": (dim,),
        "mlp.w1": (dim, hidden), "mlp.b1": (hidden,),
        "mlp.w2": (hidden, dim), "mlp.b2": (dim,),
    }


class VideoViT:
    """Encoder/decoder pair plus per-dataset linear heads.

    All learnable state lives in `params`, a flat name -> Tensor dict, so
    weight-space mixing can rebind entries with tape-connected blends. Keys:
    `embed.*` and `enc.*` for the encoder trunk, `dec.*` for the decoder,
    `head.<name>.*` for classification heads.
    """

    INIT_STD = 0.02

    def __init__(self, cfg: VitConfig, rng: np.random.Generator, with_decoder: bool = True):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        dt = cfg.np_dtype
        n = cfg.n_tokens
        self.posenc = sinusoidal_posenc(n, cfg.enc_dim, dt)
        self.dec_posenc = sinusoidal_posenc(n, cfg.dec_dim, dt)
        self._add("embed.w", trunc_normal(rng, (cfg.patch_volume, cfg.enc_dim), self.INIT_STD, dt))
        self._add("embed.b", np.zeros(cfg.enc_dim, dtype=dt))
        for i in range(cfg.enc_depth):
            self._add_block(f"enc.block{i}", cfg.enc_dim, cfg.mlp_ratio, rng, dt)
        self._add("enc.ln.g", np.ones(cfg.enc_dim, dtype=dt))
        self._add("enc.ln.b", np.zeros(cfg.enc_dim, dtype=dt))
        if with_decoder:
            self._add("dec.mask_token", trunc_normal(rng, (1, 1, cfg.dec_dim), self.INIT_STD, dt))
            self._add("dec.embed.w", trunc_normal(rng, (cfg.enc_dim, cfg.dec_dim), self.INIT_STD, dt))
            self._add("dec.embed.b", np.zeros(cfg.dec_dim, dtype=dt))
            for i in range(cfg.dec_depth):
                self._add_block(f"dec.block{i}", cfg.dec_dim, cfg.mlp_ratio, rng, dt)
            self._add("dec.ln.g", np.ones(cfg.dec_dim, dtype=dt))
            self._add("dec.ln.b", np.zeros(cfg.dec_dim, dtype=dt))
            self._add("dec.pred.w", trunc_normal(rng, (cfg.dec_dim, cfg.patch_volume), self.INIT_STD, dt))
            self._add("dec.pred.b", np.zeros(cfg.patch_volume, dtype=dt))

    def _add(self, name: str, data: np.ndarray):
        self.params[name] = Tensor(data, requires_grad=True)

    def _add_block(self, prefix: str, dim: int, mlp_ratio: int, rng, dt):
        for suffix, shape in _block_param_shapes(dim, mlp_ratio).items():
            name = f"{prefix}.{suffix}"
            if suffix.endswith(".g"):
                self._add(name, np.ones(shape, dtype=dt))
            elif "." in suffix and suffix.split(".")[-1].startswith("b"):
                self._add(name, np.zeros(shape, dtype=dt))
            else:
                self._add(name, trunc_normal(rng, shape, self.INIT_STD, dt))

    # parameter bookkeeping

    def add_head(self, name: str, n_classes: int, rng: np.random.Generator):
        if f"head.{name}.w" in self.params:
            raise ValueError(f"head {name!r} already exists; re-adding would discard it")
        dt = self.cfg.np_dtype
        self._add(f"head.{name}.w", trunc_normal(rng, (self.cfg.feat_dim, n_classes), self.INIT_STD, dt))
        self._add(f"head.{name}.b", np.zeros(n_classes, dtype=dt))

    def head_names(self) -> list[str]:
        return sorted({k.split(".")[1] for k in self.params if k.startswith("head.")})

    def param_items(self, prefix: Optional[str] = None) -> list[tuple[str, Tensor]]:
        keys = sorted(self.params)
        if prefix is not None:
            keys = [k for k in keys if k.startswith(prefix)]
        return [(k, self.params[k]) for k in keys]

    def param_list(self, prefix: Optional[str] = None) -> list[Tensor]:
        return [t for _, t in self.param_items(prefix)]

    def no_decay_list(self, prefix: Optional[str] = None) -> list[Tensor]:
        """Biases, norm affines, and the mask token are exempt from decay."""
        out = []
        for k, t in self.param_items(prefix):
            leaf = k.split(".")[-1]
            if leaf.startswith("b") or leaf == "g" or leaf == "mask_token":
                out.append(t)
        return out

    def encoder_state(self) -> dict[str, np.ndarray]:
        return {
            k: t.data.copy()
            for k, t in self.param_items()
            if k.startswith("embed.") or k.startswith("enc.")
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.param_items()}

    def load_state(self, state: dict[str, np.ndarray], strict_prefixes: tuple[str, ...] = ()):
        """Copy arrays into matching params; `strict_prefixes` must be fully covered."""
        for k, arr in state.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter in state: {k}")
            if self.params[k].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {k}: {self.params[k].data.shape} vs {arr.shape}")
            # astype always copies: optimizers update in place and must never
            # write through to the caller's arrays (checkpoints stay pristine)
            self.params[k].data = np.asarray(arr).astype(self.cfg.np_dtype)
        for prefix in strict_prefixes:
            missing = [k for k in self.params if k.startswith(prefix) and k not in state]
            if missing:
                raise KeyError(f"state missing {len(missing)} params under {prefix}: {missing[:3]}")

    # forward passes

    def _attention(self, p: dict[str, Tensor], prefix: str, x: Tensor, dim: int, heads: int) -> Tensor:
        b, n, _ = x.shape
        dh = dim // heads
        q = ad.linear(x, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"])
        k = ad.linear(x, p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.bk"])
        v = ad.linear(x, p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"])
        q = ad.transpose(ad.reshape(q, (b, n, heads, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (b, n, heads, dh)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (b, n, heads, dh)), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = ad.softmax(scores)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, dim))
        return ad.linear(ctx, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"])

    def _block(self, p: dict[str, Tensor], prefix: str, x: Tensor, dim: int, heads: int) -> Tensor:
        h = ad.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        x = ad.add(x, self._attention(p, prefix, h, dim, heads))
        h = ad.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        h = ad.linear(h, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"])
        h = ad.gelu(h)
        h = ad.linear(h, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
        return ad.add(x, h)

    def encoder_forward(
        self,
        patches: Tensor,
        positions: Optional[np.ndarray] = None,
        params: Optional[dict[str, Tensor]] = None,
    ) -> Tensor:
        """Embed patch rows, add position codes, run the trunk.

        `patches` is (B, K, patch_volume); `positions` gives each row's token
        index (B, K) and defaults to the full grid in order. Pass `params` to
        run the same architecture over substituted tensors (weight mixing).
        """
        p = self.params if params is None else params
        cfg = self.cfg
        b, k_count, _ = patches.shape
        x = ad.linear(patches, p["embed.w"], p["embed.b"])
        if positions is None:
            pe = self.posenc[None, :, :]
            if k_count != cfg.n_tokens:
                raise ValueError("full grid expected when positions omitted")
        else:
            pe = self.posenc[positions]
        x = ad.add(x, Tensor(np.ascontiguousarray(pe, dtype=cfg.np_dtype)))
        for i in range(cfg.enc_depth):
            x = self._block(p, f"enc.block{i}", x, cfg.enc_dim, cfg.enc_heads)
        return ad.layer_norm(x, p["enc.ln.g"], p["enc.ln.b"])

    def pool(self, latents: Tensor) -> Tensor:
        """Global token pooling: (B, K, D) -> (B, 2D), mean beside max.

        The mean channel summarizes scene context; the max channel keeps
        localized sprite-motion evidence that averaging over mostly-static
        tokens would wash out.
        """
        return ad.concat([ad.tmean(latents, axis=1), ad.tmax(latents, axis=1)], axis=-1)

    def head_forward(self, name: str, feats: Tensor, params: Optional[dict[str, Tensor]] = None) -> Tensor:
        p = self.params if params is None else params
        key_w, key_b = f"head.{name}.w", f"head.{name}.b"
        if key_w not in p:
            raise KeyError(f"no head registered under {name!r}")
        return ad.linear(feats, p[key_w], p[key_b])

    def classify(self, patches: Tensor, head: str, params: Optional[dict[str, Tensor]] = None) -> Tensor:
        latents = self.encoder_forward(patches, None, params)
        return self.head_forward(head, self.pool(latents), params)

    def decoder_forward(self, latents: Tensor, ids_restore: np.ndarray) -> Tensor:
        """Project latents down, splice in mask tokens, predict all patches.

        `latents` is (B, n_vis, enc_dim) in shuffled order; `ids_restore`
        (B, N) maps grid position -> row in [visible tokens, mask tokens].
        Returns (B, N, patch_volume) in grid order.
        """
        p = self.params
        cfg = self.cfg
        b, n_vis, _ = latents.shape
        n = cfg.n_tokens
        x = ad.linear(latents, p["dec.embed.w"], p["dec.embed.b"])
        mask = ad.broadcast_to(p["dec.mask_token"], (b, n - n_vis, cfg.dec_dim))
        x = ad.concat([x, mask], axis=1)
        x = ad.gather_rows(x, ids_restore)
        pe = np.broadcast_to(self.dec_posenc[None, :, :], (b, n, cfg.dec_dim))
        x = ad.add(x, Tensor(np.ascontiguousarray(pe)))
        for i in range(cfg.dec_depth):
            x = self._block(p, f"dec.block{i}", x, cfg.dec_dim, cfg.dec_heads)
        x = ad.layer_norm(x, p["dec.ln.g"], p["dec.ln.b"])
        return ad.linear(x, p["dec.pred.w"], p["dec.pred.b"])

    def drop_decoder(self):
        for k in [k for k in self.params if k.startswith("dec.")]:
            del self.params[k]

    def config_dict(self) -> dict:
        return asdict(self.cfg)
