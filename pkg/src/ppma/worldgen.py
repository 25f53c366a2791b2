"""Procedural toy-video worlds with controllable scene-object bias.

Each clip is a background plate (class-conditioned texture plus seeded noise,
optionally flickering frame to frame) with one solid moving sprite composited
on top. A bias knob rho ties the background class to the motion class: rho=1
makes context fully predictive of the action, rho=0 decorrelates them.
Ground-truth sprite masks support exact or residual agent removal, the
stand-in for segmentation-plus-inpainting.

Every clip is a pure function of (spec, clip_id): per-clip generators are
seeded with the tuple (spec.seed, spec.stream, clip_id), so generation order
and parallelism never change pixels. Pixels are quantized to the uint8 grid
at creation, making serialization round trips bit-exact.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import struct
from dataclasses import dataclass, replace, asdict
from typing import Optional

import numpy as np
from scipy.stats import chi2_contingency

from ppma import autodiff as ad
from ppma.optim import AdamW

__all__ = [
    "WorldSpec",
    "VideoSample",
    "DownstreamTask",
    "MOTION_SETS",
    "gen_dataset",
    "remove_agent",
    "make_regimes",
    "make_tasks",
    "bias_probe",
    "label_independence_p",
    "clips_array",
    "labels_onehot",
    "spec_digest",
    "write_dataset",
    "read_dataset",
    "REGIME_NAMES",
]

# motion vocabularies: name -> list of program identifiers
MOTION_SETS = {
    "pretrain": [
        "translate_right", "translate_left", "translate_up", "translate_down",
        "orbit_cw90", "zigzag", "h_osc", "grow_shrink",
    ],
    # held-out vocabulary for downstream tasks: four diagonal translations.
    # Opposite directions share a time-averaged footprint (NE/SW one smear,
    # NW/SE the other), so static context alone resolves at most the axis,
    # while the signed frame-to-frame difference identifies the class.
    "shift": ["shift_ne", "shift_nw", "shift_se", "shift_sw"],
    # four orbital motions whose time-averaged footprints are identical
    # rings; kept for probes that need a statically unsolvable vocabulary
    "orbit": ["orbit_cw45", "orbit_ccw45", "orbit_cw135", "orbit_ccw135"],
}

# pre-training corpora produced by make_regimes, in return order
REGIME_NAMES = ("agent", "no_agent", "synth")

_BACKGROUND_STYLES = ("textured", "flat", "shared")
_RESIDUAL_RATE = 0.037
_RESIDUAL_ALPHA = 0.15
_SHAPES = ("square", "disc", "diamond", "cross")


@dataclass(frozen=True)
class WorldSpec:
    """Full description of one procedural world; hashable and serializable."""

    n_motion: int = 8
    n_textures: int = 8
    rho: float = 0.0
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    sprite_min: float = 5.0
    sprite_max: float = 8.0
    noise: float = 0.02
    twinkle: float = 0.0
    seed: int = 0
    stream: int = 0
    motion_set: str = "pretrain"
    background_style: str = "textured"
    texture_family: int = 0
    sprite_on: bool = True

    def __post_init__(self):
        if self.n_motion < 2 or self.n_textures < 2:
            raise ValueError("need at least 2 motion classes and 2 textures")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.motion_set not in MOTION_SETS:
            raise ValueError(f"unknown motion set: {self.motion_set}")
        if self.n_motion > len(MOTION_SETS[self.motion_set]):
            raise ValueError("n_motion exceeds the chosen motion vocabulary")
        if self.background_style not in _BACKGROUND_STYLES:
            raise ValueError(f"unknown background style: {self.background_style}")
        if self.channels != 3:
            raise ValueError("worlds render RGB clips only")
        if self.seed < 0 or self.stream < 0:
            raise ValueError("seed and stream must be non-negative")
        if not 3.0 <= self.sprite_min <= self.sprite_max <= 10.0:
            raise ValueError("sprite size range must satisfy 3 <= min <= max <= 10")
        if not 0.0 <= self.twinkle <= 0.2:
            raise ValueError("twinkle must lie in [0, 0.2]")


@dataclass
class VideoSample:
    clip: np.ndarray                 # (T, H, W, C) float32 in [0, 1]
    motion_label: int
    background_label: int
    mask: np.ndarray                 # (T, H, W) bool, true where sprite drawn
    clip_id: int
    background: Optional[np.ndarray] = None   # (T, H, W, C) clean frames, float32


@dataclass
class DownstreamTask:
    name: str
    train: list
    test: list
    n_classes: int
    bias_level: str
    rho: float

    def __post_init__(self):
        train_ids = {s.clip_id for s in self.train}
        test_ids = {s.clip_id for s in self.test}
        if train_ids & test_ids:
            raise ValueError(f"task {self.name}: train/test share clip ids")
        for s in list(self.train) + list(self.test):
            if not 0 <= s.motion_label < self.n_classes:
                raise ValueError(f"task {self.name}: label out of range")


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap [0,1] floats to the uint8 grid so files round-trip bitwise."""
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0)
    return (q / 255.0).astype(np.float32)


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def _render_texture(spec: WorldSpec, bg_class: int, rng: np.random.Generator) -> np.ndarray:
    """Class-conditioned deterministic pattern plus per-clip phase jitter."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    fam = spec.texture_family
    scale = (1.0, 1.6, 0.7, 2.2)[fam % 4]
    freq = (2.0 + (bg_class % 4)) * scale * (1.0 + 0.1 * (rng.random() - 0.5))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    kind = bg_class % 8
    if kind == 0:
        p = 0.5 + 0.5 * np.sin(2 * np.pi * freq * yy / h + phase)
    elif kind == 1:
        p = 0.5 + 0.5 * np.sin(2 * np.pi * freq * xx / w + phase)
    elif kind == 2:
        p = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx + yy) / (h + w) + phase)
    elif kind == 3:
        shift = rng.uniform(0, w)
        cell = max(2, int(round(w / (freq + 1))))
        p = ((np.floor((xx + shift) / cell) + np.floor((yy + shift) / cell)) % 2)
    elif kind == 4:
        cy, cx = rng.uniform(0.3 * h, 0.7 * h), rng.uniform(0.3 * w, 0.7 * w)
        r = np.hypot(yy - cy, xx - cx)
        p = 0.5 + 0.5 * np.sin(2 * np.pi * freq * r / h + phase)
    elif kind == 5:
        p = ((np.sin(2 * np.pi * freq * xx / w + phase)
              * np.sin(2 * np.pi * freq * yy / h + phase)) > 0.3).astype(np.float64)
    elif kind == 6:
        off = rng.random()
        p = ((xx / w + 0.35 * yy / h + off) % 1.0)
    else:
        cy, cx = rng.uniform(0.3 * h, 0.7 * h), rng.uniform(0.3 * w, 0.7 * w)
        r = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        p = 0.5 + 0.5 * np.sin(2 * np.pi * freq * r / h + phase)
    # hue intervals of neighboring classes overlap, so color alone cannot
    # identify a texture class — the spatial pattern has to be read
    spacing = 1.0 / max(spec.n_textures, 2)
    hue0 = (bg_class * spacing + fam / 16.0 + spacing * rng.uniform(-1.0, 1.0)) % 1.0
    c0 = _hsv(hue0, 0.55, 0.75)
    c1 = _hsv(hue0 + 0.5, 0.55, 0.35)
    return c0[None, None, :] + p[:, :, None] * (c1 - c0)[None, None, :]


def _render_background(spec: WorldSpec, bg_class: int, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.background_style == "textured":
        img = _render_texture(spec, bg_class, rng)
    elif spec.background_style == "flat":
        base = _hsv(bg_class / max(spec.n_textures, 1), 0.3, 0.55)
        img = np.broadcast_to(base, (h, w, 3)).copy()
        img += rng.uniform(-0.03, 0.03, size=3)[None, None, :]
    else:  # one background common to every clip and class
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        p = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + 0.4 * yy) / w)
        c0, c1 = _hsv(0.58, 0.25, 0.65), _hsv(0.08, 0.25, 0.45)
        img = c0[None, None, :] + p[:, :, None] * (c1 - c0)[None, None, :]
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _shape_mask(shape: str, h: int, w: int, cy: float, cx: float, size: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    half = size / 2.0
    if shape == "square":
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if shape == "disc":
        return dy * dy + dx * dx <= half * half
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= size * 0.6
    bar = size / 6.0
    return ((np.abs(dy) <= bar) & (np.abs(dx) <= half)) | (
        (np.abs(dx) <= bar) & (np.abs(dy) <= half)
    )


def _relative_path(program: str, t: np.ndarray, rng: np.random.Generator):
    """Per-frame sprite offsets from an unplaced origin, plus size scaling."""
    n = t.size
    scales = np.ones(n)
    if program.startswith("translate"):
        v = rng.uniform(1.8, 2.8)
        axis = program.rsplit("_", 1)[1]
        step = {"right": (0, v), "left": (0, -v), "up": (-v, 0), "down": (v, 0)}[axis]
        dy, dx = step[0] * t, step[1] * t
    elif program.startswith("shift"):
        # diagonal march; per-axis speed low enough that the span plus the
        # sprite margin fits a 32-pixel frame over eight frames
        vy = rng.uniform(1.3, 2.0)
        vx = rng.uniform(1.3, 2.0)
        sy, sx = {"ne": (-1, 1), "nw": (-1, -1), "se": (1, 1), "sw": (1, -1)}[
            program.rsplit("_", 1)[1]]
        dy, dx = sy * vy * t, sx * vx * t
    elif program.startswith("orbit"):
        dtheta = {"orbit_cw90": 90.0, "orbit_cw45": 45.0, "orbit_ccw45": -45.0,
                  "orbit_cw135": 135.0, "orbit_ccw135": -135.0}[program]
        r = rng.uniform(6.5, 8.5)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        ang = phi + np.deg2rad(dtheta) * t
        dy, dx = r * np.sin(ang), r * np.cos(ang)
    elif program == "zigzag":
        vx = rng.uniform(1.8, 2.8)
        vy = rng.uniform(1.5, 2.5)
        sign = np.where((t.astype(int) // 2) % 2 == 0, 1.0, -1.0)
        dy = np.concatenate([[0.0], np.cumsum(vy * sign[:-1])])
        dx = vx * t
    elif program == "h_osc":
        amp = rng.uniform(4.0, 7.0)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        dy = np.zeros(n)
        dx = amp * np.sin(2.0 * np.pi * t / n + phi)
    elif program == "grow_shrink":
        dy = np.zeros(n)
        dx = np.zeros(n)
        scales = 0.6 + 0.8 * np.sin(np.pi * t / max(n - 1, 1))
    else:
        raise ValueError(f"unknown motion program: {program}")
    return dy, dx, scales


def _place_path(dy, dx, margin_y, margin_x, h, w, rng):
    """Shift a relative path so the sprite stays inside the frame."""
    lo_y = margin_y - dy.min()
    hi_y = (h - 1 - margin_y) - dy.max()
    lo_x = margin_x - dx.min()
    hi_x = (w - 1 - margin_x) - dx.max()
    if hi_y < lo_y or hi_x < lo_x:
        raise ValueError("motion path does not fit the frame")
    return dy + rng.uniform(lo_y, hi_y), dx + rng.uniform(lo_x, hi_x)


def _make_clip(spec: WorldSpec, clip_id: int) -> VideoSample:
    rng = np.random.default_rng([spec.seed, spec.stream, clip_id])
    motion = int(rng.integers(spec.n_motion))
    if spec.background_style == "shared":
        bg_class = 0
    elif rng.random() < spec.rho:
        bg_class = motion % spec.n_textures
    else:
        bg_class = int(rng.integers(spec.n_textures))
    bg = _render_background(spec, bg_class, rng)
    t_dim, h, w = spec.frames, spec.height, spec.width
    bg_frames = np.broadcast_to(bg, (t_dim, h, w, 3)).copy()
    if spec.twinkle > 0:
        # per-frame luminance flicker: frame differences carry background
        # shimmer everywhere, so motion reading must beat a noise floor
        # instead of a silent background
        flicker = rng.normal(0.0, spec.twinkle, size=(t_dim, h, w, 1))
        bg_frames = np.clip(bg_frames + flicker, 0.0, 1.0)
    clip = bg_frames.copy()
    mask = np.zeros((t_dim, h, w), dtype=bool)
    if spec.sprite_on:
        shape = _SHAPES[int(rng.integers(len(_SHAPES)))]
        size = rng.uniform(spec.sprite_min, spec.sprite_max)
        # sprites are uniformly brighter than their background: consistent
        # polarity keeps signed temporal differences class-informative
        # (random polarity would make opposite motions linearly confusable)
        floor = min(bg.mean() + 0.25, 0.92)
        color = floor + (1.0 - floor) * rng.uniform(0.0, 1.0, size=3)
        t = np.arange(t_dim, dtype=np.float64)
        program = MOTION_SETS[spec.motion_set][motion]
        dy, dx, scales = _relative_path(program, t, rng)
        margin = size * scales.max() / 2.0 + 1.0
        cy, cx = _place_path(dy, dx, margin, margin, h, w, rng)
        for i in range(t_dim):
            m = _shape_mask(shape, h, w, cy[i], cx[i], size * scales[i])
            clip[i][m] = color
            mask[i] = m
    clip_q = _quantize(clip)
    return VideoSample(
        clip=clip_q,
        motion_label=motion,
        background_label=bg_class,
        mask=mask,
        clip_id=clip_id,
        background=_quantize(bg_frames),
    )


def gen_dataset(spec: WorldSpec, n: int, start_id: int = 0) -> list:
    """n procedurally generated clips with ids [start_id, start_id + n)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return [_make_clip(spec, start_id + i) for i in range(n)]


def remove_agent(sample: VideoSample, mode: str, rng: Optional[np.random.Generator] = None) -> VideoSample:
    """Replace sprite pixels with the clean background plate.

    exact: perfect removal (ground-truth inpainting). residual: a small
    fraction of clips keeps a faint low-alpha silhouette, modeling imperfect
    removal. Labels are preserved; the output mask is cleared.
    """
    if mode not in ("exact", "residual"):
        raise ValueError(f"unknown removal mode: {mode}")
    if sample.mask is None or sample.background is None:
        raise ValueError("sample lacks its mask or clean background plate")
    bg_clip = np.broadcast_to(sample.background, sample.clip.shape)
    m = sample.mask[:, :, :, None]
    out = np.where(m, bg_clip, sample.clip)
    if mode == "residual":
        if rng is None:
            raise ValueError("residual mode needs an rng for the survival draw")
        if rng.random() < _RESIDUAL_RATE:
            faint = bg_clip + _RESIDUAL_ALPHA * (sample.clip.astype(np.float64) - bg_clip)
            out = np.where(m, _quantize(faint), sample.clip)
    return VideoSample(
        clip=np.ascontiguousarray(out, dtype=np.float32),
        motion_label=sample.motion_label,
        background_label=sample.background_label,
        mask=np.zeros_like(sample.mask),
        clip_id=sample.clip_id,
        background=sample.background,
    )


def make_regimes(spec: WorldSpec, n: int, removal_mode: str = "exact"):
    """The three pre-training corpora: agent-visible, agent-removed, synthetic.

    The first two share clips (removal applied per clip); the synthetic world
    re-rolls fresh clips with decorrelated labels over flat backgrounds, so
    it carries motion signal but almost no context signal.
    """
    agent_spec = replace(spec, stream=spec.stream + 1)
    agent_world = gen_dataset(agent_spec, n, start_id=0)
    no_agent_world = []
    for s in agent_world:
        rng = np.random.default_rng([spec.seed, spec.stream + 9, s.clip_id])
        no_agent_world.append(remove_agent(s, removal_mode, rng))
    synth_spec = replace(
        spec,
        rho=0.0,
        background_style="flat",
        stream=spec.stream + 2,
        noise=min(spec.noise, 0.01),
        twinkle=0.0,
    )
    synth_world = gen_dataset(synth_spec, n, start_id=n)
    return agent_world, no_agent_world, synth_world


_TASK_LEVELS = (
    ("high_bias", 0.9, "textured", 1, "high"),
    ("mid_bias", 0.5, "textured", 2, "mid"),
    ("low_bias", 0.0, "shared", 3, "low"),
)
_TASK_ID_BASE = 1_000_000
_TASK_ID_STRIDE = 10_000


def make_tasks(
    seed: int,
    n_train: int = 400,
    n_test: int = 200,
    frames: int = 8,
    height: int = 32,
    width: int = 32,
    twinkle: float = 0.04,
) -> list:
    """Downstream ladder: high / mid / low scene-object bias, 4-way each.

    All three share a held-out diagonal-shift vocabulary; they differ in how
    strongly the background predicts the label and in texture family, so the
    high task is mostly solvable from context alone while the low task needs
    motion (statically, opposite shift directions are indistinguishable).
    Backgrounds flicker frame to frame (``twinkle``) like the natural worlds,
    so motion reading has to reject shimmer rather than ride a silent scene.
    """
    tasks = []
    for i, (name, rho, style, family, level) in enumerate(_TASK_LEVELS):
        spec = WorldSpec(
            n_motion=4,
            n_textures=4,
            rho=rho,
            frames=frames,
            height=height,
            width=width,
            seed=seed,
            stream=20 + i,
            motion_set="shift",
            background_style=style,
            texture_family=family,
            twinkle=twinkle,
        )
        base = _TASK_ID_BASE + i * _TASK_ID_STRIDE
        train = gen_dataset(spec, n_train, start_id=base)
        test = gen_dataset(spec, n_test, start_id=base + n_train)
        tasks.append(DownstreamTask(name, train, test, 4, level, rho))
    return tasks


def clips_array(samples) -> np.ndarray:
    """(B, T, H, W, C) float32 stack of sample pixels."""
    return np.stack([s.clip for s in samples]).astype(np.float32)


def labels_onehot(samples, n_classes: int) -> np.ndarray:
    labels = np.array([s.motion_label for s in samples])
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label outside [0, n_classes)")
    return np.eye(n_classes, dtype=np.float64)[labels]


def bias_probe(task: DownstreamTask, steps: int = 300, lr: float = 0.1) -> float:
    """Test top-1 of a linear classifier on time-averaged frames.

    Averaging over time destroys motion while preserving the static scene, so
    the score measures how much of the task is solvable from context alone.
    Deterministic: zero-initialized logistic regression, full-batch updates.
    """
    if not task.train or not task.test:
        raise ValueError("probe needs non-empty train and test splits")

    def feats(samples):
        x = np.stack([s.clip.mean(axis=0).reshape(-1) for s in samples])
        return x.astype(np.float64)

    x_train, x_test = feats(task.train), feats(task.test)
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0) + 1e-6
    x_train = (x_train - mu) / sd
    x_test = (x_test - mu) / sd
    y = labels_onehot(task.train, task.n_classes)
    w = ad.Tensor(np.zeros((x_train.shape[1], task.n_classes)), requires_grad=True)
    b = ad.Tensor(np.zeros(task.n_classes), requires_grad=True)
    opt = AdamW([w, b], lr=lr, weight_decay=1e-4, no_decay=[b])
    xt = ad.Tensor(x_train)
    for _ in range(steps):
        opt.zero_grad()
        loss = ad.softmax_cross_entropy(ad.add(ad.matmul(xt, w), b), y)
        ad.backward(loss)
        opt.step()
    logits = x_test @ w.data + b.data
    pred = np.argmax(logits, axis=1)
    truth = np.array([s.motion_label for s in task.test])
    return float(np.mean(pred == truth))


def label_independence_p(samples, n_motion: int, n_textures: int) -> float:
    """Chi-squared p-value for independence of motion and background labels."""
    table = np.zeros((n_motion, n_textures), dtype=np.int64)
    for s in samples:
        table[s.motion_label, s.background_label] += 1
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    if table.shape[0] < 2 or table.shape[1] < 2:
        raise ValueError("contingency table is degenerate; independence undefined")
    return float(chi2_contingency(table).pvalue)


# flat binary container ------------------------------------------------------

_MAGIC = b"PPMA"
_VERSION = 1


def spec_digest(spec: WorldSpec) -> bytes:
    payload = json.dumps(asdict(spec), sort_keys=True).encode()
    return hashlib.sha256(payload).digest()


def _rle_encode(mask: np.ndarray) -> np.ndarray:
    flat = mask.reshape(-1).astype(np.uint8)
    if flat.size == 0 or not flat.any():
        return np.zeros((0, 2), dtype=np.uint32)
    edges = np.flatnonzero(np.diff(flat))
    starts = np.concatenate([[0], edges + 1])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    keep = flat[starts] == 1
    return np.stack([starts[keep], lengths[keep]], axis=1).astype(np.uint32)


def _rle_decode(runs: np.ndarray, size: int) -> np.ndarray:
    flat = np.zeros(size, dtype=bool)
    for start, length in runs:
        flat[start:start + length] = True
    return flat


def write_dataset(path, samples, spec: WorldSpec) -> None:
    """Flat deterministic layout: header, then fixed-order clip records."""
    digest = spec_digest(spec)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HHI", _VERSION, 0, len(samples)))
        f.write(digest)
        for s in samples:
            t, h, w, c = s.clip.shape
            pixels = np.round(s.clip * 255.0).astype(np.uint8).tobytes()
            runs = _rle_encode(s.mask)
            f.write(struct.pack("<qiiHHHH", s.clip_id, s.motion_label,
                                s.background_label, t, h, w, c))
            f.write(pixels)
            f.write(struct.pack("<I", runs.shape[0]))
            f.write(runs.tobytes())


def read_dataset(path, expected_spec: Optional[WorldSpec] = None):
    """Returns (samples, digest); verifies the digest when a spec is given.

    Loaded samples carry no clean background plate: exact agent removal is
    only possible in the same process that generated the clips.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ValueError("not a clip container (bad magic)")
    version, _, n = struct.unpack_from("<HHI", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported container version {version}")
    digest = blob[12:44]
    if expected_spec is not None and digest != spec_digest(expected_spec):
        raise ValueError("container was generated from a different world spec")
    off = 44
    samples = []
    for _ in range(n):
        clip_id, motion, bg_class, t, h, w, c = struct.unpack_from("<qiiHHHH", blob, off)
        off += struct.calcsize("<qiiHHHH")
        count = t * h * w * c
        pixels = np.frombuffer(blob, dtype=np.uint8, count=count, offset=off)
        off += count
        (n_runs,) = struct.unpack_from("<I", blob, off)
        off += 4
        runs = np.frombuffer(blob, dtype=np.uint32, count=n_runs * 2, offset=off).reshape(-1, 2)
        off += n_runs * 8
        clip = (pixels.reshape(t, h, w, c).astype(np.float32)) / 255.0
        mask = _rle_decode(runs, t * h * w).reshape(t, h, w)
        samples.append(VideoSample(clip, motion, bg_class, mask, clip_id, None))
    if off != len(blob):
        raise ValueError("trailing bytes after final record; file corrupt")
    return samples, digest
