"""Experiment configuration: YAML in, validated dataclasses out.

Every field has a documented desk-scale default; parsing an empty file
returns the full default experiment. Unknown keys are hard errors naming
the offending path, and `parse_config(dump_config(cfg)) == cfg` holds for
any valid configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import yaml

from ppma.align import AlignConfig
from ppma.evaluate import EvalConfig
from ppma.model import VitConfig
from ppma.pretrain import MaeConfig
from ppma.worldgen import REGIME_NAMES

__all__ = [
    "ConfigError",
    "WorldConfig",
    "Pipeline",
    "SoupJob",
    "AdaptiveJob",
    "ExperimentConfig",
    "parse_config",
    "parse_config_text",
    "dump_config",
    "config_digest",
    "preset",
    "PRESETS",
]


class ConfigError(Exception):
    """Invalid experiment configuration; message names the field path."""


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_clips: int = 1000
    rho: float = 0.8
    noise: float = 0.02
    twinkle: float = 0.04
    removal: str = "exact"
    n_train: int = 400
    n_test: int = 200

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.n_clips < 1 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_clips, n_train and n_test must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not 0.0 <= self.noise <= 0.5:
            raise ValueError("noise must lie in [0, 0.5]")
        if not 0.0 <= self.twinkle <= 0.2:
            raise ValueError("twinkle must lie in [0, 0.2]")
        if self.removal not in ("exact", "residual"):
            raise ValueError("removal must be 'exact' or 'residual'")


@dataclass(frozen=True)
class Pipeline:
    """One pre-training recipe: which data feeds each stage."""

    stage1: str | None = None
    stage2: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stage2", tuple(self.stage2))
        names = ([self.stage1] if self.stage1 is not None else []) + list(self.stage2)
        bad = [n for n in names if n not in REGIME_NAMES]
        if bad:
            raise ValueError(f"stage1/stage2 reference unknown regimes {bad}; "
                             f"known: {sorted(REGIME_NAMES)}")
        if self.stage1 is None and not self.stage2:
            raise ValueError("stage1 and stage2 cannot both be empty")
        if len(set(self.stage2)) != len(self.stage2):
            raise ValueError("stage2 lists a regime twice")


@dataclass(frozen=True)
class SoupJob:
    models: tuple[str, ...] = ()
    alphas: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if len(self.models) < 2 or len(self.models) != len(self.alphas):
            raise ValueError("models needs >= 2 entries with one alpha each")
        if any(a < 0 for a in self.alphas) or abs(sum(self.alphas) - 1.0) > 1e-9:
            raise ValueError("alphas must be non-negative and sum to 1")


@dataclass(frozen=True)
class AdaptiveJob:
    m1: str = ""
    m2: str = ""

    def __post_init__(self):
        if not self.m1 or not self.m2:
            raise ValueError("m1 and m2 must name pipelines")


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    vit: VitConfig = field(default_factory=VitConfig)
    mae: MaeConfig = field(default_factory=MaeConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    pipelines: dict = field(default_factory=lambda: {
        "ppma": Pipeline("no_agent", ("no_agent", "synth"))})
    soups: dict = field(default_factory=dict)
    adaptive: dict = field(default_factory=dict)
    train_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    modes: tuple[str, ...] = ("FT", "LP")
    out: str = "runs/desk"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "modes", tuple(self.modes))
        if not self.pipelines:
            raise ValueError("pipelines must define at least one recipe")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds contains duplicates")
        bad = [m for m in self.modes if m not in ("FT", "LP")]
        if bad or not self.modes:
            raise ValueError(f"modes must be a non-empty subset of FT/LP, got {list(self.modes)}")
        if self.train_seed < 0:
            raise ValueError("train_seed must be non-negative")
        for name, job in self.soups.items():
            missing = [m for m in job.models if m not in self.pipelines]
            if missing:
                raise ValueError(f"soup {name!r} references unknown pipelines {missing}")
            if name in self.pipelines:
                raise ValueError(f"soup {name!r} collides with a pipeline name")
        for name, job in self.adaptive.items():
            missing = [m for m in (job.m1, job.m2) if m not in self.pipelines]
            if missing:
                raise ValueError(f"adaptive {name!r} references unknown pipelines {missing}")


_SECTIONS = {
    "world": WorldConfig,
    "vit": VitConfig,
    "mae": MaeConfig,
    "align": AlignConfig,
    "eval": EvalConfig,
}
_IDENT_ERROR = "names must be non-empty identifiers"


def _typed(val, f: dataclasses.Field, path: str):
    """Check a raw YAML value against the field's default type.

    Catches YAML surprises early — e.g. `1.0e6` parses as a string because
    YAML 1.1 floats need a signed exponent (`1.0e+6`).
    """
    default = f.default
    if default is dataclasses.MISSING:
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
    if default is None:
        if val is not None and not isinstance(val, str):
            raise ConfigError(f"{path}: expected a name or null, got {val!r}")
        return val
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{path}: expected true/false, got {val!r}")
        return val
    if isinstance(default, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{path}: expected an integer, got {val!r}")
        return val
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {val!r} "
                              "(YAML floats need a signed exponent: 1.0e+6)")
        return float(val)
    if isinstance(default, str):
        if not isinstance(val, str):
            raise ConfigError(f"{path}: expected a string, got {val!r}")
        return val
    if isinstance(default, tuple):
        if not isinstance(val, tuple):
            raise ConfigError(f"{path}: expected a list, got {val!r}")
        return val
    return val


def _build(dc_type, data, path: str):
    """Instantiate a config dataclass from a mapping, prefixing error paths."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(dc_type)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {path}.{unknown[0]}")
    kwargs = {}
    for f in dataclasses.fields(dc_type):
        if f.name not in data:
            continue
        val = data[f.name]
        if isinstance(val, list):
            val = tuple(val)
        kwargs[f.name] = _typed(val, f, f"{path}.{f.name}")
    try:
        return dc_type(**kwargs)
    except (ValueError, TypeError) as e:
        msg = str(e)
        first = msg.split(" ", 1)[0].rstrip(",:")
        if first in names:
            raise ConfigError(f"{path}.{msg}") from e
        raise ConfigError(f"{path}: {msg}") from e


def _named_section(data, dc_type, path: str) -> dict:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of names")
    out = {}
    for name, body in data.items():
        if not isinstance(name, str) or not name:
            raise ConfigError(f"{path}: {_IDENT_ERROR}")
        out[name] = _build(dc_type, body, f"{path}.{name}")
    return out


def parse_config_text(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"top level must be a mapping, got {type(raw).__name__}")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    kwargs = {}
    for key, dc_type in _SECTIONS.items():
        if key in raw:
            kwargs[key] = _build(dc_type, raw[key], key)
    if "pipelines" in raw:
        kwargs["pipelines"] = _named_section(raw["pipelines"], Pipeline, "pipelines")
    if "soups" in raw:
        kwargs["soups"] = _named_section(raw["soups"], SoupJob, "soups")
    if "adaptive" in raw:
        kwargs["adaptive"] = _named_section(raw["adaptive"], AdaptiveJob, "adaptive")
    for key in ("train_seed", "seeds", "modes", "out"):
        if key in raw:
            val = raw[key]
            kwargs[key] = tuple(val) if isinstance(val, list) else val
    try:
        return ExperimentConfig(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def parse_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def dump_config(cfg: ExperimentConfig) -> str:
    """Fully-resolved YAML echo; stable key order for byte-level comparison."""
    return yaml.safe_dump(_plain(cfg), sort_keys=True, default_flow_style=False)


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


# Named experiment recipes. "desk" is the full comparison matrix the
# acceptance suite runs: stage ablations, the privacy-preserving recipe
# against its synthetic-only and agent-visible references, the single-source
# alignment decomposition, plus a soup and an adaptive mix over the last two.
PRESETS: dict[str, dict] = {
    "ppma": {
        "pipelines": {"ppma": {"stage1": "no_agent", "stage2": ["no_agent", "synth"]}},
    },
    "align_only": {
        "pipelines": {"align_only": {"stage2": ["agent"]}},
    },
    "desk": {
        "pipelines": {
            "agent_full": {"stage1": "agent", "stage2": ["agent"]},
            "mae_only": {"stage1": "agent"},
            "align_only": {"stage2": ["agent"]},
            "ppma": {"stage1": "no_agent", "stage2": ["no_agent", "synth"]},
            "synth_mae_align": {"stage1": "synth", "stage2": ["synth"]},
            "nh_align_nh": {"stage1": "no_agent", "stage2": ["no_agent"]},
            "nh_align_synth": {"stage1": "no_agent", "stage2": ["synth"]},
        },
        "soups": {
            "nh_soup": {"models": ["nh_align_nh", "nh_align_synth"],
                        "alphas": [0.5, 0.5]},
        },
        "adaptive": {
            "nh_vs_synth": {"m1": "nh_align_nh", "m2": "nh_align_synth"},
        },
    },
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return parse_config_text(yaml.safe_dump(PRESETS[name]))
