"""
Run configuration: flat ``key = value`` files mapped onto typed dataclasses.

Keys are ``section.field`` (``reward.d1 = 7``, ``noise.sigma_position = 1``)
or top-level (``seed``, ``layout``, ``profile``). ``layout.kind`` is accepted
as an alias of ``layout``; any other ``layout.<name>`` key sets the junction
geometry (``layout.box_width = 24``) and is stored under ``geometry``.
"""

from __future__ import annotations

import json
import logging
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Optional, Union

from .errors import ConfigError
from .rl_agent import AgentConfig
from .safety_shield import ShieldConfig
from .state_encoder import RoiSpec
from .supervised import ModelConfig
from .world_sim import LAYOUTS, NoiseConfig, RewardParams

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "1.0"
VARIANT_NAMES = ("rule-based", "rl", "belief-update", "collision-detector", "srl")


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 200
    workers: int = 4
    variant: str = "srl"
    noisy_collision_pct: float = 2.0


@dataclass(frozen=True)
class GeometryConfig:
    """Junction dimensions (m); None keeps the layout's own value."""
    box_width: Optional[float] = None
    box_height: Optional[float] = None
    lane_offset: Optional[float] = None
    approach_length: Optional[float] = None
    exit_length: Optional[float] = None
    crosswalk_offset: Optional[float] = None
    crosswalk_width: Optional[float] = None
    crosswalk_half_span: Optional[float] = None

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None and value <= 0:
                raise ValueError(f"{f.name} must be positive, got {value}")

    def overrides(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}


@dataclass(frozen=True)
class SelfcheckConfig:
    gradient_nets: int = 100
    per_draws: int = 100_000
    shield_scenes: int = 10_000
    encoder_transforms: int = 10_000
    determinism_episodes: int = 2


@dataclass(frozen=True)
class Config:
    seed: int = 0
    layout: str = "four-way"
    profile: str = "full"
    roi: RoiSpec = field(default_factory=RoiSpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    reward: RewardParams = field(default_factory=RewardParams)
    agent: AgentConfig = field(default_factory=AgentConfig)
    shield: ShieldConfig = field(default_factory=ShieldConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    models: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    selfcheck: SelfcheckConfig = field(default_factory=SelfcheckConfig)


# Overrides applied for each profile before the config file
PROFILES = {
    "full": {},
    "desk": {
        "roi.cell_length": 0.5,
        "roi.cell_width": 0.5,
        "agent.conv_filters": 16,
        "agent.pool_kernel": 3,
        "agent.pool_stride": 2,
        "agent.episodes": 150,
        "eval.episodes": 100,
        "models.dynamics_episodes": 500,
        "models.pedestrian_episodes": 500,
        "models.lr": 1e-3,
    },
}

KEY_ALIASES = {"layout.kind": "layout"}


def _canonical_key(key: str) -> str:
    key = KEY_ALIASES.get(key, key)
    if key.startswith("layout."):
        return "geometry." + key[len("layout."):]
    return key


def _coerce(raw: str, kind, key: str):
    text = raw.strip()
    if typing.get_origin(kind) is Union:
        if text.lower() in ("", "none"):
            return None
        kind = next(arg for arg in typing.get_args(kind) if arg is not type(None))
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text.replace("_", ""))
        if kind is float:
            return float(text)
        if kind is str:
            return text.strip('"').strip("'")
    except ValueError:
        raise ConfigError(f"{key}: cannot read '{raw}' as {kind.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {kind}")


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_config_text(text: str) -> dict:
    """``key = value`` pairs in file order; ``#`` starts a comment."""
    pairs = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        pairs[_canonical_key(key)] = value
    return pairs


def apply_overrides(config: Config, overrides: dict) -> Config:
    """Return ``config`` with string or typed overrides applied."""
    top_types = _field_types(Config)
    sections = {}
    top = {}
    for key, value in overrides.items():
        key = _canonical_key(key)
        if "." in key:
            section, name = key.split(".", 1)
            if section not in top_types or not is_dataclass(getattr(config, section)):
                raise ConfigError(f"unknown config section '{section}' in '{key}'")
            sections.setdefault(section, {})[name] = value
        else:
            if key not in top_types or is_dataclass(getattr(config, key)):
                raise ConfigError(f"unknown config key '{key}'")
            top[key] = value if not isinstance(value, str) else _coerce(value, top_types[key], key)

    for section, values in sections.items():
        current = getattr(config, section)
        types = _field_types(type(current))
        coerced = {}
        for name, value in values.items():
            if name not in types:
                raise ConfigError(f"unknown config key '{section}.{name}'")
            coerced[name] = _coerce(value, types[name], f"{section}.{name}") if isinstance(value, str) else value
        try:
            top[section] = replace(current, **coerced)
        except ValueError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    try:
        config = replace(config, **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if config.layout not in LAYOUTS:
        raise ConfigError(f"unknown layout '{config.layout}', expected one of {sorted(LAYOUTS)}")
    if config.eval.variant not in VARIANT_NAMES:
        raise ConfigError(f"unknown variant '{config.eval.variant}', expected one of {list(VARIANT_NAMES)}")
    return config


def load_config(path=None, profile: str = None, overrides: dict = None) -> Config:
    """
    Build a Config from built-in defaults, a profile, an optional file and CLI overrides.

    The profile comes from ``profile`` or, failing that, a ``profile`` key in the file.
    """
    file_pairs = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        file_pairs = parse_config_text(path.read_text(encoding="utf-8"))
    profile = profile or file_pairs.pop("profile", None) or "full"
    file_pairs.pop("profile", None)
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile '{profile}', expected one of {sorted(PROFILES)}")
    config = apply_overrides(Config(profile=profile), PROFILES[profile])
    config = apply_overrides(config, file_pairs)
    if overrides:
        config = apply_overrides(config, overrides)
    logger.debug("config loaded (profile=%s, file=%s)", profile, path)
    return config


def config_to_dict(config: Config) -> dict:
    return asdict(config)


def save_run_manifest(config: Config, path, extra: dict = None) -> Path:
    """Write ``run.json``: format version, creation time and the full config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": MANIFEST_VERSION,
        "created": datetime.now().isoformat(timespec="seconds"),
        "config": config_to_dict(config),
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False), encoding="utf-8")
    return path


def describe_defaults() -> str:
    """One ``key = value`` line per configurable field, for --help."""
    lines = []
    config = Config()
    for f in fields(Config):
        value = getattr(config, f.name)
        if is_dataclass(value):
            for sub in fields(value):
                lines.append(f"{f.name}.{sub.name} = {getattr(value, sub.name)}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines)
