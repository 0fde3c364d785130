"""
Run configuration: typed sections, two presets and a flat `section.key = value` text format.
"""

import os
from dataclasses import dataclass, field, fields, replace

from .hopper_env import EpisodeConfig, HopperParams
from .networks import AgentDims
from .reward import REWARD_SCALES
from .terrain import TerrainParams


PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSection:
    max_steps: int = 1000
    control_dt: float = 0.01
    physics_substeps: int = 4
    min_height_ratio: float = 0.8
    max_pitch: float = 0.2
    resample_prob: float = 0.004

    def episode_config(self, resample_prob=None, params=None):
        params = params or HopperParams()
        return EpisodeConfig(max_steps=self.max_steps, control_dt=self.control_dt,
                             physics_substeps=self.physics_substeps,
                             min_height=self.min_height_ratio * params.standing_height,
                             max_pitch=self.max_pitch,
                             resample_prob=self.resample_prob if resample_prob is None else resample_prob)


@dataclass(frozen=True)
class TerrainSection:
    octaves: int = 2
    lacunarity: float = 2.0
    gain: float = 0.25
    z_scale: float = 0.05
    wavelength: float = 4.0
    resolution: float = 0.05
    length: float = 24.0
    origin: float = -4.0

    def params(self, z_scale=None):
        return TerrainParams(octaves=self.octaves, lacunarity=self.lacunarity, gain=self.gain,
                             z_scale=self.z_scale if z_scale is None else z_scale,
                             wavelength=self.wavelength)


@dataclass(frozen=True)
class RewardSection:
    k0: float = 0.03
    exponent: float = 0.997
    forward_cap: float = 0.35
    scales: tuple = REWARD_SCALES


@dataclass(frozen=True)
class PpoSection:
    iterations: int = 300
    num_envs: int = 4
    steps_per_env: int = 1000
    epochs: int = 4
    minibatches: int = 4
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma: float = 0.998
    lam: float = 0.95
    clip_low: float = 0.8
    clip_high: float = 1.2
    value_clip_low: float = 0.8
    value_clip_high: float = 1.2
    value_clip_floor: float = 0.0
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    normalize_advantages: bool = True
    init_log_std: float = 0.0
    latent_dim: int = 8
    policy_hidden: tuple = (128, 128)
    encoder_hidden: tuple = (256, 128)
    critic_hidden: tuple = (128, 128)
    difficulty_iters: int = 0
    checkpoint_every: int = 50

    @property
    def batch_size(self):
        return self.num_envs * self.steps_per_env

    @property
    def ramp_iters(self):
        return self.difficulty_iters or self.iterations


@dataclass(frozen=True)
class RmaSection:
    history: int = 50
    embed_dim: int = 32
    iterations: int = 100
    num_envs: int = 4
    steps_per_env: int = 1000
    minibatches: int = 4
    lr: float = 5e-4
    patience: int = 50
    min_improvement: float = 0.01
    validate_every: int = 10
    validation_envs: int = 2
    validation_steps: int = 500
    checkpoint_every: int = 20


@dataclass(frozen=True)
class DeploySection:
    mode: str = "lockstep"
    control_hz: int = 100
    estimator_hz: int = 10
    median_window: int = 5
    staleness_periods: int = 2
    max_steps: int = 1000

    @property
    def period_steps(self):
        return self.control_hz // self.estimator_hz


@dataclass(frozen=True)
class EvalSection:
    episodes: int = 100
    policy_seeds: int = 3
    range_set: str = "test"
    resample_prob: float = 0.01
    awr_rounds: int = 10
    awr_candidates: int = 8
    awr_rollout_steps: int = 100
    latent_draws: int = 256
    noise_band: float = 0.03
    sweep_episodes: int = 20


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    preset: str = "desk"
    out_dir: str = "runs"
    env: EnvSection = field(default_factory=EnvSection)
    terrain: TerrainSection = field(default_factory=TerrainSection)
    reward: RewardSection = field(default_factory=RewardSection)
    ppo: PpoSection = field(default_factory=PpoSection)
    rma: RmaSection = field(default_factory=RmaSection)
    deploy: DeploySection = field(default_factory=DeploySection)
    eval: EvalSection = field(default_factory=EvalSection)

    def agent_dims(self):
        return AgentDims(latent_dim=self.ppo.latent_dim, history=self.rma.history, embed_dim=self.rma.embed_dim,
                         policy_hidden=self.ppo.policy_hidden, encoder_hidden=self.ppo.encoder_hidden,
                         critic_hidden=self.ppo.critic_hidden)


SECTIONS = ("env", "terrain", "reward", "ppo", "rma", "deploy", "eval")
TOP_LEVEL = ("seed", "preset", "out_dir")

PRESET_VALUES = {
    "desk": {},
    "paper": {
        "terrain.z_scale": 0.27,
        "ppo.iterations": 15000,
        "ppo.num_envs": 80,
        "ppo.checkpoint_every": 500,
        "rma.iterations": 1000,
        "rma.num_envs": 80,
        "rma.validation_envs": 8,
        "eval.episodes": 1000,
    },
}


def preset_config(name="desk"):
    if name not in PRESET_VALUES:
        raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")
    return with_overrides(RunConfig(preset=name), PRESET_VALUES[name])


def with_overrides(config, values):
    """Apply {'section.key' or top-level key: value} overrides, coercing text values."""
    sections = {name: getattr(config, name) for name in SECTIONS}
    top = {}
    for key, value in values.items():
        section, _, name = key.rpartition(".")
        if not section:
            if key not in TOP_LEVEL:
                raise ConfigError(f"unknown key {key!r}")
            top[key] = _coerce(getattr(config, key), value, key)
            continue
        if section not in sections:
            raise ConfigError(f"unknown section {section!r} in {key!r}")
        current = sections[section]
        known = {f.name for f in fields(current)}
        if name not in known:
            raise ConfigError(f"unknown key {key!r}")
        sections[section] = replace(current, **{name: _coerce(getattr(current, name), value, key)})
    return replace(config, **sections, **top)


def _coerce(default, value, key):
    if not isinstance(value, str):
        return tuple(value) if isinstance(default, tuple) else value
    text = value.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("true", "yes", "1"):
                return True
            if lowered in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(part) for part in text.split(",") if part.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {type(default).__name__}") from None


def parse_lines(text, source="<config>"):
    """Read `key = value` lines, '#' comments allowed; returns an ordered dict."""
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, preset=None, overrides=None):
    values = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            values = parse_lines(f.read(), path)
    name = preset or values.pop("preset", "desk")
    values.pop("preset", None)
    config = preset_config(name)
    try:
        config = with_overrides(config, values)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None
    return with_overrides(config, overrides or {})


def format_config(config):
    lines = ["# rapidmotor run configuration"]
    for key in TOP_LEVEL:
        lines.append(f"{key} = {getattr(config, key)}")
    for name in SECTIONS:
        section = getattr(config, name)
        lines.append("")
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{name}.{f.name} = {value}")
    return "\n".join(lines) + "\n"


def flatten(config):
    return dict(parse_lines(format_config(config)))


def save_config(config, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_config(config))
    return path


def worker_count(default=4):
    """Rollout/evaluation threads, capped by RMA_THREADS."""
    raw = os.environ.get("RMA_THREADS")
    if not raw:
        return default
    try:
        return max(1, min(default, int(raw)))
    except ValueError:
        raise ConfigError(f"RMA_THREADS must be an integer, got {raw!r}") from None
