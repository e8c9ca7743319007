"""Run configuration: one YAML or JSON file with a fixed set of sections.

Unknown sections or keys are rejected so that typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .agent.learner import AgentConfig
from .env.sprites import SpritesConfig
from .env.wrapper import WrapperConfig
from .mae import FrameSpec, MAEConfig
from .pretrain import Schedule
from .saliency import KNEE_RULES, PAD_MODES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SaliencyConfig:
    knee_rule: str = "mean_threshold"
    mr_pct: float = 30.0
    pad_mode: str = "zero_pad"
    fixed_k: int | None = None

    def __post_init__(self):
        if self.knee_rule not in KNEE_RULES:
            raise ConfigError(f"knee_rule must be one of {KNEE_RULES}, got {self.knee_rule!r}")
        if self.pad_mode not in PAD_MODES:
            raise ConfigError(f"pad_mode must be one of {PAD_MODES}, got {self.pad_mode!r}")


@dataclass(frozen=True)
class EnvSection:
    name: str = "sprites"
    endpoint: str | None = None
    sprites: SpritesConfig = field(default_factory=SpritesConfig)
    wrapper: WrapperConfig = field(default_factory=WrapperConfig)

    def __post_init__(self):
        if self.name not in ("sprites", "external"):
            raise ConfigError(f"env name must be 'sprites' or 'external', got {self.name!r}")
        if self.name == "external" and not self.endpoint:
            raise ConfigError("an external env needs an endpoint (host:port)")


@dataclass(frozen=True)
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    mae: MAEConfig = field(default_factory=MAEConfig)
    schedule: Schedule = field(default_factory=Schedule)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    seed: int = 0
    out: str = "runs"

    @classmethod
    def desk(cls) -> "RunConfig":
        """48x48 Sprites with a short, collect-only episode and a 20K-step agent.

        The player moves one patch width per agent step, and the shorter horizon
        (gamma 0.9, 5-step returns) keeps the value gap between neighbouring
        positions large enough to act on after a few thousand updates.
        """
        return cls(
            env=EnvSection(sprites=SpritesConfig.toy(n_hazards=0, collectible_speed=0, player_speed=2, step_cap=400)),
            mae=MAEConfig.toy(),
            saliency=SaliencyConfig(mr_pct=30.0),
            agent=AgentConfig(
                total_steps=20_000,
                buffer_capacity=20_000,
                beta_steps=20_000,
                gamma=0.9,
                n_step=5,
                lr=5e-4,
                eps_fraction=0.3,
                eps_end=0.05,
                target_sync=500,
                checkpoint_interval=5_000,
            ),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PRESETS = {"full": RunConfig, "desk": RunConfig.desk}


def config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    """Overlay ``data`` on ``base`` (default: the full-size configuration)."""
    base = base or RunConfig()
    merged = dataclasses.asdict(base)

    def overlay(dst: dict, src: dict, where: str):
        for k, v in src.items():
            if k not in dst:
                raise ConfigError(f"{where or 'config'}: unknown key {k}")
            if isinstance(dst[k], dict) and isinstance(v, dict):
                overlay(dst[k], v, f"{where}.{k}" if where else k)
            else:
                dst[k] = v

    if data:
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping at the top level")
        overlay(merged, data, "")
    return _build_run(merged)


def _build_run(d: dict) -> RunConfig:
    env = d["env"]
    try:
        return RunConfig(
            env=EnvSection(
                name=env["name"],
                endpoint=env["endpoint"],
                sprites=SpritesConfig(**env["sprites"]),
                wrapper=WrapperConfig(**env["wrapper"]),
            ),
            mae=MAEConfig(**{**d["mae"], "frame": FrameSpec(**d["mae"]["frame"])}),
            schedule=Schedule(**d["schedule"]),
            saliency=SaliencyConfig(**d["saliency"]),
            agent=AgentConfig(**d["agent"]),
            seed=int(d["seed"]),
            out=str(d["out"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None, preset: str = "full") -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    base = PRESETS[preset]()
    if path is None:
        return base
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return config_from_dict(data or {}, base)


def write_resolved(config: RunConfig, directory: str | os.PathLike, extra: dict | None = None) -> Path:
    path = Path(directory) / "resolved_config.json"
    payload = config.to_dict()
    if extra:
        payload["invocation"] = extra
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path
