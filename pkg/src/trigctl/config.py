"""Run configuration: defaults, YAML loading, environment overrides, hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .memory.fusion import FusionConfig
from .memory.sakg import KgConfig
from .memory.samb import SambWeights
from .trigger import ThresholdConfig

SEED_ENV = "TRIGCTL_SEED"
OUT_ENV = "TRIGCTL_OUT"
DEFAULT_SEED = 42
DEFAULT_WORKERS = 8

SECTIONS = {
    "trigger": ThresholdConfig,
    "samb": SambWeights,
    "kg": KgConfig,
    "fusion": FusionConfig,
}

# Named trigger settings for threshold sensitivity sweeps; W stays at 5 throughout.
SWEEP_SETTINGS = {
    "more_strategic": ThresholdConfig(T=3, tau_v=0.30, tau_z=3, tau_r=4, tau_rz=2),
    "default": ThresholdConfig(),
    "more_reactive": ThresholdConfig(T=6, tau_v=0.40, tau_z=5, tau_r=5, tau_rz=3),
    "no_periodic_refresh": ThresholdConfig(T=None),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenarios: list[str] = field(default_factory=list)
    trigger: ThresholdConfig = field(default_factory=ThresholdConfig)
    samb: SambWeights = field(default_factory=SambWeights)
    kg: KgConfig = field(default_factory=KgConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    mode: str = "step_capped"
    seed: int = DEFAULT_SEED
    repeat: int = 1
    workers: int = DEFAULT_WORKERS
    embed_dim: int = 256
    samb_path: str | None = None
    sakg_dir: str | None = None
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        out["run"] = {
            "scenarios": list(self.scenarios), "mode": self.mode, "seed": self.seed,
            "repeat": self.repeat, "workers": self.workers, "embed_dim": self.embed_dim,
            "samb_path": self.samb_path, "sakg_dir": self.sakg_dir, "out_dir": self.out_dir,
        }
        return out

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def behavior_hash(self) -> str:
        """Hash of everything that can change episode behavior."""
        d = self.to_dict()
        run = d.pop("run")
        d["run"] = {k: run[k] for k in ("mode", "embed_dim")}
        blob = json.dumps(d, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def _section(cls, data: dict, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section [{name}] must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping of sections")
    unknown = sorted(set(data) - set(SECTIONS) - {"run"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    cfg = RunConfig()
    for name, cls in SECTIONS.items():
        if name in data and data[name] is not None:
            setattr(cfg, name, _section(cls, data[name], name))
    run = data.get("run") or {}
    if not isinstance(run, dict):
        raise ConfigError("section [run] must be a mapping")
    for key, value in run.items():
        if not hasattr(cfg, key) or key in SECTIONS:
            raise ConfigError(f"unknown key in [run]: {key}")
        setattr(cfg, key, value)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.mode not in ("step_capped", "call_budgeted"):
        raise ConfigError(f"mode must be step_capped or call_budgeted, got {cfg.mode!r}")
    for name in ("seed", "repeat", "workers", "embed_dim"):
        if not isinstance(getattr(cfg, name), int):
            raise ConfigError(f"{name} must be an integer")
    if cfg.repeat < 1 or cfg.workers < 1 or cfg.embed_dim < 1:
        raise ConfigError("repeat, workers and embed_dim must be >= 1")
    if not isinstance(cfg.scenarios, list):
        raise ConfigError("scenarios must be a list of paths")


def load(path: str | Path | None = None, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    cfg = from_dict(data)
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    if env.get(OUT_ENV):
        cfg.out_dir = env[OUT_ENV]
    return cfg


def parse_setting(spec: str) -> tuple[str, ThresholdConfig]:
    """``name`` for a named setting or ``name:T=3,tau_v=0.3`` for a custom one."""
    name, _, overrides = spec.partition(":")
    if not overrides:
        if name not in SWEEP_SETTINGS:
            raise ConfigError(f"unknown sweep setting {name!r}; known: {', '.join(SWEEP_SETTINGS)}")
        return name, SWEEP_SETTINGS[name]
    values: dict = {}
    for part in overrides.split(","):
        key, _, raw = part.partition("=")
        key = key.strip()
        if key not in {f.name for f in dataclasses.fields(ThresholdConfig)}:
            raise ConfigError(f"unknown threshold {key!r} in setting {spec!r}")
        if key == "W" and int(raw) != 5:
            raise ConfigError("the action-history window W is fixed at 5 for sweeps")
        values[key] = None if raw.strip().lower() in ("none", "inf", "unbounded") else (
            float(raw) if key == "tau_v" else int(raw))
    try:
        return name, dataclasses.replace(SWEEP_SETTINGS["default"], **values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
