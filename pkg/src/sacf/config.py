"""Experiment configuration and its ``section.key = value`` text format."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .autodiff import ContractViolation
from .policy import ModelConfig
from .ppo import PPOConfig
from .sim import SimConfig


@dataclass
class RunConfig:
    seed: int = 1
    eval_every: int = 50
    eval_episodes: int = 50
    final_eval_episodes: int = 200
    checkpoint_every: int = 500
    out_dir: str = "runs/default"


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)


def _hints(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def _format(value) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, typ, key: str):
    text = text.strip()
    origin = typing.get_origin(typ)
    try:
        if origin is tuple:
            args = typing.get_args(typ)
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            if args and args[-1] is not Ellipsis and len(items) != len(args):
                raise ValueError(f"expected {len(args)} items")
            elem = args[0] if args else str
            return tuple(_parse(s, elem, key) for s in items)
        if isinstance(typ, type) and issubclass(typ, enum.Enum):
            return typ(text)
        if typ is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError("expected true/false")
            return text.lower() == "true"
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError as e:
        raise ContractViolation(f"config: bad value for {key}: {text!r} ({e})") from e
    raise ContractViolation(f"config: unsupported type for {key}")


def to_items(obj, prefix: str = "") -> list[tuple[str, str]]:
    items = []
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(val):
            items.extend(to_items(val, key + "."))
        else:
            items.append((key, _format(val)))
    return items


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_items(cfg))


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines onto the defaults; unknown keys are rejected."""
    cfg = base if base is not None else ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        set_key(cfg, key, value, lineno)
    return cfg


def set_key(cfg, key: str, value: str, lineno: int = 0) -> None:
    parts = key.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or p not in {f.name for f in dataclasses.fields(obj)}:
            raise ContractViolation(f"config line {lineno}: unknown key {key!r}")
        obj = getattr(obj, p)
    name = parts[-1]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ContractViolation(f"config line {lineno}: unknown key {key!r}")
    if dataclasses.is_dataclass(getattr(obj, name)):
        raise ContractViolation(f"config line {lineno}: {key!r} is a section, not a value")
    setattr(obj, name, _parse(value, _hints(type(obj))[name], key))


def load(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return loads(p.read_text())


def model_digest(cfg: ExperimentConfig) -> str:
    """Digest of everything that determines parameter names and shapes."""
    text = "".join(f"{k}={v}\n" for k, v in to_items(cfg.model, "model."))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def validate(cfg: ExperimentConfig) -> None:
    m = cfg.model
    if min(m.visual.channels, m.visual.height, m.visual.width, m.audio.channels) <= 0:
        raise ContractViolation("config: channel and map sizes must be positive")
    if m.visual.height % m.audio.map_size or m.visual.width % m.audio.map_size:
        raise ContractViolation("config: audio map must tile the visual map")
    if m.visual.rays != cfg.sim.rays or m.audio.bands != cfg.sim.bands:
        raise ContractViolation("config: model.visual.rays / model.audio.bands must match sim.rays / sim.bands")
    if cfg.ppo.minibatches != 1:
        raise ContractViolation("config: only a single full-batch minibatch is supported")
    if cfg.ppo.updates <= 0 or cfg.ppo.num_envs <= 0 or cfg.ppo.horizon <= 0:
        raise ContractViolation("config: updates, num_envs and horizon must be positive")
