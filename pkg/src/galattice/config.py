"""Run configuration: ``[section]`` headers with ``key = value`` lines, every key defaulted."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .structures import NOISE_LEVELS, PROTOTYPES


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    out: str = "out"
    threads: int = 1


@dataclass
class DataSection:
    prototypes: tuple = ("cP1-Po", "cI2-W", "cF4-Cu", "cF8-C", "hP2-Mg")
    noise_levels: tuple = NOISE_LEVELS
    clouds_per_class: int = 1000
    k: int = 20
    min_particles: int = 4096
    dataset: str = ""
    task: str = ""


@dataclass
class ModelSection:
    width: int = 32
    hidden: int = 64
    n_blocks: int = 3
    mv_cap: float = 4.0


@dataclass
class TrainSection:
    task: str = "frame"
    lr: float = 1e-3
    batch_size: int = 4
    accumulation: int = 16
    max_epochs: int = 128
    train_batches: int = 2048
    val_batches: int = 512
    beta: float = 1e-2
    freeze_core: bool = False
    target_metric: float = -1.0        # negative disables the early exit
    max_seconds: float = -1.0          # negative disables the time budget
    checkpoint: str = ""


@dataclass
class EvalSection:
    pair_label: str = "S_A/S_B"
    snapshot_a: str = "proto:cF4-Cu:0.05:0"
    snapshot_b: str = "proto:hP2-Mg:0.05:0"
    snapshot_particles: int = 1000
    methods: tuple = ("Q", "Radial")
    checkpoints: tuple = ()


@dataclass
class TransferSection:
    tasks: tuple = ("frame", "denoising")
    sources: tuple = ()
    fractions: tuple = (1e-2, 1.0)
    replicas: int = 3
    workers: int = 1


@dataclass
class TrajectorySection:
    path: str = ""
    stride: int = 4
    per_frame: int = 0


@dataclass
class PotentialSection:
    name: str = "icosahedral"
    kind: str = ""
    k: float = 0.0
    phi: float = 0.0
    r0: float = 1.0
    epsilon: float = 0.0
    sigma: float = 0.02
    cutoff: float = 0.0
    r_min: float = 0.8
    r_max: float = 0.0
    n: int = 500


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    potential: PotentialSection = field(default_factory=PotentialSection)

    def set(self, section: str, key: str, text: str) -> None:
        sec = getattr(self, section, None)
        if sec is None or section not in SECTION_NAMES:
            raise ConfigError(f"unknown config section [{section}]")
        hints = get_type_hints(type(sec))
        if key not in hints:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        setattr(sec, key, _parse(hints[key], text, f"{section}.{key}"))

    def dumps(self) -> str:
        lines = []
        for name in SECTION_NAMES:
            sec = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(sec):
                lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
            lines.append("")
        return "\n".join(lines)


SECTION_NAMES = tuple(f.name for f in fields(RunConfig))


def _parse(kind, text: str, where: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(_auto(t) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for '{where}'") from None


def _auto(token: str):
    try:
        return float(token) if any(c in token for c in ".eE") and not token[0].isalpha() else int(token)
    except ValueError:
        return token


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_config(text: str, config: RunConfig | None = None, origin: str = "<config>") -> RunConfig:
    config = config or RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTION_NAMES:
                raise ConfigError(f"{origin}:{lineno}: unknown config section [{section}]")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"{origin}:{lineno}: key before any [section] header")
        try:
            config.set(section, key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return config


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, origin=str(path))


def validate(config: RunConfig) -> None:
    for proto in config.data.prototypes:
        if proto not in PROTOTYPES and not Path(str(proto)).exists():
            raise ConfigError(f"unknown prototype '{proto}' in data.prototypes")
    if config.run.threads < 1:
        raise ConfigError("run.threads must be >= 1")
    if config.data.clouds_per_class < 1:
        raise ConfigError("data.clouds_per_class must be >= 1")


def replace(section, **changes):
    return dataclasses.replace(section, **changes)
