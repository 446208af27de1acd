"""Run configuration and its ``key = value`` text format.

The format is one assignment per line. Blank lines and lines starting with
``#`` are skipped; keys are :class:`RunConfig` field names and values are
parsed according to the field type::

    # class-incremental, class-balanced buffer
    scenario = class
    policy = class_bal_buffer
    buffer_size = 64
    epochs = 30
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .types import ConfigError

POLICY_IDS = (
    "none",
    "random",
    "loss_min",
    "loss_max",
    "loss_median",
    "loss_mean",
    "entropy_min",
    "entropy_max",
    "entropy_mean",
    "brisque",
    "tv_label",
    "tv_image",
    "ambivalent",
    "class_bal_samples",
    "class_bal_buffer",
    "div_class_bal",
    "gss",
    "rss",
)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_seed: Optional[int] = None
    scenario: str = "class"
    height: int = 32
    width: int = 32
    patch_size: int = 5
    hidden1: int = 64
    hidden2: int = 32
    num_classes: int = 10
    train_per_task: int = 200
    val_per_task: int = 50
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 4e-4
    poly_power: float = 0.9
    init_scale: float = 1.0
    distill_weight: float = 1.0
    distill: str = "auto"
    buffer_size: int = 64
    policy: str = "random"
    th: float = 0.6
    cmp: int = 5
    rss_dim: int = 2
    direction: str = ""
    replay_mix: str = "concat"
    replay_ratio: float = 0.5
    cka_pixels: int = 2000

    def __post_init__(self):
        self.validate()

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    @property
    def scenario_kind(self) -> str:
        return "class_incremental" if self.scenario.startswith("class") else "domain_incremental"

    def validate(self) -> None:
        if self.scenario not in ("class", "domain", "class_incremental", "domain_incremental"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.poly_power <= 0:
            raise ConfigError("poly_power must be > 0")
        if self.buffer_size < 0:
            raise ConfigError("buffer_size must be >= 0")
        if self.policy not in POLICY_IDS:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {', '.join(POLICY_IDS)}")
        if not 0 < self.th <= 2 and self.policy == "div_class_bal":
            raise ConfigError("th must lie in (0, 2]")
        if self.th < 0:
            raise ConfigError("th must be non-negative")
        if self.cmp < 1 or self.rss_dim < 1:
            raise ConfigError("cmp and rss_dim must be >= 1")
        if self.direction not in ("", "min", "max"):
            raise ConfigError("direction must be min or max")
        if self.distill not in ("auto", "on", "off"):
            raise ConfigError("distill must be auto, on or off")
        if self.replay_mix not in ("concat", "ratio"):
            raise ConfigError("replay_mix must be concat or ratio")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError("patch_size must be odd and positive")
        if min(self.height, self.width, self.hidden1, self.hidden2, self.batch_size) < 1:
            raise ConfigError("sizes must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @property
    def uses_distillation(self) -> bool:
        if self.distill == "auto":
            return self.scenario_kind == "class_incremental"
        return self.distill == "on"

    def check_tasks(self, num_tasks: int) -> None:
        if 0 < self.buffer_size < num_tasks:
            raise ConfigError(f"buffer_size {self.buffer_size} is smaller than the number of tasks {num_tasks}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, annotation: str, raw: str):
    raw = raw.strip()
    try:
        if annotation.startswith("Optional"):
            if raw.lower() in ("", "none", "null"):
                return None
            annotation = annotation[len("Optional[") : -1]
        if annotation == "int":
            return int(raw)
        if annotation == "float":
            return float(raw)
        if annotation == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def parse_key_values(text: str) -> dict:
    """Parse ``key = value`` lines into a dict of raw strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.split(" #", 1)[0].strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def config_from_mapping(values: dict, base: RunConfig | None = None) -> RunConfig:
    known = {f.name: str(f.type) for f in fields(RunConfig)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _coerce(key, known[key], raw) if isinstance(raw, str) else raw
    return dataclasses.replace(base or RunConfig(), **changes)


def load_config(path) -> RunConfig:
    return config_from_mapping(parse_key_values(Path(path).read_text()))
