"""Run configuration: defaults, presets, flat ``key = value`` files and flag overrides.

File grammar, one setting per line::

    # comment
    architecture = lenet
    lr = 0.001
    rank.conv2 = 256     # per-layer rank override (cp only)

Keys are :class:`RunConfig` field names; blank lines and ``#`` comments are
ignored. Precedence, lowest first: field defaults, preset, file, flags.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any

from .nn.model import ARCHITECTURES, CP_INITS, NORMALIZATIONS
from .optim import OPTIMIZERS

DATASETS = ("mnist", "cifar10")
DEFAULT_DATASET = {"lenet": "mnist", "alexnet": "cifar10"}
LAMBDA_INITS = ("ones", "standard_normal")

PRESETS: dict[str, dict[str, Any]] = {
    "desk": {"epochs": 5, "subset": 0.2, "seeds": 3, "ft_epochs": 2, "patience": 2},
    "paper": {"subset": 1.0, "seeds": 8, "ft_epochs": 20},
}
# paper-scale epoch counts per architecture
PAPER_EPOCHS = {"lenet": 50, "alexnet": 150}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    architecture: str = "lenet"
    dataset: str = ""
    normalization: str = "cp"
    init: str = "kaiming_normal"
    lambda_init: str = "ones"
    optimizer: str = "rmsprop"
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    seeds: int = 1
    subset: float = 1.0
    val_fraction: float = 0.1
    patience: int = 0  # 0 disables early stopping
    lambda_every: int = 1
    fit_threshold: float = 0.999
    rank_step: int = 0  # 0 selects the automatic step
    max_iters: int = 100
    layers: str = ""  # estimate-ranks: comma-separated layer names, empty for all
    rate: float = 0.25
    ft_epochs: int = 20
    ft_lr: float = 0.0  # 0 picks the best of 1e-4, 1e-3, 1e-2 on validation
    ft_optimizer: str = "sgd"
    ranks: dict[str, int] = field(default_factory=dict)
    data_dir: str = "data"
    out: str = "runs"
    preset: str = ""

    def resolved_dataset(self) -> str:
        return self.dataset or DEFAULT_DATASET[self.architecture]

    def layer_list(self) -> list[str]:
        return [s.strip() for s in self.layers.split(",") if s.strip()]

    def validate(self) -> "RunConfig":
        choices = {
            "architecture": tuple(ARCHITECTURES), "normalization": NORMALIZATIONS, "init": CP_INITS,
            "lambda_init": LAMBDA_INITS, "optimizer": OPTIMIZERS, "ft_optimizer": OPTIMIZERS,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.dataset and self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {tuple(PRESETS)}, got {self.preset!r}")
        for key in ("lr", "epochs", "batch_size", "seeds", "lambda_every", "max_iters"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("seed", "patience", "rank_step", "ft_epochs", "ft_lr"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative, got {getattr(self, key)}")
        if not 0 < self.subset <= 1:
            raise ConfigError(f"subset must be in (0, 1], got {self.subset}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if not 0 < self.fit_threshold <= 1:
            raise ConfigError(f"fit_threshold must be in (0, 1], got {self.fit_threshold}")
        if not 0 <= self.rate < 1:
            raise ConfigError(f"rate must be in [0, 1), got {self.rate}")
        if self.ranks and self.normalization != "cp":
            raise ConfigError("rank overrides require normalization = cp")
        for name, r in self.ranks.items():
            if r < 1:
                raise ConfigError(f"rank.{name} must be positive, got {r}")
        return self

    def to_lines(self) -> list[str]:
        """Echo in file grammar (parses back to an equal config)."""
        lines = []
        for f in fields(self):
            if f.name == "ranks":
                lines += [f"rank.{k} = {v}" for k, v in sorted(self.ranks.items())]
            else:
                lines.append(f"{f.name} = {getattr(self, f.name)}")
        return lines

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, value: str) -> Any:
    kind = FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return value


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Raw settings from file text; ``rank.<layer>`` keys collect into ``ranks``."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("rank."):
            try:
                out.setdefault("ranks", {})[key[5:]] = int(value)
            except ValueError:
                raise ConfigError(f"{source}:{lineno}: rank must be an integer") from None
        elif key in FIELD_TYPES and key != "ranks":
            out[key] = coerce(key, value)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    return out


def load_config_file(path: str) -> dict[str, Any]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, path)


def build_config(file_values: dict[str, Any] | None = None, flag_values: dict[str, Any] | None = None) -> RunConfig:
    """Layer defaults, preset, file and flags, then validate."""
    file_values = dict(file_values or {})
    flag_values = {k: v for k, v in (flag_values or {}).items() if v is not None}
    preset = flag_values.get("preset") or file_values.get("preset") or ""
    arch = flag_values.get("architecture") or file_values.get("architecture") or RunConfig.architecture
    values: dict[str, Any] = {"epochs": PAPER_EPOCHS.get(arch, RunConfig.epochs)}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"preset must be one of {tuple(PRESETS)}, got {preset!r}")
        values.update(PRESETS[preset])
    ranks = {**file_values.pop("ranks", {}), **flag_values.pop("ranks", {})}
    values.update(file_values)
    values.update(flag_values)
    values["ranks"] = ranks
    return RunConfig(**values).validate()
