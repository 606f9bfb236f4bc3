"""Experiment configuration: dataclasses plus a flat dotted-key text format.

Config files are plain text, one `section.key = value` per line, values in
JSON literal syntax (bare strings allowed). The same dotted keys work as
command-line overrides, and the config hash is taken over the canonical
serialized form so key order never matters.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from enum import Enum

from .data import AugmentConfig


class ConfigError(ValueError):
    """A config problem attributable to a specific key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


class TrainMode(str, Enum):
    FULL = "full"
    NO_ADVERSARIAL = "no_adversarial"
    NO_MI = "no_mi"
    ERM = "erm"
    CUTOUT = "cutout"
    GIN = "gin"

    @classmethod
    def parse(cls, value: "str | TrainMode") -> "TrainMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError("trainer.mode",
                              f"unknown mode {value!r}; one of {[m.value for m in cls]}")

    @property
    def dual_view(self) -> bool:
        return self in (TrainMode.FULL, TrainMode.NO_MI, TrainMode.NO_ADVERSARIAL, TrainMode.GIN)

    @property
    def consistency_active(self) -> bool:
        return self in (TrainMode.FULL, TrainMode.NO_MI, TrainMode.NO_ADVERSARIAL)

    @property
    def adversary_active(self) -> bool:
        return self in (TrainMode.FULL, TrainMode.NO_MI)

    @property
    def mi_active(self) -> bool:
        return self is TrainMode.FULL

    @property
    def rerandomize_synthesizers(self) -> bool:
        return self in (TrainMode.NO_ADVERSARIAL, TrainMode.GIN)


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 4
    seg_base_width: int = 16
    seg_stages: int = 4
    synth_hidden_channels: int = 2
    synth_num_blocks: int = 4
    mi_base_width: int = 16
    mi_embed_dim: int = 128


@dataclass
class TrainConfig:
    """Every knob of one training run; defaults target desk-scale experiments."""

    epochs: int = 200
    batch_size: int = 16
    lr: float = 3e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lr_schedule: str = "linear"  # "linear" decays to zero at the final step
    tau: float = 0.07
    num_patches: int = 64
    alpha_mode: str = "shared"  # "shared" draws one mix ratio per batch, or "per_sample"
    independent_noise: bool = False  # separate style draw for each synthesizer
    literal_mi_negatives: bool = False
    mode: str = "full"
    seed: int = 0
    val_every: int = 0  # steps between source-val checks; 0 = once per epoch
    grad_clip: float = 5.0  # global-norm clip on the adversary step; 0 disables
    dice_loss_weight: float = 0.0
    weight_sup: float = 1.0
    weight_cons: float = 1.0
    weight_mi: float = 1.0
    augment_enabled: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.mode = TrainMode.parse(self.mode).value
        if self.lr <= 0:
            raise ConfigError("trainer.lr", "must be positive")
        if self.epochs < 1:
            raise ConfigError("trainer.epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("trainer.batch_size", "must be >= 1")
        if self.tau <= 0:
            raise ConfigError("trainer.tau", "must be positive")
        if self.lr_schedule not in ("linear", "constant"):
            raise ConfigError("trainer.lr_schedule", "must be 'linear' or 'constant'")
        if self.alpha_mode not in ("shared", "per_sample"):
            raise ConfigError("trainer.alpha_mode", "must be 'shared' or 'per_sample'")

    @property
    def train_mode(self) -> TrainMode:
        return TrainMode(self.mode)


@dataclass
class DataConfig:
    root: str = ""
    source: str = "flat"
    targets: tuple = ("striped", "noisy", "inverted-contrast")
    split_ratio: float = 0.7


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {
    "data": lambda exp: exp.data,
    "trainer": lambda exp: exp.trainer,
    "model": lambda exp: exp.trainer.model,
    "augment": lambda exp: exp.trainer.augment,
}
# trainer.* keys that live in nested dataclasses, not on TrainConfig itself
_NESTED_TRAINER_FIELDS = ("model", "augment")


def _coerce(key: str, raw, target_type):
    if target_type in (tuple, "tuple") or (hasattr(target_type, "__origin__")
                                           and target_type.__origin__ is tuple):
        if isinstance(raw, (list, tuple)):
            return tuple(raw)
        raise ConfigError(key, f"expected a list, got {raw!r}")
    if target_type is bool:
        if isinstance(raw, bool):
            return raw
        raise ConfigError(key, f"expected true/false, got {raw!r}")
    if target_type is int:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(key, f"expected an integer, got {raw!r}")
        if isinstance(raw, float) and not raw.is_integer():
            raise ConfigError(key, f"expected an integer, got {raw!r}")
        return int(raw)
    if target_type is float:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(key, f"expected a number, got {raw!r}")
        return float(raw)
    if target_type is str:
        return str(raw)
    return raw


def _field_types(obj) -> dict:
    return {f.name: f.type for f in fields(obj)}


def parse_value(text: str):
    """JSON literal if it parses, bare string otherwise."""
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines (comments with #) into a flat dict."""
    flat: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        flat[key.strip()] = parse_value(value)
    return flat


def apply_flat(exp: ExperimentConfig, flat: dict) -> ExperimentConfig:
    """Apply dotted-key overrides onto an experiment config, validating keys."""
    for key, raw in flat.items():
        parts = key.split(".")
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(key, f"unknown section; sections: {sorted(_SECTIONS)}")
        section, name = parts
        target = _SECTIONS[section](exp)
        types = _field_types(target)
        if name not in types or (section == "trainer" and name in _NESTED_TRAINER_FIELDS):
            raise ConfigError(key, "unknown key")
        value = raw if key == "trainer.mode" else _coerce(key, raw, _resolve_type(target, name))
        setattr(target, name, value)
    # re-run validation
    exp.trainer.__post_init__()
    return exp


def _resolve_type(obj, name: str):
    for f in fields(obj):
        if f.name == name:
            t = f.type
            if isinstance(t, str):
                return {"int": int, "float": float, "str": str, "bool": bool}.get(
                    t.split("|")[0].strip(), tuple if "tuple" in t else str)
            return t
    raise KeyError(name)


def to_flat(exp: ExperimentConfig) -> dict:
    """Flatten an experiment config to dotted keys with JSON-able values."""
    flat: dict = {}
    for section, getter in _SECTIONS.items():
        target = getter(exp)
        for f in fields(target):
            if section == "trainer" and f.name in _NESTED_TRAINER_FIELDS:
                continue
            value = getattr(target, f.name)
            if isinstance(value, tuple):
                value = list(value)
            flat[f"{section}.{f.name}"] = value
    return flat


def render_config_text(flat: dict) -> str:
    lines = []
    for key in sorted(flat):
        value = flat[key]
        rendered = json.dumps(value) if not isinstance(value, str) else value
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


def config_hash(exp_or_flat) -> str:
    flat = exp_or_flat if isinstance(exp_or_flat, dict) else to_flat(exp_or_flat)
    canonical = json.dumps(flat, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def experiment_from_flat(flat: dict) -> ExperimentConfig:
    return apply_flat(ExperimentConfig(), dict(flat))


def train_config_to_flat(config: TrainConfig) -> dict:
    exp = ExperimentConfig(trainer=config)
    flat = to_flat(exp)
    return {k: v for k, v in flat.items() if not k.startswith("data.")}


def train_config_from_flat(flat: dict) -> TrainConfig:
    exp = experiment_from_flat({k: v for k, v in flat.items() if not k.startswith("data.")})
    return exp.trainer
