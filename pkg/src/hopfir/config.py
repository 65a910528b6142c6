"""Model and training configuration, plus the line-based config file format.

Config files are ``key = value`` lines with ``#`` comments. A single ``seed``
key seeds both model initialization and training streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

__all__ = [
    "ConfigError", "HopFIRConfig", "TrainConfig",
    "parse_config", "serialize_config", "apply_overrides", "config_dict",
]

HA_VARIANTS = ("HSS", "SSS", "SHH")
MODULE_MODES = ("gcn_only", "hopgcn_only", "hopgcn_ijr", "hopgcn_hgf", "full")
ACTIVATIONS = ("relu", "prelu", "leakyrelu")
REGIMES = ("gt2d", "detected2d")


class ConfigError(ValueError):
    pass


@dataclass
class HopFIRConfig:
    """Architecture hyperparameters covering every ablation axis."""

    channels: int = 128
    hops: int = 3
    blocks: int = 3
    arrangement: str = "HHI"
    ha_variant: str = "HSS"
    with_projection: bool = False
    heads: int = 4
    dropout: float = 0.5
    activation: str = "prelu"
    module_mode: str = "full"
    reduction: tuple = (2, 4, 4, 4)  # per-hop output dim divisors of `channels`
    seed: int = 0

    def validate(self):
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if not 1 <= self.hops <= 4:
            raise ConfigError(f"hops must be in [1, 4], got {self.hops}")
        if self.blocks < 1:
            raise ConfigError("blocks must be positive")
        if not self.arrangement or set(self.arrangement) - {"H", "I"}:
            raise ConfigError(f"arrangement must be a non-empty string over H/I, got {self.arrangement!r}")
        if self.ha_variant not in HA_VARIANTS:
            raise ConfigError(f"ha_variant must be one of {HA_VARIANTS}, got {self.ha_variant!r}")
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} must divide by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.module_mode not in MODULE_MODES:
            raise ConfigError(f"module_mode must be one of {MODULE_MODES}, got {self.module_mode!r}")
        if len(self.reduction) < self.hops:
            raise ConfigError("reduction schedule shorter than hop count")
        for k in range(self.hops):
            div = self.reduction[k]
            if div < 1 or self.channels % div:
                raise ConfigError(
                    f"channels {self.channels} not divisible by reduction divisor {div} (hop {k + 1})")
        if self.channels % 2:
            raise ConfigError("channels must be even (global feature uses channels/2)")
        if self.module_mode in ("full", "hopgcn_hgf") and "H" not in self.arrangement:
            raise ConfigError(f"module_mode {self.module_mode!r} needs at least one H slot")
        return self

    def hop_dims(self):
        """Reduced feature width per hop, from the divisor schedule."""
        return tuple(self.channels // self.reduction[k] for k in range(self.hops))


@dataclass
class TrainConfig:
    """Optimizer regime and schedule; defaults follow the ground-truth-2D regime."""

    regime: str = "gt2d"
    initial_lr: float = 0.001
    decay_factor: float = 0.90
    decay_every_epochs: int = 4
    first_epochs_factor: float | None = None
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    eval_every: int = 1
    weight_decay: float = 0.0
    grad_clip: float | None = None

    @classmethod
    def for_regime(cls, regime, **overrides):
        if regime == "gt2d":
            base = cls(regime="gt2d", initial_lr=0.001, decay_factor=0.90,
                       decay_every_epochs=4, first_epochs_factor=None, batch_size=64)
        elif regime == "detected2d":
            base = cls(regime="detected2d", initial_lr=0.006, decay_factor=0.95,
                       decay_every_epochs=4, first_epochs_factor=0.2, batch_size=256)
        else:
            raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
        return replace(base, **overrides)

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must be in (0, 1]")
        if self.first_epochs_factor is not None and not 0 < self.first_epochs_factor <= 1:
            raise ConfigError("first_epochs_factor must be in (0, 1]")
        if self.decay_every_epochs < 1:
            raise ConfigError("decay_every_epochs must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        return self


# ---------------------------------------------------------------------------
# key = value serialization


def _parse_bool(text):
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_tuple(text):
    return tuple(int(p.strip()) for p in text.split(","))


def _parse_opt_float(text):
    return None if text.lower() == "none" else float(text)


def _show(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


# key -> (which config, attribute, parser)
_MODEL_KEYS = {
    "channels": int, "hops": int, "blocks": int, "arrangement": str,
    "ha_variant": str, "with_projection": _parse_bool, "heads": int,
    "dropout": float, "activation": str, "module_mode": str,
    "reduction": _parse_tuple,
}
_TRAIN_KEYS = {
    "regime": str, "initial_lr": float, "decay_factor": float,
    "decay_every_epochs": int, "first_epochs_factor": _parse_opt_float,
    "batch_size": int, "epochs": int, "eval_every": int,
    "weight_decay": float, "grad_clip": _parse_opt_float,
}


def parse_config(text):
    """Parse config text into validated (HopFIRConfig, TrainConfig)."""
    model = HopFIRConfig()
    train = TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key == "seed":
                model.seed = train.seed = int(value)
            elif key in _MODEL_KEYS:
                setattr(model, key, _MODEL_KEYS[key](value))
            elif key in _TRAIN_KEYS:
                setattr(train, key, _TRAIN_KEYS[key](value))
            else:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from None
    model.validate()
    train.validate()
    return model, train


def serialize_config(model, train):
    """Render configs in canonical form: fixed key order, one 'key = value' per line."""
    lines = [f"seed = {model.seed}"]
    for key in _MODEL_KEYS:
        lines.append(f"{key} = {_show(getattr(model, key))}")
    for key in _TRAIN_KEYS:
        lines.append(f"{key} = {_show(getattr(train, key))}")
    return "\n".join(lines) + "\n"


def apply_overrides(model, train, overrides):
    """Apply repeated ``key=value`` override strings (highest precedence)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        try:
            if key == "seed":
                model.seed = train.seed = int(value)
            elif key in _MODEL_KEYS:
                setattr(model, key, _MODEL_KEYS[key](value))
            elif key in _TRAIN_KEYS:
                setattr(train, key, _TRAIN_KEYS[key](value))
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from None
    model.validate()
    train.validate()
    return model, train


def config_dict(model, train):
    """Flat dict of the resolved configuration (for manifests and reports)."""
    out = {"seed": model.seed}
    for key in _MODEL_KEYS:
        value = getattr(model, key)
        out[key] = list(value) if isinstance(value, tuple) else value
    for key in _TRAIN_KEYS:
        out[key] = getattr(train, key)
    return out
