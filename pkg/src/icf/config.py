"""Experiment configuration: flat ``section.key = value`` files plus flag overrides.

Example file::

    # basic experiment, stronger policy learning rate
    env.variant = basic
    training.steps = 20000
    training.lambda = 0.1

Every key has a default, so an empty file is a complete configuration.
Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .environments import EnvConfig, EnvConfigError
from .models import ModelConfig, ModelShapeError
from .selectivity import SelectivityConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelOptions:
    """Model knobs exposed to the user; the rest is derived from the environment."""

    variant: str = "auto"  # auto | shared | separate
    n_features: int = 0  # 0 = 4 for basic, 8 for extended
    conv_channels: int = 16
    conv_stride: int = 1
    conv_padding: str = "same"
    fc_units: int = 32
    hidden_units: int = 64
    policy_grad_into_trunk: bool = True
    allow_mismatch: bool = False


@dataclass(frozen=True)
class SelectivityOptions:
    mode: str = "auto"  # auto | directed | undirected
    denom_epsilon: float = 1e-8
    log_floor_epsilon: float = 1e-8


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "basic"
    output_dir: str = "runs/basic"
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelOptions = field(default_factory=ModelOptions)
    selectivity: SelectivityOptions = field(default_factory=SelectivityOptions)
    training: TrainConfig = field(default_factory=TrainConfig)

    # -- derived objects ------------------------------------------------------
    def model_variant(self) -> str:
        if self.model.variant != "auto":
            return self.model.variant
        return "shared" if self.env.variant == "basic" else "separate"

    def selectivity_mode(self) -> str:
        if self.selectivity.mode != "auto":
            return self.selectivity.mode
        return "directed"

    def model_config(self) -> ModelConfig:
        n = self.model.n_features or (4 if self.env.variant == "basic" else 8)
        m = self.model
        return ModelConfig(
            variant=self.model_variant(), obs_shape=self.env.obs_shape, n_features=n,
            num_actions=self.env.num_actions, conv_channels=m.conv_channels,
            conv_stride=m.conv_stride, conv_padding=m.conv_padding, fc_units=m.fc_units,
            hidden_units=m.hidden_units, policy_grad_into_trunk=m.policy_grad_into_trunk,
            seed=self.training.seed)

    def selectivity_config(self) -> SelectivityConfig:
        return SelectivityConfig(mode=self.selectivity_mode(),
                                 denom_epsilon=self.selectivity.denom_epsilon,
                                 log_floor_epsilon=self.selectivity.log_floor_epsilon,
                                 lam=self.training.lam)

    def validate(self) -> None:
        expected = "shared" if self.env.variant == "basic" else "separate"
        if self.model_variant() != expected and not self.model.allow_mismatch:
            raise ConfigError(
                f"model.variant={self.model_variant()} with env.variant={self.env.variant}; "
                "set model.allow_mismatch=true to force it")
        if self.model.variant not in ("auto", "shared", "separate"):
            raise ConfigError(f"model.variant: unknown value {self.model.variant!r}")
        if self.selectivity.mode not in ("auto", "directed", "undirected"):
            raise ConfigError(f"selectivity.mode: unknown value {self.selectivity.mode!r}")
        try:
            self.model_config()
            self.selectivity_config()
        except (ModelShapeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


# key -> (section attribute or None for top level, field name)
_SECTIONS = {"env": EnvConfig, "model": ModelOptions, "selectivity": SelectivityOptions,
             "training": TrainConfig}
_RENAMED = {("training", "lambda"): "lam"}
_TOP_LEVEL = {"experiment.name": "name", "experiment.output_dir": "output_dir"}


def _keymap() -> dict[str, tuple[str | None, str, type]]:
    out: dict[str, tuple[str | None, str, type]] = {}
    for key, attr in _TOP_LEVEL.items():
        out[key] = (None, attr, str)
    for section, cls in _SECTIONS.items():
        inverse = {v: k for (s, k), v in _RENAMED.items() if s == section}
        defaults = cls()
        for f in fields(cls):
            out[f"{section}.{inverse.get(f.name, f.name)}"] = (section, f.name,
                                                               type(getattr(defaults, f.name)))
    return out


KEYS = _keymap()


def _convert(key: str, raw: str, typ: type) -> Any:
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def apply_overrides(config: ExperimentConfig, pairs: list[tuple[str, str]],
                    source: str = "flags") -> ExperimentConfig:
    """Apply ``(key, raw value)`` pairs in order; later pairs win."""
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    for key, raw in pairs:
        if key not in KEYS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        section, attr, typ = KEYS[key]
        value = _convert(key, raw, typ)
        if section is None:
            top[attr] = value
        else:
            sections[section][attr] = value
    try:
        kw = {s: replace(getattr(config, s), **vals) for s, vals in sections.items() if vals}
        out = replace(config, **top, **kw)
    except (EnvConfigError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    out.validate()
    return out


def parse_text(text: str, source: str = "<string>") -> list[tuple[str, str]]:
    pairs = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = lineno
        pairs.append((key, value))
    return pairs


def parse_flags(argv: list[str]) -> list[tuple[str, str]]:
    """``--section.key value`` or ``--section.key=value`` pairs."""
    pairs = []
    i = 0
    while i < len(argv):
        arg = argv[i]
        if not arg.startswith("--") or len(arg) < 3:
            raise ConfigError(f"unexpected argument {arg!r}")
        body = arg[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(argv):
                raise ConfigError(f"flag {arg} needs a value")
            key, value = body, argv[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def parse_config(path=None, flags: list[str] | None = None) -> ExperimentConfig:
    """Defaults, then the file (if any), then flag overrides."""
    config = ExperimentConfig()
    pairs: list[tuple[str, str]] = []
    source = "flags"
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        pairs += parse_text(text, str(path))
        source = str(path)
    flag_pairs = parse_flags(flags or [])
    config = apply_overrides(config, pairs, source)
    return apply_overrides(config, flag_pairs, "flags")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(config: ExperimentConfig) -> str:
    lines = []
    for key, (section, attr, _) in KEYS.items():
        obj = config if section is None else getattr(config, section)
        lines.append(f"{key} = {_format_value(getattr(obj, attr))}")
    return "\n".join(lines) + "\n"
