"""Experiment configuration: a flat ``key = value`` text format.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Lists are comma separated, booleans are ``true``/``false``, and numbers may be
written as fractions (``prior_variance = 1/6``). Every key has a default and
unknown keys are rejected. The schema is :data:`SCHEMA`; ``lpsgld --help``
and the README list it with descriptions.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

EXPERIMENTS = ("gaussian-demo", "logreg", "mlp", "quant-check")
FORMATS = ("fixed", "block", "float")
METHODS = (
    "sgldfp",
    "sgdfp",
    "sgldlp_f",
    "sgdlp_f",
    "sgldlp_l",
    "vc_sgldlp_l",
    "sgdlp_l",
    "sgldlp_l_det",
)
DEFAULT_METHODS = {
    "gaussian-demo": ("sgldlp_f", "sgldlp_l", "vc_sgldlp_l"),
    "logreg": ("sgldfp", "sgdfp", "sgldlp_f", "sgdlp_f", "sgldlp_l", "vc_sgldlp_l", "sgdlp_l"),
    "mlp": ("sgldfp", "sgdfp", "sgldlp_f", "sgdlp_f", "sgldlp_l", "vc_sgldlp_l", "sgdlp_l"),
    "quant-check": (),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "gaussian-demo"
    seed: int = 0
    out: str = "results.csv"
    timing: bool = False
    # number format; dataset sweeps use W = int_bits + F for each F in sweep_bits
    format: str = "fixed"
    word_bits: int = 8
    frac_bits: int = 3
    int_bits: int = 2
    exp_bits: int = 8
    block_len: int = 64
    sweep_bits: list[int] = field(default_factory=lambda: [2, 3, 4, 6, 8])
    quant_w: str = "stochastic"
    quant_g: str = "stochastic"
    quant_a: str = "none"
    quant_e: str = "stochastic"
    # samplers
    methods: list[str] = field(default_factory=list)
    stepsizes: list[float] = field(default_factory=lambda: [1e-3, 1e-4])
    steps: int = 250_000
    burn_in: int = 50_000
    thin: int = 20
    gaussian_dim: int = 256
    replicates: int = 3
    hist_range: float = 6.0
    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 64
    schedule: str = "constant"
    cycles: int = 1
    samples: int = 20
    prior_variance: float = 1.0 / 6.0
    hidden: int = 100
    # data; an empty data_dir (or missing files) selects the synthetic set
    data_dir: str = ""
    train_size: int = 0
    test_size: int = 0
    synth_train: int = 10_000
    synth_test: int = 2_000
    synth_dim: int = 784
    synth_classes: int = 10
    synth_separation: float = 4.25
    synth_scale: float = 1.0 / 3.0
    # quant-check
    check_draws: int = 1_000_000
    check_frac_bits: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}, got {self.format!r}")
        for key in ("quant_w", "quant_g", "quant_a", "quant_e"):
            if getattr(self, key) not in ("none", "deterministic", "stochastic"):
                raise ConfigError(f"{key} must be none, deterministic or stochastic")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; expected a subset of {METHODS}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.schedule not in ("constant", "cyclical"):
            raise ConfigError("schedule must be constant or cyclical")
        positive = ("steps", "thin", "gaussian_dim", "replicates", "epochs", "batch_size", "samples",
                    "hidden", "synth_train", "synth_test", "synth_dim", "synth_classes", "check_draws",
                    "cycles", "block_len")
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if not 0 <= self.burn_in < self.steps:
            raise ConfigError("burn_in must satisfy 0 <= burn_in < steps")
        if self.lr <= 0 or self.prior_variance <= 0 or self.synth_scale <= 0 or any(a <= 0 for a in self.stepsizes):
            raise ConfigError("stepsizes, lr, prior_variance and synth_scale must be positive")

    @property
    def method_list(self) -> tuple[str, ...]:
        return tuple(self.methods) or DEFAULT_METHODS[self.experiment]

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


SCHEMA = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, kind: str, key: str):
    text = text.strip()
    try:
        if kind == "bool":
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from exc
    return text


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind = SCHEMA[key]
    if kind.startswith("list["):
        inner = kind[5:-1]
        return [_parse_scalar(part, inner, key) for part in text.split(",") if part.strip()]
    return _parse_scalar(text, kind, key)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {number}: duplicate key {key!r}")
        values[key] = parse_value(key, value)
    return (base or ExperimentConfig()).replace(**values)


def load_config(path: str | Path | None, overrides=(), **fixed) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides, then ``fixed``."""
    config = ExperimentConfig()
    if path is not None:
        config = parse_config_text(Path(path).read_text(), config)
    changes = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        changes[key] = parse_value(key, value)
    changes.update(fixed)
    return config.replace(**changes)
