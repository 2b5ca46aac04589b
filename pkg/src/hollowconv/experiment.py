"""Experiment configuration: flat ``key = value`` files, presets and overrides."""

from __future__ import annotations

import hashlib
from decimal import Decimal
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .configs import CONFIGS, ConvLSTMSpec, NetworkConfig, TemporalConvSpec, get_config


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "desk"
    model: str = "UNet"
    loss: str = "auto"                 # auto | combined | L1 | L2 | L3
    alpha: float = 0.1
    class_weights: tuple[float, ...] = (4.1, 1.4, 8.7)
    pos_weights: tuple[float, ...] = (25.7, 8.2, 55.0)
    optimizer: str = "masked-adam"     # masked-adam | masked-sgd
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_period: int = 500
    iterations: int = 2000
    batch: int = 2
    seq_len: int = 12
    seed: int = 0
    width: float = 0.25
    kernel_scale: float = 0.25         # applied to hollow / generated kernel sizes only
    size: int = 64
    phantom: str = "easy"
    n_train: int = 16
    n_test: int = 8
    data_seed: int = 1000
    dataset: str = ""                  # directory written by `synth`; empty = generate in memory
    out: str = "runs/default"
    eval_every: int = 500
    checkpoint_every: int = 0          # 0 = final checkpoint only
    mask_source: str = "annotation"    # annotation | annulus
    init_mu: float = 0.0
    init_sigma: float = 0.0            # 0 = 1/sqrt(fan-in over band positions)
    temporal: str = "none"             # none | K1xK2xK3, e.g. 5x3x3
    temporal_layers: int = 1
    bilstm: bool = False
    bilstm_hidden: int = 8
    bilstm_kernel: int = 3
    bilstm_layers: int = 1

    def __post_init__(self):
        if self.model not in CONFIGS:
            raise ConfigError(f"unknown model {self.model!r}; valid: {', '.join(CONFIGS)}")
        if self.loss not in ("auto", "combined", "L1", "L2", "L3"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("masked-adam", "masked-sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.mask_source not in ("annotation", "annulus"):
            raise ConfigError(f"unknown mask source {self.mask_source!r}")
        for key in ("iterations", "batch", "seq_len", "lr_period", "size", "n_train", "n_test"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.lr <= 0 or self.width <= 0 or self.kernel_scale <= 0:
            raise ConfigError("lr, width and kernel_scale must be positive")
        if self.temporal != "none":
            self.temporal_spec()
        if self.bilstm:
            self.bilstm_spec()

    @property
    def loss_mode(self) -> str:
        if self.loss != "auto":
            return self.loss
        mode = CONFIGS[self.model].loss_mode
        return mode

    @property
    def spatiotemporal(self) -> bool:
        return self.temporal != "none" or self.bilstm

    def temporal_spec(self) -> TemporalConvSpec | None:
        if self.temporal == "none":
            return None
        try:
            kernel = tuple(int(v) for v in self.temporal.lower().split("x"))
        except ValueError:
            raise ConfigError(f"temporal kernel must look like 5x3x3, got {self.temporal!r}") from None
        if len(kernel) != 3:
            raise ConfigError(f"temporal kernel needs three extents, got {self.temporal!r}")
        try:
            return TemporalConvSpec(c_out=max(1, round(32 * self.width)), kernel=kernel, layers=self.temporal_layers)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def bilstm_spec(self) -> ConvLSTMSpec | None:
        if not self.bilstm:
            return None
        try:
            return ConvLSTMSpec(self.bilstm_hidden, self.bilstm_kernel, self.bilstm_layers, True)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def network_config(self) -> NetworkConfig:
        cfg = get_config(self.model, self.width, self.temporal_spec(), self.bilstm_spec())
        if self.kernel_scale != 1.0:
            layers = tuple(
                replace(s, kernel_size=scale_kernel(s.kernel_size, self.kernel_scale))
                if s.kernel_kind != "dense" else s
                for s in cfg.layers
            )
            cfg = replace(cfg, layers=layers)
        return cfg

    def lr_at(self, iteration: int) -> float:
        return lr_schedule(self.lr, self.lr_decay, self.lr_period, iteration)

    def resolved(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """Identity of the experiment; the output location is not part of it."""
        text = "".join(line + "\n" for line in self.resolved().splitlines() if not line.startswith("out = "))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def scale_kernel(k: int, scale: float) -> int:
    return max(3, int(round(k * scale)))


def lr_schedule(base: float, decay: float, period: int, iteration: int) -> float:
    """base * decay ** floor(iteration / period).

    Evaluated in decimal on the configured literals and rounded once, so
    1e-3 * 0.1 ** 2 is exactly 1e-05 rather than 1.0000000000000003e-05.
    """
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    steps = iteration // period
    return float(Decimal(repr(base)) * Decimal(repr(decay)) ** steps)


PRESETS: dict[str, dict[str, object]] = {
    "full": dict(iterations=60000, lr=1e-3, lr_decay=0.1, lr_period=15000, batch=8, width=1.0,
                  kernel_scale=1.0, size=256, eval_every=5000),
    "desk": dict(iterations=2000, lr=1e-3, lr_decay=0.1, lr_period=500, batch=2, width=0.25,
                 kernel_scale=0.25, size=64, eval_every=500),
}

FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key: str, text: str):
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind.startswith("tuple"):
            return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {key} ({kind}): {text!r}") from None
    return text


def parse_lines(lines, source: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        check_key(key)
        out[key] = value
    return out


def check_key(key: str) -> None:
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(FIELD_TYPES)}")


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Preset defaults, then the file, then ``--set key=value`` overrides."""
    raw: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        raw.update(parse_lines(text.splitlines(), str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        raw.update(parse_lines([item], "--set"))
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; valid: {', '.join(PRESETS)}")
    values = dict(PRESETS[preset])
    values.update({k: parse_value(k, v) for k, v in raw.items()})
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
