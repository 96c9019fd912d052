"""INI experiment configuration: sections, defaults, validation.

Every key has a default, so an empty file is a valid configuration. Unknown
sections or keys are rejected rather than ignored; typos should fail loudly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .metrics import MetricConfig
from .prototypes import HEADS


@dataclass
class DataSection:
    n: int = 32
    size: int = 16
    seed: int = 0


@dataclass
class DiffusionSection:
    timesteps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_width: int = 32
    time_dim: int = 64
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 8
    traj_stride: int = 5


@dataclass
class ProtoSection:
    m: int = 10
    lambda_div: float = 0.1
    heads: tuple[str, ...] = HEADS
    epochs: int = 40
    lr: float = 0.05
    feat_hw: int = 8
    feat_dim: int = 16
    extractor_epochs: int = 20
    extractor_lr: float = 1e-3


@dataclass
class MetricsSection:
    peak: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    window: int = 7
    psnr_cap: float = 100.0
    lpips_seed: int = 7
    dice_threshold: float = 0.2

    def to_metric_config(self) -> MetricConfig:
        return MetricConfig(peak=self.peak, k1=self.k1, k2=self.k2,
                            window=self.window, psnr_cap=self.psnr_cap,
                            lpips_seed=self.lpips_seed)


@dataclass
class OutputSection:
    dir: str = "runs/exp"


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    prototypes: ProtoSection = field(default_factory=ProtoSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def out_dir(self) -> Path:
        return Path(self.output.dir)


def _parse_heads(raw: str) -> tuple[str, ...]:
    heads = tuple(h.strip() for h in raw.split(",") if h.strip())
    if not heads:
        raise ConfigError("heads list is empty")
    for h in heads:
        if h not in HEADS:
            raise ConfigError(f"unknown head {h!r}; choose from {HEADS}")
    if len(set(heads)) != len(heads):
        raise ConfigError("duplicate head in heads list")
    return heads


_SCHEMA = {
    "data": {"n": int, "size": int, "seed": int},
    "diffusion": {"timesteps": int, "beta_start": float, "beta_end": float,
                  "base_width": int, "time_dim": int, "epochs": int,
                  "lr": float, "batch_size": int, "traj_stride": int},
    "prototypes": {"m": int, "lambda_div": float, "heads": _parse_heads,
                   "epochs": int, "lr": float, "feat_hw": int, "feat_dim": int,
                   "extractor_epochs": int, "extractor_lr": float},
    "metrics": {"peak": float, "k1": float, "k2": float, "window": int,
                "psnr_cap": float, "lpips_seed": int, "dice_threshold": float},
    "output": {"dir": str},
}


def _positive(value, name: str):
    if value <= 0:
        raise ConfigError(f"{name} must be positive, got {value}")
    return value


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    d, df, pr, me = cfg.data, cfg.diffusion, cfg.prototypes, cfg.metrics
    _positive(d.n, "data.n")
    if d.size < 16:
        raise ConfigError(f"data.size must be >= 16, got {d.size}")
    if d.size % 2 != 0:
        raise ConfigError("data.size must be even (the denoiser halves it)")
    _positive(df.timesteps, "diffusion.timesteps")
    if not (0.0 < df.beta_start <= df.beta_end < 1.0):
        raise ConfigError("require 0 < beta_start <= beta_end < 1")
    for name in ("base_width", "time_dim", "epochs", "batch_size", "traj_stride"):
        _positive(getattr(df, name), f"diffusion.{name}")
    _positive(df.lr, "diffusion.lr")
    if df.time_dim % 2 != 0:
        raise ConfigError("diffusion.time_dim must be even")
    _positive(pr.m, "prototypes.m")
    if pr.lambda_div < 0:
        raise ConfigError("prototypes.lambda_div must be non-negative")
    for name in ("epochs", "feat_hw", "feat_dim", "extractor_epochs"):
        _positive(getattr(pr, name), f"prototypes.{name}")
    _positive(pr.lr, "prototypes.lr")
    _positive(pr.extractor_lr, "prototypes.extractor_lr")
    if d.size % pr.feat_hw != 0 or (d.size // pr.feat_hw) & (d.size // pr.feat_hw - 1):
        raise ConfigError("data.size must be feat_hw times a power of two")
    if not 0.0 < me.dice_threshold < 1.0:
        raise ConfigError("metrics.dice_threshold must lie in (0, 1)")
    try:
        cfg.metrics.to_metric_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg.output.dir:
        raise ConfigError("output.dir must be non-empty")
    return cfg


def load_config(path, out_dir: str | None = None,
                seed: int | None = None) -> ExperimentConfig:
    """Parse, apply CLI overrides, validate. Raises ConfigError on any problem."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        with open(p, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc

    cfg = ExperimentConfig()
    sections = {"data": cfg.data, "diffusion": cfg.diffusion,
                "prototypes": cfg.prototypes, "metrics": cfg.metrics,
                "output": cfg.output}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            convert = _SCHEMA[section][key]
            try:
                value = convert(raw)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"bad value for {section}.{key}: {raw!r}") from exc
            setattr(sections[section], key, value)

    if out_dir is not None:
        cfg.output.dir = out_dir
    if seed is not None:
        cfg.data.seed = int(seed)
    return validate_config(cfg)
