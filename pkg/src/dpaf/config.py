"""Run configuration: one YAML file covering the model, the synthetic data
generator, the loss weights, the schedule, and the training loop.

Unknown sections or keys are rejected so typos fail loudly, and to_dict()
materializes every default, so a saved effective-config file is complete and
re-loadable.
"""

import dataclasses
from dataclasses import dataclass, field

import yaml

from . import losses, network, rain, training


class ConfigError(ValueError):
    """A configuration file or value the run cannot proceed with."""


@dataclass
class DataConfig:
    """Synthetic dataset shape for gen-data and ablation runs."""

    n_pairs: int = 20
    image_size: tuple = (64, 64)
    model: str = "heavy"
    seed: int = 0
    ranges: rain.RainRanges = field(default_factory=rain.RainRanges)

    def validate(self):
        if self.n_pairs < 1:
            raise ConfigError(f"data.n_pairs must be >= 1, got {self.n_pairs}")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ConfigError(f"data.image_size must be [h, w], got "
                              f"{self.image_size}")
        if self.model not in ("heavy", "additive"):
            raise ConfigError(f"data.model must be 'heavy' or 'additive', "
                              f"got {self.model!r}")
        if self.seed < 0:
            raise ConfigError(f"data.seed must be >= 0, got {self.seed}")

    def to_dict(self):
        return {"n_pairs": self.n_pairs, "image_size": list(self.image_size),
                "model": self.model, "seed": self.seed,
                "ranges": self.ranges.to_dict()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        ranges = d.pop("ranges", None)
        cfg = _strict_build(cls, d, "data")
        if ranges is not None:
            cfg.ranges = rain.RainRanges.from_dict(ranges)
        cfg.image_size = tuple(cfg.image_size)
        cfg.validate()
        return cfg


@dataclass
class LossConfig:
    """Combined-objective weights plus the perceptual extractor identity."""

    w_mse: float = 1.0
    w_ssim: float = 0.2
    w_perp: float = 0.04
    perceptual_tap: int = 3
    perceptual_seed: int = 0

    def weights(self):
        return losses.LossWeights(self.w_mse, self.w_ssim, self.w_perp)

    def extractor(self):
        """Build the frozen extractor, or None when it carries no weight."""
        if self.w_perp <= 0:
            return None
        return losses.PerceptualExtractor(tap=self.perceptual_tap,
                                          seed=self.perceptual_seed)

    def validate(self):
        self.weights().validate()

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        cfg = _strict_build(cls, d, "loss")
        cfg.validate()
        return cfg


@dataclass
class TrainConfig:
    """Loop shape: batching, cropping, epochs, seeding."""

    batch: int = 8
    patch: int = 32
    epochs: int = 20
    seed: int = 0
    hflip: bool = True
    checkpoint_every: int = 1
    grad_clip: float = None

    def validate(self):
        if self.batch < 1 or self.epochs < 1 or self.checkpoint_every < 1:
            raise ConfigError(f"train.batch/epochs/checkpoint_every must be "
                              f">= 1, got {self}")
        if self.patch is not None and self.patch < 1:
            raise ConfigError(f"train.patch must be null or >= 1, got "
                              f"{self.patch}")
        if self.seed < 0:
            raise ConfigError(f"train.seed must be >= 0, got {self.seed}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"train.grad_clip must be null or positive, "
                              f"got {self.grad_clip}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        cfg = _strict_build(cls, d, "train")
        cfg.validate()
        return cfg


@dataclass
class PathsConfig:
    """Default locations; command-line flags override these."""

    data: str = None
    out: str = None

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _strict_build(cls, d, "paths")


@dataclass
class RunConfig:
    model: network.ModelConfig = field(default_factory=network.ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: training.Schedule = field(default_factory=training.Schedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self):
        return {"model": self.model.to_dict(), "data": self.data.to_dict(),
                "loss": self.loss.to_dict(),
                "schedule": self.schedule.to_dict(),
                "train": self.train.to_dict(), "paths": self.paths.to_dict()}

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError(f"config root must be a mapping, got "
                              f"{type(d).__name__}")
        sections = {"model": network.ModelConfig, "data": DataConfig,
                    "loss": LossConfig, "schedule": training.Schedule,
                    "train": TrainConfig, "paths": PathsConfig}
        unknown = sorted(set(d) - set(sections))
        if unknown:
            raise ConfigError(f"unknown config section {unknown[0]!r}")
        kwargs = {}
        for name, section_cls in sections.items():
            if name not in d or d[name] is None:
                continue
            try:
                kwargs[name] = section_cls.from_dict(d[name])
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"section {name!r}: {exc}") from exc
        return cls(**kwargs)


def _strict_build(cls, mapping, label):
    if not isinstance(mapping, dict):
        raise ConfigError(f"section {label!r} must be a mapping, got "
                          f"{type(mapping).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"section {label!r}: unknown key {unknown[0]!r}")
    return cls(**mapping)


def load_config(path):
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return RunConfig.from_dict(raw if raw is not None else {})


def save_config(path, cfg):
    """Write the fully materialized configuration (every default explicit)."""
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
