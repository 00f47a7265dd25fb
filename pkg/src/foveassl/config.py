"""Run configuration: one flat record, stored as a sectioned ``key = value`` file.

Defaults are the full-scale constants, so a bare config reproduces the
reference recipe. ``desk()`` swaps in sizes that train on one CPU core.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .contrastive import EncoderConfig
from .evaluation import ProbeSettings
from .geometry import CropSpec
from .ingest import GazeMode
from .pairs import AugmentPolicy
from .train import TrainConfig

SEED_ENV = "FVSS_SEED"
GAZE_MODES = {"gaze": GazeMode.GROUND_TRUTH, "predicted": GazeMode.PREDICTOR, "center": GazeMode.CENTER}


class ConfigError(ValueError):
    pass


def _f(default, section, **kw):
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: type(default)(default), metadata={"section": section}, **kw)
    return field(default=default, metadata={"section": section}, **kw)


@dataclass
class RunConfig:
    # data
    resolution: int = _f(540, "data")
    crop: int = _f(224, "data")
    gaze_mode: str = _f("gaze", "data")
    source: str = _f("frames", "data")  # frames | video
    records_per_shard: int = _f(4096, "data")
    workers: int = _f(1, "data")
    # train
    delta_t: float = _f(15.0, "train")
    fps: int = _f(5, "train")
    tau: float = _f(0.1, "train")
    momentum: float = _f(0.996, "train")
    base_lr: float = _f(1.6, "train")
    batch_size: int = _f(512, "train")
    weight_decay: float = _f(1e-6, "train")
    warmup_fraction: float = _f(0.01, "train")
    epochs: int = _f(1, "train")
    steps: int = _f(0, "train")
    lars_momentum: float = _f(0.9, "train")
    trust_coefficient: float = _f(1e-3, "train")
    include_positive: bool = _f(True, "train")
    symmetric: bool = _f(False, "train")
    seed: int = _f(0, "train")
    seeds: list = _f([0], "train")
    prefetch: int = _f(0, "train")
    # encoder
    input_size: int = _f(224, "encoder")
    backbone: str = _f(",".join(EncoderConfig().backbone), "encoder")
    hidden: int = _f(4096, "encoder")
    out_dim: int = _f(256, "encoder")
    predictor_hidden: int = _f(0, "encoder")
    # augment
    scale: tuple = _f((0.2, 1.0), "augment")
    ratio: tuple = _f((3 / 4, 4 / 3), "augment")
    flip_p: float = _f(0.5, "augment")
    jitter_p: float = _f(0.8, "augment")
    brightness: float = _f(0.4, "augment")
    contrast: float = _f(0.4, "augment")
    saturation: float = _f(0.2, "augment")
    hue: float = _f(0.1, "augment")
    gray_p: float = _f(0.2, "augment")
    blur_p: tuple = _f((0.5, 0.1), "augment")
    blur_sigma: tuple = _f((0.1, 2.0), "augment")
    # probe
    probe_epochs: int = _f(100, "probe")
    probe_lr: float = _f(0.1, "probe")
    probe_batch: int = _f(256, "probe")
    probe_aug: int = _f(10, "probe")
    # paths
    data_dir: str = _f("", "paths")
    out_dir: str = _f("run", "paths")
    manifest: str = _f("", "paths")
    checkpoint: str = _f("", "paths")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.gaze_mode not in GAZE_MODES:
            raise ConfigError(f"gaze_mode must be one of {sorted(GAZE_MODES)}, got {self.gaze_mode!r}")
        if self.source not in ("frames", "video"):
            raise ConfigError(f"source must be frames or video, got {self.source!r}")
        if not 0 < self.crop <= self.resolution:
            raise ConfigError(f"crop {self.crop} must lie in (0, {self.resolution}]")
        if self.input_size > self.crop:
            raise ConfigError(f"input_size {self.input_size} exceeds the crop {self.crop}")
        if self.delta_t < 0:
            raise ConfigError("delta_t must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0 or self.steps < 0:
            raise ConfigError("batch_size, epochs and steps must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        try:
            self.policy()
            self.encoder()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        base = dict(resolution=64, crop=32, batch_size=64, epochs=4, delta_t=3.0, momentum=0.99,
                    input_size=32, hidden=128, out_dim=32, blur_sigma=(0.1, 2.0 * 32 / 224), probe_epochs=50,
                    probe_aug=4)
        base.update(overrides)
        return cls(**base)

    # -- views onto the module configs ---------------------------------------

    def crop_spec(self) -> CropSpec:
        return CropSpec(self.crop, self.resolution)

    def gaze_source_mode(self) -> GazeMode:
        return GAZE_MODES[self.gaze_mode]

    def encoder(self) -> EncoderConfig:
        tokens = tuple(t.strip() for t in self.backbone.split(",") if t.strip())
        return EncoderConfig(self.input_size, tokens, self.hidden, self.out_dim, self.predictor_hidden)

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(tuple(self.scale), tuple(self.ratio), self.input_size, self.flip_p,
                             self.jitter_p, self.brightness, self.contrast, self.saturation,
                             self.hue, self.gray_p, tuple(self.blur_p), tuple(self.blur_sigma))

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            encoder=self.encoder(), policy=self.policy(), delta_t=self.delta_t, fps=self.fps,
            batch_size=self.batch_size, epochs=self.epochs, steps=self.steps, tau=self.tau,
            momentum=self.momentum, base_lr=self.base_lr, weight_decay=self.weight_decay,
            warmup_fraction=self.warmup_fraction, lars_momentum=self.lars_momentum,
            trust_coefficient=self.trust_coefficient, include_positive=self.include_positive,
            symmetric=self.symmetric, seed=self.seed if seed is None else seed,
            prefetch=self.prefetch)

    def probe_settings(self) -> ProbeSettings:
        return ProbeSettings(self.input_size, self.probe_epochs, self.probe_lr, self.probe_batch,
                             self.probe_aug, self.seed)

    # -- text form -------------------------------------------------------------

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        sections: dict[str, list[str]] = {}
        for f in fields(self):
            sections.setdefault(f.metadata["section"], []).append(
                f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in sections.items())

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values = {}
        for section in parser.sections():
            for key, value in parser.items(section):
                values[key] = value
        return (base or cls()).with_strings(values)

    def with_strings(self, values: dict[str, str]) -> "RunConfig":
        """Apply overrides given as text, e.g. from a config file or the command line."""
        known = {f.name: f for f in fields(self)}
        changes = {}
        for key, text in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _parse(text, getattr(self, key), key)
        return self.replace(**changes)

    def with_env(self, environ=None) -> "RunConfig":
        env = os.environ if environ is None else environ
        if SEED_ENV in env:
            seed = _parse(env[SEED_ENV], 0, SEED_ENV)
            return self.replace(seed=seed, seeds=[seed])
        return self


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(float(t) for t in text.split(","))
        if isinstance(like, list):
            return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text
