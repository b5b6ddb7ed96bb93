"""Run configuration: dataclasses, validation and the INI-style file format.

A config file has up to two sections::

    [train]
    alpha = 0.5
    epochs = 20

    [data]
    source = synthetic
    num_classes = 3

Any key left out takes its default. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
import typing
from dataclasses import dataclass, fields

MODES = ("adautomix", "input-mixup", "vanilla")


class ConfigError(ValueError):
    """Bad configuration; ``field`` names the offending key when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = ""
        if field:
            where = f"[{field}]"
            if line is not None:
                where += f" (line {line})"
            where += " "
        super().__init__(where + message)
        self.field = field
        self.line = line


@dataclass
class TrainConfig:
    mode: str = "adautomix"
    alpha: float = 0.5
    beta: float = 0.3
    lam_concentration: float = 1.0
    n_mix: int = 3
    feature_layer: int = 3
    xi_start: float = 0.999
    lr: float = 0.1
    # None resolves to lr / 10
    gen_lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 100
    # None resolves to batch_size // n_mix
    sets_per_batch: int | None = None
    t1: int = 1
    t2: int = 1
    epochs: int = 200
    seed: int = 0
    cosine_sign: float = 1.0
    augment_flip: bool = True
    augment_crop: bool = True
    crop_padding: int = 4
    widths: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: int = 1
    max_skips: int = 3
    checkpoint_every: int = 0

    def resolved(self) -> "TrainConfig":
        cfg = dataclasses.replace(self)
        if cfg.gen_lr is None:
            cfg.gen_lr = cfg.lr / 10.0
        if cfg.sets_per_batch is None:
            cfg.sets_per_batch = cfg.batch_size // cfg.n_mix
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}", "mode")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"must lie in [0, 1], got {v}", name)
        if not 0.0 <= self.xi_start <= 1.0:
            raise ConfigError(f"must lie in [0, 1], got {self.xi_start}", "xi_start")
        if not self.lam_concentration > 0:
            raise ConfigError("must be positive", "lam_concentration")
        if self.lr <= 0:
            raise ConfigError("must be positive", "lr")
        if self.gen_lr is not None and self.gen_lr <= 0:
            raise ConfigError("must be positive", "gen_lr")
        if self.mode == "adautomix" and self.n_mix < 2:
            raise ConfigError("adautomix needs at least 2 images per mix set", "n_mix")
        if self.mode == "input-mixup" and self.n_mix != 2:
            raise ConfigError("input-mixup mixes exactly 2 images", "n_mix")
        if self.n_mix < 1:
            raise ConfigError("must be >= 1", "n_mix")
        if self.batch_size < self.n_mix:
            raise ConfigError("batch_size must be >= n_mix", "batch_size")
        if self.sets_per_batch is not None and not (
            1 <= self.sets_per_batch <= self.batch_size // self.n_mix
        ):
            raise ConfigError("must lie in [1, batch_size // n_mix]", "sets_per_batch")
        if self.t1 < 1:
            raise ConfigError("must be >= 1", "t1")
        if self.t2 < 0:
            raise ConfigError("must be >= 0", "t2")
        if self.epochs < 1:
            raise ConfigError("must be >= 1", "epochs")
        if self.cosine_sign not in (1.0, -1.0):
            raise ConfigError("must be 1 or -1", "cosine_sign")
        if len(self.widths) < 4:
            raise ConfigError("need at least 4 stages", "widths")
        if not 1 <= self.feature_layer <= len(self.widths):
            raise ConfigError("must index an existing stage", "feature_layer")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("must be nonnegative", "momentum")


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    path: str = ""
    num_classes: int = 3
    channels: int = 3
    image_size: int = 16
    n_train: int = 300
    n_test: int = 300
    noise: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.source not in ("synthetic", "cifar"):
            raise ConfigError("must be 'synthetic' or 'cifar'", "source")
        if self.source == "cifar" and not self.path:
            raise ConfigError("cifar source needs a path", "path")
        if self.source == "synthetic" and self.num_classes < 2:
            raise ConfigError("need at least 2 classes", "num_classes")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("split sizes must be positive", "n_train")
        if self.channels not in (1, 3):
            raise ConfigError("must be 1 or 3", "channels")
        if self.image_size < 4:
            raise ConfigError("must be >= 4", "image_size")
        if self.noise < 0:
            raise ConfigError("must be nonnegative", "noise")
        if self.source == "cifar" and (self.channels, self.image_size) != (3, 32):
            raise ConfigError("cifar images are 3x32x32", "image_size")


_SECTIONS = {"train": TrainConfig, "data": DatasetSpec}


def _line_of(text: str, key: str) -> int | None:
    for i, raw in enumerate(text.splitlines(), 1):
        if raw.split("=", 1)[0].split(":", 1)[0].strip() == key:
            return i
    return None


def _convert(name: str, raw: str, annotation):
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)][0]
        if raw.strip().lower() in ("", "none"):
            return None
        return _convert(name, raw, inner)
    if annotation in (tuple[int, ...],):
        try:
            return tuple(int(p) for p in raw.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"expected a list of integers, got {raw!r}", name) from None
    if annotation is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}", name)
    if annotation is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}", name) from None
    if annotation is float:
        try:
            value = float(_fraction(raw))
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}", name) from None
        if not math.isfinite(value):
            raise ConfigError("must be finite", name)
        return value
    return raw.strip()


def _fraction(raw: str) -> float:
    raw = raw.strip()
    if "/" in raw:
        num, den = raw.split("/", 1)
        return float(num) / float(den)
    return float(raw)


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def apply_overrides(train: TrainConfig, data: DatasetSpec, overrides: list[str]) -> tuple[TrainConfig, DatasetSpec]:
    """Apply ``section.key=value`` (or bare ``key=value``) overrides."""
    objs = {"train": train, "data": data}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
        else:
            section = "train" if key in _hints(TrainConfig) else "data"
        if section not in objs:
            raise ConfigError(f"unknown section {section!r}", key)
        hints = _hints(type(objs[section]))
        if key not in hints:
            raise ConfigError(f"unknown config key {key!r}", key)
        setattr(objs[section], key, _convert(key, value, hints[key]))
    return objs["train"], objs["data"]


def parse_config(text: str, overrides: list[str] | None = None) -> tuple[TrainConfig, DatasetSpec]:
    """Parse and validate a config document; returns fully resolved objects."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None
    values: dict[str, dict] = {"train": {}, "data": {}}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r}", section, _line_of(text, f"[{section}]"))
        hints = _hints(_SECTIONS[section])
        for key, raw in parser.items(section):
            if key not in hints:
                raise ConfigError(f"unknown config key {key!r}", key, _line_of(text, key))
            try:
                values[section][key] = _convert(key, raw, hints[key])
            except ConfigError as exc:
                raise ConfigError(str(exc).split("] ", 1)[-1], key, _line_of(text, key)) from None
    train = TrainConfig(**values["train"])
    data = DatasetSpec(**values["data"])
    if overrides:
        train, data = apply_overrides(train, data, overrides)
    try:
        train = train.resolved()
        data.validate()
    except ConfigError as exc:
        if exc.field and exc.line is None:
            raise ConfigError(str(exc).split("] ", 1)[-1], exc.field, _line_of(text, exc.field)) from None
        raise
    return train, data


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def serialize_config(train: TrainConfig, data: DatasetSpec) -> str:
    """Inverse of :func:`parse_config`; every field is written explicitly."""
    out = io.StringIO()
    for name, obj in (("train", train), ("data", data)):
        out.write(f"[{name}]\n")
        for f in fields(obj):
            out.write(f"{f.name} = {_format(getattr(obj, f.name))}\n")
        out.write("\n")
    return out.getvalue()
