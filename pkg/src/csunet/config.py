"""Run configuration: INI file with ``[model]``, ``[train]``, ``[data]``, ``[output]`` sections.

Values are plain text; tuples are comma separated, booleans are
``true``/``false``.  Unknown sections or keys are rejected.  Dotted
``section.key=value`` overrides are applied after the file is parsed.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .network import ModelConfig, tiny_config
from .tensor import ConfigError


@dataclass
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 4
    warmup_epochs: int = 3
    weight_decay: float = 5e-4
    seed: int = 0
    augment_flip: bool = True
    augment_rotate: bool = True
    ce_weight: float = 0.5
    hd_percentile: float = 95.0


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "directory"
    path: str = ""  # directory with train/ and val/ subfolders when source = directory
    train_samples: int = 200
    val_samples: int = 50
    data_seed: int = 0
    class_names: tuple[str, ...] = ()


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=tiny_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/tiny"

    def class_names(self) -> list[str]:
        k = self.model.num_classes
        names = list(self.data.class_names)
        if names and len(names) != k:
            raise ConfigError(f"data.class_names: {len(names)} names for {k} classes")
        return names or ["background"] + [f"class_{i}" for i in range(1, k)]

    def validate(self) -> "RunConfig":
        self.model.validate()
        t, d = self.train, self.data
        if t.epochs < 1:
            raise ConfigError("train.epochs: must be >= 1")
        if t.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if t.lr < 0:
            raise ConfigError("train.lr: must be >= 0")
        if t.warmup_epochs < 0:
            raise ConfigError("train.warmup_epochs: must be >= 0")
        if not 0.0 <= t.ce_weight <= 1.0:
            raise ConfigError("train.ce_weight: must lie in [0, 1]")
        if not 0.0 < t.hd_percentile <= 100.0:
            raise ConfigError("train.hd_percentile: must lie in (0, 100]")
        if d.source not in ("synthetic", "directory"):
            raise ConfigError(f"data.source: expected 'synthetic' or 'directory', got {d.source!r}")
        if d.source == "directory" and not d.path:
            raise ConfigError("data.path: required when data.source = directory")
        if d.source == "synthetic" and self.model.input_size[0] != self.model.input_size[1]:
            raise ConfigError("model.input_size: synthetic data needs a square input")
        if d.source == "synthetic" and self.model.num_classes < 2:
            raise ConfigError("model.num_classes: synthetic data needs >= 2 classes")
        self.class_names()
        return self


def full_config() -> RunConfig:
    """Full-size model with the reference training recipe."""
    return RunConfig(
        model=ModelConfig(),
        train=TrainConfig(lr=1e-3, epochs=300, batch_size=24, warmup_epochs=10),
        data=DataConfig(train_samples=2212, val_samples=200),
        output_dir="runs/full",
    )


PRESETS = {"tiny": RunConfig, "full": full_config}

_SECTIONS = {"model": "model", "train": "train", "data": "data"}


def _parse_value(raw: str, typ, where: str):
    origin = typing.get_origin(typ)
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if origin is tuple:
            args = typing.get_args(typ)
            elem = args[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            vals = tuple(_parse_value(p, elem, where) for p in parts)
            if args[-1] is not Ellipsis and len(vals) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return vals
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)} ({e})") from None
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def _apply(obj, section: str, key: str, raw: str) -> None:
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names:
        raise ConfigError(f"{section}.{key}: unknown key")
    setattr(obj, key, _parse_value(raw, hints[key], f"{section}.{key}"))
    if hasattr(obj, "__post_init__"):
        obj.__post_init__()


def apply_override(cfg: RunConfig, item: str) -> None:
    """Apply one ``section.key=value`` override in place."""
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigError(f"override {item!r}: expected section.key=value")
    lhs, raw = item.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    if section == "output" and key == "dir":
        cfg.output_dir = raw.strip()
        return
    if section not in _SECTIONS:
        raise ConfigError(f"override {item!r}: unknown section {section!r}")
    _apply(getattr(cfg, section), section, key, raw)


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}") from None
    cfg = base or RunConfig()
    for section in parser.sections():
        if section == "output":
            for key, raw in parser.items(section):
                if key != "dir":
                    raise ConfigError(f"output.{key}: unknown key")
                cfg.output_dir = raw.strip()
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"[{section}]: unknown section")
        obj = getattr(cfg, section)
        for key, raw in parser.items(section):
            _apply(obj, section, key, raw)
    return cfg


def load(path: str | Path, overrides: typing.Sequence[str] = ()) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from None
    cfg = loads(text)
    for item in overrides:
        apply_override(cfg, item)
    return cfg.validate()


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    parser["output"] = {"dir": cfg.output_dir}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
