"""Run configuration: INI sections mapped onto the module dataclasses.

Sections are ``[backbone] [aggregator] [train] [geo] [dataset] [eval]``;
keys are the dataclass field names.  Command-line ``--set section.key=value``
overrides file values.  The fully resolved configuration is written as
``config.ini`` next to every command's outputs.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .aggregator import AggregatorConfig
from .backbone import BackboneConfig
from .datagen import DatasetSpec
from .errors import ConfigError
from .retrieval import GeoLabelRule
from .training import TrainConfig

CONFIG_NAME = "config.ini"


@dataclass
class EvalConfig:
    ks: tuple[int, ...] = (1, 5, 10)
    top_k: int = 5
    reference_split: str = "reference"
    query_split: str = "query"
    chunk: int = 64

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        if not self.ks or min(self.ks) < 1 or self.top_k < 1 or self.chunk < 1:
            raise ConfigError("eval ks, top_k and chunk must be positive")


SECTIONS: dict[str, type] = {
    "backbone": BackboneConfig,
    "aggregator": AggregatorConfig,
    "train": TrainConfig,
    "geo": GeoLabelRule,
    "dataset": DatasetSpec,
    "eval": EvalConfig,
}


def _parse(raw: str, default: Any, where: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace(" ", "").strip("()[]").split(",") if p]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} ({exc})") from None


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    geo: GeoLabelRule = field(default_factory=GeoLabelRule)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def resolve(cls, path=None, overrides: list[str] | None = None, seed: int | None = None) -> "RunConfig":
        """Defaults <- config file <- ``section.key=value`` overrides <- ``seed``."""
        values: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                text = Path(path).read_text(encoding="utf-8")
                parser.read_string(text, source=str(path))
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            except configparser.Error as exc:
                raise ConfigError(f"malformed config {path}: {exc}") from None
            for section in parser.sections():
                if section not in SECTIONS:
                    raise ConfigError(f"{path}: unknown section [{section}]")
                values[section].update(parser[section])
        for item in overrides or []:
            key, sep, raw = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            if section not in SECTIONS:
                raise ConfigError(f"override {item!r}: unknown section {section!r}")
            values[section][name] = raw
        if seed is not None:
            values["train"]["seed"] = str(seed)
            values["dataset"]["seed"] = str(seed)
        built = {}
        for section, kind in SECTIONS.items():
            defaults = kind()
            known = {f.name for f in fields(kind)}
            kwargs = {}
            for name, raw in values[section].items():
                if name not in known:
                    raise ConfigError(f"[{section}] has no key {name!r}; known: {', '.join(sorted(known))}")
                kwargs[name] = _parse(raw, getattr(defaults, name), f"[{section}] {name}")
            try:
                built[section] = kind(**kwargs)
            except TypeError as exc:
                raise ConfigError(f"[{section}]: {exc}") from None
        cfg = cls(**built)
        # keep the shared knobs consistent unless the user set them explicitly
        if "token_dim" not in values["aggregator"]:
            cfg.aggregator = dataclasses.replace(cfg.aggregator, token_dim=cfg.backbone.embed_dim)
        if "image_size" not in values["dataset"]:
            cfg.dataset = dataclasses.replace(cfg.dataset, image_size=cfg.backbone.image_size)
        if "channels" not in values["dataset"]:
            cfg.dataset = dataclasses.replace(cfg.dataset, channels=cfg.backbone.channels)
        cfg.dataset = dataclasses.replace(
            cfg.dataset, positive_radius=cfg.geo.positive_radius, negative_radius=cfg.geo.negative_radius
        )
        cfg.check()
        return cfg

    def check(self) -> None:
        if self.aggregator.token_dim != self.backbone.embed_dim:
            raise ConfigError(
                f"aggregator.token_dim {self.aggregator.token_dim} != backbone.embed_dim {self.backbone.embed_dim}"
            )
        if self.dataset.image_size != self.backbone.image_size or self.dataset.channels != self.backbone.channels:
            raise ConfigError("dataset image_size/channels must match the backbone")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section in SECTIONS:
            obj = getattr(self, section)
            parser[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, directory) -> Path:
        path = Path(directory) / CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini(), encoding="utf-8")
        return path
