"""Run configuration: one JSON document tying assets to solver settings.

A config round-trips losslessly through save/load; every CLI flag mirrors a
config key and overrides the file value. `resolved.json` snapshots written
next to run outputs materialize all defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .energy import EnergyWeights
from .solver import SolverConfig
from .spatial import FilterConfig

CONFIG_VERSION = 1


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    model: str | None = None      # model manifest path
    scan: str | None = None       # scan mesh path
    landmarks: str | None = None  # scan landmark CSV path, optional
    out: str = "out"              # output directory
    seed: int = 0
    jobs: int = 1
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    filters: FilterConfig = field(default_factory=FilterConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def validate_paths(self):
        """Check that every referenced input file exists."""
        for label in ("model", "scan", "landmarks"):
            value = getattr(self, label)
            if value is not None and not Path(value).is_file():
                raise ConfigError(f"{label} file not found: {value}")

    def to_dict(self):
        doc = {"version": CONFIG_VERSION}
        for f in fields(self):
            value = getattr(self, f.name)
            doc[f.name] = asdict(value) if hasattr(value, "__dataclass_fields__") \
                else value
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        version = doc.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(doc)
        for key, typ in (("weights", EnergyWeights), ("filters", FilterConfig),
                         ("solver", SolverConfig)):
            if key in kwargs and isinstance(kwargs[key], dict):
                kwargs[key] = typ(**kwargs[key])
        return cls(**kwargs)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1)
            f.write("\n")
        return Path(path)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"malformed config {path}: {e}") from e
        return cls.from_dict(doc)
