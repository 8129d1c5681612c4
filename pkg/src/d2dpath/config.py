"""Pipeline configuration: one TOML file with a section per stage.

Example::

    seed = 0
    threads = 1
    out = "run"

    [generator]          # planted simulator settings
    n_trees = 5000
    k = 20

    [features]
    n_regions = 50
    k = 20

    [train]
    epochs = 30
    hidden = 64

    [generate]
    mode = "sample"
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import InputError
from .generation import GenConfig
from .training import TrainConfig

CONFIG_ENV = "D2DPATH_CONFIG"

SIMULATOR_DEFAULTS = dict(n_trees=5000, k=20, users_per_prototype=10)


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    out: str = "run"
    generator: dict = field(default_factory=lambda: dict(SIMULATOR_DEFAULTS))
    n_regions: int = 50
    k: int = 20
    ratios: tuple = (0.8, 0.1, 0.1)
    n_init: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenConfig = field(default_factory=GenConfig)
    sweep_k: tuple = (5, 10, 20, 50, 100)
    paths: dict = field(default_factory=dict)

    def path(self, name: str, default: str) -> Path:
        """Stage file ``name``: an explicit [paths] entry or ``out/default``."""
        return Path(self.paths.get(name, Path(self.out) / default))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "threads": self.threads, "out": self.out,
                "generator": self.generator, "n_regions": self.n_regions, "k": self.k,
                "ratios": list(self.ratios), "n_init": self.n_init,
                "train": self.train.to_dict(),
                "generate": self.generate.to_dict(), "sweep_k": list(self.sweep_k),
                "paths": {k: str(v) for k, v in self.paths.items()}}


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise InputError(f"[{name}] must be a table")
    return dict(sec)


def from_mapping(doc: dict) -> PipelineConfig:
    known = {"seed", "threads", "out", "generator", "features", "train", "generate", "sweep", "paths"}
    unknown = set(doc) - known
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    cfg = PipelineConfig()
    cfg.seed = int(doc.get("seed", cfg.seed))
    cfg.threads = int(doc.get("threads", cfg.threads))
    cfg.out = str(doc.get("out", cfg.out))
    cfg.generator.update(_section(doc, "generator"))
    feats = _section(doc, "features")
    cfg.n_regions = int(feats.pop("n_regions", cfg.n_regions))
    cfg.k = int(feats.pop("k", cfg.k))
    cfg.ratios = tuple(float(r) for r in feats.pop("ratios", cfg.ratios))
    cfg.n_init = int(feats.pop("n_init", cfg.n_init))
    if feats:
        raise InputError(f"unknown [features] keys: {sorted(feats)}")
    cfg.train = TrainConfig.from_dict(_section(doc, "train"))
    gen = _section(doc, "generate")
    unknown = set(gen) - set(GenConfig.__dataclass_fields__)
    if unknown:
        raise InputError(f"unknown [generate] keys: {sorted(unknown)}")
    cfg.generate = GenConfig(**gen)
    sweep = _section(doc, "sweep")
    cfg.sweep_k = tuple(int(k) for k in sweep.get("k_values", cfg.sweep_k))
    cfg.paths = {k: str(v) for k, v in _section(doc, "paths").items()}
    return cfg


def load(path=None) -> PipelineConfig:
    """Read ``path``, else the file named by $D2DPATH_CONFIG, else defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return PipelineConfig()
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as e:
        raise InputError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise InputError(f"{path}: {e}") from e
    return from_mapping(doc)
