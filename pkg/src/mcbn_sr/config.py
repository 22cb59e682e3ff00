"""Run configuration: INI files with ``[section]`` headers and ``key = value`` lines.

All randomness derives from ``run.seed``. Stream ``s`` of a run uses
``numpy.random.default_rng(SeedSequence(seed, spawn_key=(s,)))`` with the
stream numbers in :data:`STREAMS`.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STREAMS = {
    "init": 1,        # network weights
    "train": 2,       # training batch draws and augmentation
    "validation": 3,  # reference batches for validation BN stats
    "stats": 4,       # stats-set estimation batches
    "naive": 5,       # naive MCBN batch draws
    "benchmark": 6,   # synthetic benchmark image
}


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[stream],)))


def stream_seed(seed: int, stream: str) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(STREAMS[stream],)).generate_state(1, np.uint64)[0])


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.replace(" ", "").split(",") if v]


@dataclass
class RunSection:
    seed: int = 0
    scale: int = 2
    T: int = 25
    var_floor: float = 1e-8
    color_mode: str = "y"
    clip_samples: bool = True


@dataclass
class NetworkSection:
    depth: int = 8
    channels: int = 32
    kernel: int = 3


@dataclass
class TrainingSection:
    patch_size: int = 32
    batch_size: int = 8
    iterations: int = 1500
    lr: float = 2e-3
    lr_halve_every: int = 500
    augment: bool = True
    val_every: int = 250
    val_patches_per_image: int = 4
    val_stat_batches: int = 4


@dataclass
class StatsSection:
    patches_per_image: int = 32  # random crops per training image; 0: just enough for T batches


@dataclass
class EvaluateSection:
    sweep_T: list[int] = field(default_factory=lambda: [3, 5, 10, 15, 25])
    crop: int = -1  # -1: crop by the scale factor
    colormap: str = "viridis"


@dataclass
class BenchmarkSection:
    image_size: int = 276
    T_values: list[int] = field(default_factory=lambda: [5, 10, 15])
    repeats: int = 5
    naive_patch: str = "image"  # "image" or "train"


@dataclass
class PathsSection:
    train_dir: str = ""
    train_manifest: str = ""
    val_dir: str = ""
    test_dir: str = ""
    checkpoint: str = "model.mcsr"
    stats_file: str = "stats.mcbn"
    output_dir: str = "out"


_SECTIONS = {
    "run": RunSection,
    "network": NetworkSection,
    "training": TrainingSection,
    "stats": StatsSection,
    "evaluate": EvaluateSection,
    "benchmark": BenchmarkSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    stats: StatsSection = field(default_factory=StatsSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def set(self, dotted: str, value: str) -> None:
        """Override one value from text, e.g. ``set("training.lr", "5e-4")``."""
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or not key:
            raise ConfigError(f"unknown setting {dotted!r}; use section.key with section in {sorted(_SECTIONS)}")
        obj = getattr(self, section)
        names = {f.name: f for f in dataclasses.fields(obj)}
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]; known: {sorted(names)}")
        setattr(obj, key, _parse(names[key], value, dotted))

    def validate(self) -> None:
        if self.run.scale < 2:
            raise ConfigError(f"run.scale must be >= 2, got {self.run.scale}")
        if self.run.T < 1:
            raise ConfigError(f"run.T must be >= 1, got {self.run.T}")
        if self.run.color_mode not in ("y", "rgb"):
            raise ConfigError(f"run.color_mode must be 'y' or 'rgb', got {self.run.color_mode!r}")
        if self.run.var_floor <= 0:
            raise ConfigError("run.var_floor must be positive")
        if self.benchmark.naive_patch not in ("image", "train"):
            raise ConfigError("benchmark.naive_patch must be 'image' or 'train'")

    @property
    def eval_crop(self) -> int:
        return self.run.scale if self.evaluate.crop < 0 else self.evaluate.crop

    def to_ini(self) -> str:
        lines = []
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                lines.append(f"{f.name} = {_render(getattr(getattr(self, name), f.name))}")
            lines.append("")
        return "\n".join(lines)


def _parse(f: dataclasses.Field, text: str, where: str):
    text = text.strip()
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("list"):
            return _int_list(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {kind}") from None


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read an INI file (sections ``[manifest]`` and unknown ones are ignored) and apply overrides.

    Relative paths in ``[paths]`` are resolved against the config file's directory.
    """
    cfg = RunConfig()
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        parser.read(path)
        base = path.resolve().parent
        for section in parser.sections():
            if section not in _SECTIONS:
                continue
            for key, value in parser[section].items():
                cfg.set(f"{section}.{key}", value)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        cfg.set(key.strip(), value)
    for f in dataclasses.fields(cfg.paths):
        v = getattr(cfg.paths, f.name)
        if v and not Path(v).is_absolute():
            setattr(cfg.paths, f.name, str((base / v).resolve()))
    cfg.validate()
    return cfg


def file_digest(paths, root=None) -> str:
    """SHA-256 over (relative name, contents) of every file, in order."""
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        name = str(p.relative_to(root)) if root else p.name
        h.update(name.encode() + b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()
