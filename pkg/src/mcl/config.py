"""Flat ``key = value`` run configuration.

Every key of :class:`DataConfig` and :class:`~mcl.trainer.TrainConfig` is a
config key.  Sinkhorn settings carry an ``ot_`` prefix (``ot_epsilon``) and
augmentation settings an ``aug_`` prefix (``aug_weak_noise_sigma``).  Blank
lines and ``#`` comments are ignored; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ot
from .data import (AugmentationConfig, DomainDataset, ShotSplit, gen_gauss_blobs_shift,
                   gen_two_moons_shift, read_csv, rng_streams, select_shots)
from .trainer import TrainConfig

REQUIRED_KEYS = ("dataset",)
NESTED = {"sinkhorn": ("ot_", ot.SinkhornConfig), "augment": ("aug_", AugmentationConfig)}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "two_moons"
    n_per_domain: int = 1000
    noise: float = 0.1
    rotation: float = 30.0
    n_classes: int = 3
    n_per_class: int = 100
    d_in: int = 2
    blob_sigma: float = 0.5
    shift_matrix: str = ""
    shift_bias: str = ""
    source_csv: str = ""
    target_csv: str = ""
    shots: int = 3

    def __post_init__(self):
        if self.dataset not in ("two_moons", "gauss_blobs", "csv"):
            raise ConfigError(f"dataset must be two_moons, gauss_blobs or csv, got {self.dataset!r}")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = ()

    @property
    def seed(self) -> int:
        return self.train.seed

    def seed_list(self) -> list[int]:
        return list(self.seeds) if self.seeds else [self.seed]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(text: str, kind, key: str):
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.replace(" ", "").split(",") if s)
    except ValueError as exc:
        raise ConfigError(f"seeds: {exc}") from exc


def key_table() -> dict[str, tuple[str, str | None, object]]:
    """flat key -> (section, nested field or None, type)."""
    table: dict[str, tuple] = {}
    for f in dataclasses.fields(DataConfig):
        table[f.name] = ("data", None, f.type)
    for f in dataclasses.fields(TrainConfig):
        if f.name in NESTED:
            prefix, cls = NESTED[f.name]
            for g in dataclasses.fields(cls):
                table[prefix + g.name] = ("train", f.name, g.type)
        else:
            table[f.name] = ("train", None, f.type)
    table["seeds"] = ("run", None, "seeds")
    return table


def read_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_config(pairs: dict[str, str], require: bool = True) -> RunConfig:
    if require:
        for key in REQUIRED_KEYS:
            if key not in pairs:
                raise ConfigError(f"missing required key '{key}'")
    table = key_table()
    unknown = sorted(set(pairs) - set(table))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    data_kw, train_kw, nested_kw, seeds = {}, {}, {name: {} for name in NESTED}, ()
    for key, value in pairs.items():
        section, nested, kind = table[key]
        if section == "run":
            seeds = parse_seeds(value)
        elif section == "data":
            data_kw[key] = _coerce(value, kind, key)
        elif nested is None:
            train_kw[key] = _coerce(value, kind, key)
        else:
            nested_kw[nested][key[len(NESTED[nested][0]):]] = _coerce(value, kind, key)
    try:
        for name, (_, cls) in NESTED.items():
            train_kw[name] = cls(**nested_kw[name])
        return RunConfig(DataConfig(**data_kw), TrainConfig(**train_kw), seeds)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    pairs = read_pairs(text, str(path))
    for item in overrides or []:
        k, v = parse_override(item)
        pairs[k] = v
    return build_config(pairs)


def flatten(cfg: RunConfig) -> dict[str, str]:
    """Fully resolved flat key/value view, sorted by key."""
    out: dict[str, str] = {}
    for f in dataclasses.fields(cfg.data):
        out[f.name] = _fmt(getattr(cfg.data, f.name))
    for f in dataclasses.fields(cfg.train):
        value = getattr(cfg.train, f.name)
        if f.name in NESTED:
            prefix = NESTED[f.name][0]
            for g in dataclasses.fields(value):
                out[prefix + g.name] = _fmt(getattr(value, g.name))
        else:
            out[f.name] = _fmt(value)
    out["seeds"] = ",".join(str(s) for s in cfg.seeds)
    return dict(sorted(out.items()))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_matrix(text: str, d: int) -> np.ndarray | None:
    if not text:
        return None
    rows = [[float(v) for v in r.split(",")] for r in text.split(";")]
    return np.array(rows).reshape(d, d)


def _parse_vector(text: str) -> np.ndarray | None:
    return None if not text else np.array([float(v) for v in text.split(",")])


def generate_datasets(data: DataConfig, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Raw (source, target) pair; target roles are all unlabeled."""
    rng = rng_streams(seed)["data"]
    if data.dataset == "two_moons":
        return gen_two_moons_shift(data.n_per_domain, data.noise, data.rotation, rng=rng)
    if data.dataset == "gauss_blobs":
        return gen_gauss_blobs_shift(data.n_classes, data.n_per_class, data.d_in,
                                     _parse_matrix(data.shift_matrix, data.d_in),
                                     _parse_vector(data.shift_bias), data.blob_sigma, rng=rng)
    if not (data.source_csv and data.target_csv):
        raise ConfigError("dataset = csv needs source_csv and target_csv")
    return read_csv(data.source_csv), read_csv(data.target_csv)


@dataclass(frozen=True)
class DatasetFactory:
    """Picklable ``seed -> (source, shot-split target)``."""

    data: DataConfig

    def __call__(self, seed: int) -> tuple[DomainDataset, DomainDataset]:
        source, target = generate_datasets(self.data, seed)
        if self.data.dataset == "csv" and target.labeled.any():
            return source, target
        n_classes = max(source.n_classes, target.n_classes)
        target = select_shots(target, ShotSplit(self.data.shots, seed), rng_streams(seed)["shots"], n_classes)
        return source, target


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, seed=seed))
