"""Synthetic source/target benchmarks, vector-space augmentation, shot splits.

Randomness comes from :func:`rng_streams`: one ``numpy`` PCG64 generator per
named purpose, each seeded by ``SeedSequence(seed, spawn_key=(k,))`` with a
fixed index ``k``.  The streams are statistically independent and identical
on every platform for a given seed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

STREAMS = ("data", "shots", "augment", "init", "batches")
# centroid of the noiseless two-moons distribution
MOONS_CENTROID = np.array([0.5, 0.25])


class ParameterError(ValueError):
    pass


class SplitError(ValueError):
    pass


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    return {name: np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(k,))))
            for k, name in enumerate(STREAMS)}


@dataclass
class DomainDataset:
    x: np.ndarray
    y: np.ndarray
    domain: str
    labeled: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.labeled = np.asarray(self.labeled, dtype=bool)
        if self.domain not in ("source", "target"):
            raise ParameterError(f"domain must be source or target, got {self.domain!r}")
        if not (len(self.x) == len(self.y) == len(self.labeled)):
            raise ParameterError("x, y and roles must have the same length")
        if self.domain == "source" and not self.labeled.all():
            raise ParameterError("source datasets are fully labeled")

    def __len__(self):
        return len(self.y)

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, mask) -> "DomainDataset":
        return DomainDataset(self.x[mask], self.y[mask], self.domain, self.labeled[mask])


@dataclass(frozen=True)
class AugmentationConfig:
    weak_noise_sigma: float = 0.03
    strong_noise_sigma: float = 0.15
    strong_dropout_prob: float = 0.2
    strong_scale_low: float = 0.7
    strong_scale_high: float = 1.3

    def __post_init__(self):
        if self.weak_noise_sigma < 0 or self.strong_noise_sigma < 0:
            raise ParameterError("noise sigmas must be non-negative")
        if not 0.0 <= self.strong_dropout_prob < 1.0:
            raise ParameterError("dropout probability must lie in [0, 1)")
        if not 0 < self.strong_scale_low <= self.strong_scale_high:
            raise ParameterError("scale range must be positive and ordered")


@dataclass(frozen=True)
class ShotSplit:
    shots: int = 3
    seed: int = 0


def _moons(n: int, noise: float, rng: np.random.Generator):
    n_outer = n // 2
    n_inner = n - n_outer
    t_out = rng.uniform(0.0, np.pi, n_outer)
    t_in = rng.uniform(0.0, np.pi, n_inner)
    x = np.concatenate([
        np.stack([np.cos(t_out), np.sin(t_out)], axis=1),
        np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1),
    ])
    y = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    x = x + rng.normal(0.0, noise, x.shape)
    order = rng.permutation(n)
    return x[order], y[order]


def rotate(x: np.ndarray, degrees: float, center=MOONS_CENTROID) -> np.ndarray:
    th = np.deg2rad(degrees)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return (x - center) @ rot.T + center


def gen_two_moons_shift(n_per_domain: int = 1000, noise: float = 0.1, rotation_degrees: float = 30.0,
                        seed: int = 0, rng: np.random.Generator | None = None):
    """Two interleaved half circles; the target is a fresh draw rotated about the centroid."""
    if n_per_domain < 4:
        raise ParameterError("n_per_domain must be at least 2 * C = 4")
    if not 0.0 <= rotation_degrees < 360.0:
        raise ParameterError("rotation must lie in [0, 360)")
    if noise < 0:
        raise ParameterError("noise must be non-negative")
    rng = rng if rng is not None else rng_streams(seed)["data"]
    xs, ys = _moons(n_per_domain, noise, rng)
    xt, yt = _moons(n_per_domain, noise, rng)
    xt = rotate(xt, rotation_degrees)
    return (DomainDataset(xs, ys, "source", np.ones(len(ys), bool)),
            DomainDataset(xt, yt, "target", np.zeros(len(yt), bool)))


def gen_gauss_blobs_shift(n_classes: int = 3, n_per_class: int = 100, d_in: int = 2,
                          shift_matrix=None, shift_bias=None, blob_sigma: float = 0.5,
                          seed: int = 0, center_scale: float = 3.0,
                          rng: np.random.Generator | None = None):
    """Isotropic Gaussian blobs; the target is an affine image of fresh draws."""
    if n_classes < 2:
        raise ParameterError("need at least 2 classes")
    a = np.eye(d_in) if shift_matrix is None else np.asarray(shift_matrix, dtype=np.float64)
    bias = np.zeros(d_in) if shift_bias is None else np.asarray(shift_bias, dtype=np.float64)
    if a.shape != (d_in, d_in) or bias.shape != (d_in,):
        raise ParameterError("shift matrix/bias shapes do not match d_in")
    if abs(np.linalg.det(a)) < 1e-12 or np.linalg.cond(a) > 1e12:
        raise ParameterError("shift matrix is singular")
    rng = rng if rng is not None else rng_streams(seed)["data"]
    centers = rng.normal(0.0, center_scale, (n_classes, d_in))

    def draw():
        y = np.repeat(np.arange(n_classes), n_per_class)
        x = centers[y] + rng.normal(0.0, blob_sigma, (len(y), d_in))
        order = rng.permutation(len(y))
        return x[order], y[order]

    xs, ys = draw()
    xt, yt = draw()
    xt = xt @ a.T + bias
    return (DomainDataset(xs, ys, "source", np.ones(len(ys), bool)),
            DomainDataset(xt, yt, "target", np.zeros(len(yt), bool)))


def augment(x: np.ndarray, view: str, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Weak view: additive noise.  Strong view: scale jitter, noise, coordinate dropout."""
    x = np.asarray(x, dtype=np.float64)
    if view == "A":
        if cfg.weak_noise_sigma == 0:
            return x.copy()
        return x + rng.normal(0.0, cfg.weak_noise_sigma, x.shape)
    if view == "B":
        out = x * rng.uniform(cfg.strong_scale_low, cfg.strong_scale_high, x.shape)
        out = out + rng.normal(0.0, cfg.strong_noise_sigma, x.shape)
        keep = rng.random(x.shape) >= cfg.strong_dropout_prob
        return out * keep
    raise ParameterError(f"view must be 'A' or 'B', got {view!r}")


def select_shots(target: DomainDataset, split: ShotSplit, rng: np.random.Generator | None = None,
                 n_classes: int | None = None) -> DomainDataset:
    """Mark exactly ``split.shots`` uniformly chosen samples per class as labeled."""
    if split.shots < 1:
        raise SplitError("shots must be >= 1")
    rng = rng if rng is not None else rng_streams(split.seed)["shots"]
    n_classes = n_classes or target.n_classes
    labeled = np.zeros(len(target), dtype=bool)
    for c in range(n_classes):
        idx = np.flatnonzero(target.y == c)
        if len(idx) < split.shots:
            raise SplitError(f"class {c} has {len(idx)} target samples, need {split.shots}")
        labeled[rng.choice(idx, size=split.shots, replace=False)] = True
    return replace(target, labeled=labeled)


def write_csv(path, ds: DomainDataset) -> None:
    d = ds.input_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(d)] + ["label", "domain", "role"])
        for xi, yi, li in zip(ds.x, ds.y, ds.labeled):
            w.writerow([format(v, ".17g") for v in xi] + [int(yi), ds.domain,
                                                          "labeled" if li else "unlabeled"])


def read_csv(path) -> DomainDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("x"))
    if header != [f"x{i}" for i in range(d)] + ["label", "domain", "role"]:
        raise ParameterError(f"{path}: unexpected CSV header {header}")
    domains = {r[d + 1] for r in body}
    if len(domains) > 1:
        raise ParameterError(f"{path}: mixed domains {sorted(domains)}")
    x = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
    y = np.array([int(r[d]) for r in body], dtype=np.int64)
    labeled = np.array([r[d + 2] == "labeled" for r in body], dtype=bool)
    return DomainDataset(x, y, domains.pop() if domains else "source", labeled)
