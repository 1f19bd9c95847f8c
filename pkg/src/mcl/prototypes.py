"""Source class prototypes maintained by exponential moving average."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NORM_FLOOR


class MissingClassError(ValueError):
    pass


class DegeneratePrototypeError(ValueError):
    pass


@dataclass
class PrototypeBank:
    prototypes: np.ndarray
    momentum: float = 0.9
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.counts is None:
            self.counts = np.zeros(self.prototypes.shape[0], dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    def snapshot(self) -> np.ndarray:
        return self.prototypes.copy()


def _normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm < NORM_FLOOR:
        raise DegeneratePrototypeError(f"prototype norm {norm:.3g} below {NORM_FLOOR}")
    return v / norm


def init_from_source(features: np.ndarray, labels: np.ndarray, n_classes: int,
                     momentum: float = 0.9) -> PrototypeBank:
    """Normalized per-class mean of source features.

    ``features`` are the extractor outputs for the whole source set, computed
    once with the initial parameters.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    protos = np.empty((n_classes, features.shape[1]))
    for c in range(n_classes):
        members = features[labels == c]
        if len(members) == 0:
            raise MissingClassError(f"class {c} has no source samples")
        protos[c] = _normalize(members.mean(axis=0))
    return PrototypeBank(protos, momentum)


def batch_class_means(features: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    return {int(c): features[labels == c].mean(axis=0) for c in np.unique(labels)}


def ema_update(bank: PrototypeBank, means: dict[int, np.ndarray]) -> PrototypeBank:
    """``h <- m h + (1 - m) h_hat`` then renormalize, for classes in ``means``.

    Updates ``bank`` in place and returns it.  Rows of absent classes are not
    touched.
    """
    m = bank.momentum
    for c, h_hat in sorted(means.items()):
        bank.prototypes[c] = _normalize(m * bank.prototypes[c] + (1.0 - m) * np.asarray(h_hat))
        bank.counts[c] += 1
    return bank
