"""Cross-entropy, class-wise contrastive clustering, pseudo-label consistency."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class IntraConfig:
    row_sum_floor: float = 1e-8
    variant: str = "class_wise"

    def __post_init__(self):
        if not self.row_sum_floor > 0:
            raise ad.ParameterError("row_sum_floor must be positive")
        if self.variant not in ("class_wise", "sample_wise"):
            raise ad.ParameterError(f"unknown intra variant {self.variant!r}")


@dataclass(frozen=True)
class PseudoLabelConfig:
    threshold: float = 0.95
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ad.ParameterError(f"threshold must lie in (0, 1], got {self.threshold}")
        if not self.temperature > 0:
            raise ad.ParameterError("temperature must be positive")


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ad.ParameterError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(predictions: ad.Node, labels) -> ad.Node:
    """Batch mean of ``-log p[label]`` (log floored at 1e-12)."""
    predictions = ad.as_node(predictions)
    mask = one_hot(labels, predictions.shape[1])
    if mask.shape[0] != predictions.shape[0]:
        raise ad.DimensionError("labels and predictions disagree on batch size")
    picked = ad.row_sum(ad.mul(ad.log(predictions), mask))
    return ad.scalar_mul(ad.mean(picked), -1.0)


def _row_normalize(m: ad.Node, floor: float) -> ad.Node:
    return ad.mul(m, ad.reciprocal(ad.add_scalar(ad.row_sum(m), floor)))


def _dual_normalized_gap(corr: ad.Node, floor: float) -> ad.Node:
    k = corr.shape[0]
    eye = np.eye(k)
    rows = ad.sum(ad.abs(ad.subtract(_row_normalize(corr, floor), eye)))
    cols = ad.sum(ad.abs(ad.subtract(_row_normalize(ad.transpose(corr), floor), eye)))
    return ad.scalar_mul(ad.add(rows, cols), 1.0 / (2 * k))


def _check_pair(p_a: ad.Node, p_b: ad.Node) -> None:
    if p_a.shape != p_b.shape or len(p_a.shape) != 2:
        raise ad.DimensionError(f"prediction shapes {p_a.shape} and {p_b.shape} differ")


def intra_loss(p_a, p_b, cfg: IntraConfig = IntraConfig()) -> ad.Node:
    """Dual-normalized L1 gap between the class cross-correlation and identity.

    With ``corr = P_a^T P_b`` (C x C), the loss is
    ``(|phi(corr) - I|_1 + |phi(corr^T) - I|_1) / (2C)`` where ``phi`` divides
    each row by its sum plus ``cfg.row_sum_floor``.  ``cfg.variant ==
    "sample_wise"`` dispatches to :func:`intra_loss_samplewise`.
    """
    p_a, p_b = ad.as_node(p_a), ad.as_node(p_b)
    _check_pair(p_a, p_b)
    if cfg.variant == "sample_wise":
        return intra_loss_samplewise(p_a, p_b, cfg)
    return _dual_normalized_gap(ad.matmul(ad.transpose(p_a), p_b), cfg.row_sum_floor)


def intra_loss_samplewise(p_a, p_b, cfg: IntraConfig = IntraConfig(variant="sample_wise")) -> ad.Node:
    """Same gap computed on the n x n sample correlation ``P_a P_b^T``."""
    p_a, p_b = ad.as_node(p_a), ad.as_node(p_b)
    _check_pair(p_a, p_b)
    return _dual_normalized_gap(ad.matmul(p_a, ad.transpose(p_b)), cfg.row_sum_floor)


def confidence_mask(p_a_sharpened, threshold: float) -> np.ndarray:
    """One-hot argmax of each confident row, zero rows elsewhere."""
    p = p_a_sharpened.value if isinstance(p_a_sharpened, ad.Node) else np.asarray(p_a_sharpened, dtype=np.float64)
    mask = one_hot(np.argmax(p, axis=1), p.shape[1])
    return mask * (p.max(axis=1, keepdims=True) >= threshold)


def pseudo_label_loss(p_a_sharpened, p_b, cfg: PseudoLabelConfig = PseudoLabelConfig()) -> ad.Node:
    """Thresholded cross-entropy from the view-A distribution to view B.

    Only the values of ``p_a_sharpened`` are read, so no gradient can reach
    view A.  Unconfident samples count toward the batch mean with zero loss.
    """
    p_b = ad.as_node(p_b)
    mask = confidence_mask(p_a_sharpened, cfg.threshold)
    if mask.shape != p_b.shape:
        raise ad.DimensionError(f"shapes {mask.shape} and {p_b.shape} differ")
    per_sample = ad.row_sum(ad.mul(ad.log(p_b), mask))
    return ad.scalar_mul(ad.mean(per_sample), -1.0)


def total_loss(ce, pl, inter, intra, lambda1: float = 1.0, lambda2: float = 1.0) -> ad.Node:
    """``ce + pl + lambda1 * inter + lambda2 * intra``; ``None`` terms are skipped."""
    if lambda1 < 0 or lambda2 < 0:
        raise ad.ParameterError("loss weights must be non-negative")
    terms = [t for t in (ce, pl) if t is not None]
    if inter is not None:
        terms.append(ad.scalar_mul(inter, lambda1))
    if intra is not None:
        terms.append(ad.scalar_mul(intra, lambda2))
    if not terms:
        return ad.constant(0.0)
    out = ad.as_node(terms[0])
    for t in terms[1:]:
        out = ad.add(out, t)
    return out
