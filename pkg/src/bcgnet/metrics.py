"""Agreement metrics for change maps and abundance estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cube import AbundanceCube, ChangeMap


@dataclass
class ConfusionMatrix:
    """Counts with reference classes on rows and predictions on columns."""

    counts: np.ndarray        # (L, L) int64
    class_ids: np.ndarray     # (L,) the ids the rows/cols refer to

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(pred: ChangeMap, ref: ChangeMap,
                     class_ids: np.ndarray | list[int]) -> ConfusionMatrix:
    """Count every pixel into its (reference, predicted) cell.

    ``class_ids`` fixes the row/column order; ids absent from both maps
    yield zero rows and columns.  Labels outside the list are an error.
    """
    if pred.labels.shape != ref.labels.shape:
        raise ValueError("prediction and reference shapes differ")
    ids = np.asarray(sorted(int(c) for c in class_ids), dtype=np.int64)
    lookup = {int(c): i for i, c in enumerate(ids)}
    for name, arr in (("prediction", pred.labels), ("reference", ref.labels)):
        extra = np.setdiff1d(np.unique(arr), ids)
        if extra.size:
            raise ValueError(f"{name} contains labels {extra.tolist()} outside class_ids")
    l = ids.size
    index = np.vectorize(lookup.__getitem__)
    flat = index(ref.labels.ravel()) * l + index(pred.labels.ravel())
    counts = np.bincount(flat, minlength=l * l).reshape(l, l)
    return ConfusionMatrix(counts=counts.astype(np.int64), class_ids=ids)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of pixels on the diagonal."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement.

    kappa = (OA - p_e) / (1 - p_e) with p_e the expected agreement from
    the marginals.  When p_e reaches 1 (all pixels in one class on both
    sides) the coefficient is defined as 0.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    total = float(cm.total)
    oa = float(np.trace(cm.counts)) / total
    p_e = float(np.sum(cm.counts.sum(axis=1) * cm.counts.sum(axis=0))) / total ** 2
    if p_e >= 1.0:
        return 0.0
    return (oa - p_e) / (1.0 - p_e)


def abundance_mse(est: AbundanceCube, truth: AbundanceCube) -> tuple[np.ndarray, float]:
    """Per-endmember mean squared abundance error and their average.

    The squared error of endmember i is averaged over all pixels; the
    scalar summary averages those K values, so it equals the mean of
    the per-pixel residual map exactly.
    """
    if est.values.shape != truth.values.shape:
        raise ValueError(f"abundance shapes differ: {est.values.shape} vs {truth.values.shape}")
    diff = est.values - truth.values
    per_em = np.mean(diff ** 2, axis=(0, 1))
    return per_em, float(np.mean(per_em))


def residual_map(est: AbundanceCube, truth: AbundanceCube) -> np.ndarray:
    """Per-pixel mean (over endmembers) squared abundance error, (H, W)."""
    if est.values.shape != truth.values.shape:
        raise ValueError(f"abundance shapes differ: {est.values.shape} vs {truth.values.shape}")
    return np.mean((est.values - truth.values) ** 2, axis=2)
