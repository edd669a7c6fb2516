"""Turn probabilities and abundances into labeled change maps.

Binary maps come from thresholding the change probability at 0.5;
multiclass maps tag each changed pixel with a from-to id built from the
dominant abundance class at the two dates; predicted class ids are then
aligned to a reference labeling by a maximum-overlap one-to-one
assignment so maps can be scored and rendered consistently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cube import AbundanceCube, ChangeMap

UNMATCHED = 255  # sentinel for predicted classes with no reference partner


def binarize(prob: np.ndarray) -> ChangeMap:
    """Label a pixel changed iff its probability strictly exceeds 0.5.

    Exactly 0.5 counts as unchanged; the output keeps the probability
    layer for rendering and audits.
    """
    p = np.asarray(prob, dtype=np.float64)
    if ((p < 0.0) | (p > 1.0)).any():
        raise ValueError("probabilities must lie in [0, 1]")
    return ChangeMap(labels=(p > 0.5).astype(np.int32), prob=p)


def multiclass_from_abundance(a1: AbundanceCube, a2: AbundanceCube,
                              binary: ChangeMap) -> ChangeMap:
    """From-to labels for the pixels a binary map marks as changed.

    The id is ``c1 * K + c2 + 1`` with c = argmax abundance (ties to the
    lowest index).  c1 == c2 is possible here, because the binary
    decision comes from the change head rather than the argmax
    comparison, and yields a valid id.
    """
    if a1.values.shape != a2.values.shape:
        raise ValueError(f"abundance shapes differ: {a1.values.shape} vs {a2.values.shape}")
    if binary.labels.shape != a1.values.shape[:2]:
        raise ValueError("binary map shape does not match abundances")
    k = a1.k
    c1 = np.argmax(a1.values, axis=2)
    c2 = np.argmax(a2.values, axis=2)
    labels = np.where(binary.labels > 0, c1 * k + c2 + 1, 0).astype(np.int32)
    return ChangeMap(labels=labels)


@dataclass
class MatchReport:
    """Assignment produced by the reference matcher."""

    pairs: list[tuple[int, int, int]]   # (pred_id, ref_id, overlap)
    unmatched_pred: list[int]

    def lines(self) -> list[str]:
        out = [f"{p} -> {r} {n}" for p, r, n in self.pairs]
        out += [f"{p} -> unmatched 0" for p in self.unmatched_pred]
        return out


def match_classes_to_reference(pred: ChangeMap, ref: ChangeMap) -> tuple[ChangeMap, MatchReport]:
    """Relabel predicted change classes onto the reference ids.

    Builds the overlap-count matrix between predicted and reference
    change classes (label 0 excluded) and solves the maximum-weight
    one-to-one assignment.  Predicted classes assigned zero overlap, or
    left over, become the black sentinel 255.  Unchanged pixels are
    never relabeled.
    """
    if pred.labels.shape != ref.labels.shape:
        raise ValueError("prediction and reference shapes differ")
    pred_ids = np.unique(pred.labels[pred.labels > 0])
    ref_ids = np.unique(ref.labels[ref.labels > 0])
    overlap = np.zeros((pred_ids.size, ref_ids.size), dtype=np.int64)
    for i, pid in enumerate(pred_ids):
        mask = pred.labels == pid
        for j, rid in enumerate(ref_ids):
            overlap[i, j] = int(np.count_nonzero(mask & (ref.labels == rid)))

    mapping: dict[int, int] = {}
    pairs: list[tuple[int, int, int]] = []
    if overlap.size:
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        for i, j in zip(rows, cols):
            if overlap[i, j] > 0:
                mapping[int(pred_ids[i])] = int(ref_ids[j])
                pairs.append((int(pred_ids[i]), int(ref_ids[j]), int(overlap[i, j])))
    unmatched = [int(p) for p in pred_ids if int(p) not in mapping]

    relabeled = np.zeros_like(pred.labels)
    for pid in pred_ids:
        relabeled[pred.labels == pid] = mapping.get(int(pid), UNMATCHED)
    return ChangeMap(labels=relabeled), MatchReport(pairs=pairs, unmatched_pred=unmatched)
