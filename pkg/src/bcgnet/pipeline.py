"""End-to-end stage orchestration shared by the CLI and the test suite.

The centerpiece is :func:`compare_methods`, the ablation used for trend
reports: unmix one scene with the classical least-squares baseline, the
reconstruction-only network, and the full binary-change-guided network,
then score all three on binary/multiclass agreement and abundance error
against the scene's ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .changemap import binarize, match_classes_to_reference, multiclass_from_abundance
from .cube import AbundanceCube, ChangeMap, HsiCube
from .endmember import EndmemberSet, multitemporal_endmembers, spectral_angle
from .metrics import abundance_mse, confusion_matrix, kappa, overall_accuracy
from .model import ModelConfig, TrainConfig, TrainResult, infer_change_prob, train
from .predetect import (PseudoLabelSet, bayes_threshold, cva_magnitude, em_fit_2gauss,
                        select_pseudo_labels)
from .synth import SyntheticScene
from .unmix import fcls_cube, puc_rule


@dataclass
class MethodScores:
    """One row of the comparison table."""

    method: str
    binary_oa: float
    binary_kappa: float
    multi_oa: float
    multi_kappa: float
    mse_t1: float
    mse_t2: float
    mse_avg: float

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "binary_oa": self.binary_oa, "binary_kappa": self.binary_kappa,
            "multi_oa": self.multi_oa, "multi_kappa": self.multi_kappa,
            "mse_t1": self.mse_t1, "mse_t2": self.mse_t2, "mse_avg": self.mse_avg,
        }


@dataclass
class CompareArtifacts:
    """Everything a comparison run produced, for rendering and audits."""

    scores: list[MethodScores]
    maps: dict[str, ChangeMap]
    abundances: dict[str, AbundanceCube]
    endmembers: EndmemberSet
    labels: PseudoLabelSet
    train_logs: dict[str, list]
    results: dict[str, TrainResult]


def align_endmembers_to_truth(em: EndmemberSet, true_signatures: np.ndarray) -> np.ndarray:
    """Column permutation mapping extracted endmembers onto true ones.

    ``perm[j]`` is the extracted column matched to true column j, chosen
    to minimize the total spectral angle (one-to-one).  Requires equal
    counts.
    """
    true_signatures = np.asarray(true_signatures, dtype=np.float64)
    k_true = true_signatures.shape[1]
    if em.k != k_true:
        raise ValueError(f"cannot align {em.k} extracted endmembers to {k_true} true ones")
    angles = np.empty((em.k, k_true))
    for i in range(em.k):
        for j in range(k_true):
            angles[i, j] = spectral_angle(em.signatures[:, i], true_signatures[:, j])
    rows, cols = linear_sum_assignment(angles)
    perm = np.empty(k_true, dtype=np.intp)
    perm[cols] = rows
    return perm


def aligned_abundance(abund: AbundanceCube, perm: np.ndarray) -> AbundanceCube:
    return AbundanceCube(values=abund.values[:, :, perm], producer=abund.producer)


def score_binary(pred: ChangeMap, ref: ChangeMap) -> tuple[float, float]:
    cm = confusion_matrix(pred, ref, [0, 1])
    return overall_accuracy(cm), kappa(cm)


def score_multiclass(pred: ChangeMap, ref: ChangeMap) -> tuple[float, float]:
    ids = np.union1d(np.unique(pred.labels), np.unique(ref.labels))
    cm = confusion_matrix(pred, ref, ids)
    return overall_accuracy(cm), kappa(cm)


def predetect_labels(x: HsiCube, y: HsiCube, n_unchanged: int, n_changed: int,
                     mode: str = "confidence", seed: int = 0):
    """Full pre-detection chain; returns (labels, magnitude, mixture, threshold)."""
    magnitude = cva_magnitude(x, y)
    mix = em_fit_2gauss(magnitude.ravel(), seed=seed)
    threshold = bayes_threshold(mix)
    labels = select_pseudo_labels(magnitude, threshold, n_unchanged, n_changed,
                                  mode=mode, seed=seed)
    return labels, magnitude, mix, threshold


def _scores_for(method: str, binary_pred: ChangeMap, multi_raw: ChangeMap,
                scene: SyntheticScene, a1: AbundanceCube, a2: AbundanceCube,
                perm: np.ndarray) -> tuple[MethodScores, ChangeMap]:
    b_oa, b_k = score_binary(binary_pred, scene.binary_ref)
    multi_matched, _ = match_classes_to_reference(multi_raw, scene.multiclass_ref)
    m_oa, m_k = score_multiclass(multi_matched, scene.multiclass_ref)
    _, mse1 = abundance_mse(aligned_abundance(a1, perm), scene.true_abund_t1)
    _, mse2 = abundance_mse(aligned_abundance(a2, perm), scene.true_abund_t2)
    return MethodScores(method=method, binary_oa=b_oa, binary_kappa=b_k,
                        multi_oa=m_oa, multi_kappa=m_k, mse_t1=mse1, mse_t2=mse2,
                        mse_avg=0.5 * (mse1 + mse2)), multi_matched


def compare_methods(scene: SyntheticScene, train_cfg: TrainConfig,
                    n_unchanged: int, n_changed: int,
                    k_override: int | None = None,
                    model_cfg: ModelConfig | None = None) -> CompareArtifacts:
    """Run the three-way ablation on one scene.

    All methods share the endmember matrix extracted from the noisy
    concatenated pair (K defaults to the scene's true count, as the
    reference comparisons also assume a known material count) and the
    same pseudo-label set.  The reconstruction-only network is the full
    training schedule with every epoch spent in the warm-up phase.
    """
    x, y = scene.cube_t1, scene.cube_t2
    k = k_override if k_override is not None else scene.endmembers_true.shape[1]
    em, _ = multitemporal_endmembers(x, y, k, seed=train_cfg.seed)
    perm = align_endmembers_to_truth(em, scene.endmembers_true)
    labels, *_ = predetect_labels(x, y, n_unchanged, n_changed, seed=train_cfg.seed)

    scores: list[MethodScores] = []
    maps: dict[str, ChangeMap] = {}
    abunds: dict[str, AbundanceCube] = {}
    logs: dict[str, list] = {}
    results: dict[str, TrainResult] = {}

    # classical baseline: per-pixel constrained least squares + argmax rule
    f1, _ = fcls_cube(em, x)
    f2, _ = fcls_cube(em, y)
    fb, fm = puc_rule(f1, f2)
    row, matched = _scores_for("fcls_puc", fb, fm, scene, f1, f2, perm)
    scores.append(row)
    maps["fcls_puc_binary"], maps["fcls_puc_multiclass"] = fb, matched
    abunds["fcls_t1"], abunds["fcls_t2"] = f1, f2

    if model_cfg is None:
        model_cfg = ModelConfig(bands=x.bands, k=em.k, patch=train_cfg.patch)

    # reconstruction-only network: all epochs in the warm-up phase
    uu_cfg = replace(train_cfg, warmup_uu=train_cfg.epochs, warmup_tc=0)
    uu_res = train(x, y, em, labels, uu_cfg, model_cfg)
    _, u1, u2 = infer_change_prob(uu_res.uu_params, uu_res.tc_params, x, y, em, model_cfg)
    ub, um = puc_rule(u1, u2)
    row, matched = _scores_for("uu_only_puc", ub, um, scene, u1, u2, perm)
    scores.append(row)
    maps["uu_only_puc_binary"], maps["uu_only_puc_multiclass"] = ub, matched
    abunds["uu_only_t1"], abunds["uu_only_t2"] = u1, u2
    logs["uu_only"] = uu_res.log
    results["uu_only"] = uu_res

    # full model: alternating training, change head decides the binary map
    bcg_res = train(x, y, em, labels, train_cfg, model_cfg)
    prob, b1, b2 = infer_change_prob(bcg_res.uu_params, bcg_res.tc_params, x, y, em,
                                     model_cfg)
    bb = binarize(prob)
    bm = multiclass_from_abundance(b1, b2, bb)
    row, matched = _scores_for("bcg_net", bb, bm, scene, b1, b2, perm)
    scores.append(row)
    maps["bcg_net_binary"], maps["bcg_net_multiclass"] = bb, matched
    abunds["bcg_t1"], abunds["bcg_t2"] = b1, b2
    logs["bcg_net"] = bcg_res.log
    results["bcg_net"] = bcg_res

    return CompareArtifacts(scores=scores, maps=maps, abundances=abunds, endmembers=em,
                            labels=labels, train_logs=logs, results=results)


def scores_csv(scores: list[MethodScores]) -> str:
    """Comma-separated table, one row per method."""
    header = "method,binary_oa,binary_kappa,multi_oa,multi_kappa,mse_t1,mse_t2,mse_avg"
    rows = [
        f"{s.method},{s.binary_oa:.6f},{s.binary_kappa:.6f},{s.multi_oa:.6f},"
        f"{s.multi_kappa:.6f},{s.mse_t1:.6e},{s.mse_t2:.6e},{s.mse_avg:.6e}"
        for s in scores
    ]
    return "\n".join([header] + rows) + "\n"


def metrics_text(values: dict[str, float | int | str]) -> str:
    """key=value lines in insertion order."""
    return "\n".join(f"{k}={v}" for k, v in values.items()) + "\n"
