"""Binary-change-guided hyperspectral multiclass change detection.

A library plus CLI covering the whole desk-scale workflow: synthetic
bi-temporal scenes with abundance ground truth, multi-temporal
endmember extraction, classical constrained unmixing, neural united
unmixing with a change-guided constraint, change-map construction, and
evaluation.
"""

from .cube import (AbundanceCube, ChangeMap, HsiCube, Patch, add_noise_snr, concat_width,
                   extract_patch, load_abundance, load_cube, load_map, save_abundance,
                   save_cube, save_map)
from .endmember import (EndmemberSet, SubspaceEstimate, estimate_noise,
                        estimate_subspace_dim, multitemporal_endmembers, spectral_angle,
                        vca_extract)
from .metrics import abundance_mse, confusion_matrix, kappa, overall_accuracy, residual_map
from .model import (ModelConfig, TrainConfig, cos_loss, focal_loss, infer_change_prob,
                    reconstruct, sum_to_one, tc_forward, train, uu_forward)
from .predetect import (GaussMix2, PseudoLabelSet, bayes_threshold, cva_magnitude,
                        em_fit_2gauss, select_pseudo_labels)
from .synth import SynthConfig, SyntheticScene, gen_synthetic_scene
from .unmix import fcls_cube, fcls_pixel, nnls, puc_rule
from .changemap import binarize, match_classes_to_reference, multiclass_from_abundance

__version__ = "0.1.0"
