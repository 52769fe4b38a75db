"""Implicit neural shape prior (auto-decoded occupancy MLP) for
unsupervised shape-anomaly detection on binary voxel populations."""

__version__ = "0.1.0"

from .anomaly import AnomalyReport, LdaProjection, calibrate_threshold, classify, lda_fit, lda_project, roc_auc
from .infer import InferConfig, InferResult, infer_latent
from .model import (LossBreakdown, ShapePriorModel, compute_loss, load_checkpoint, model_init, predict_occupancy,
                    save_checkpoint)
from .synth import FoldPlan, PopulationSpec, gen_anomalous_shape, gen_normal_shape, make_folds
from .train import TrainConfig, TrainedPrior, init_latents, reconstruct, train
from .voxels import (Group, ProbGrid, VoxelGrid, binarize, dice_score, normalize_coords, read_voxl, vol_err,
                     volume_cm3, write_voxl)
