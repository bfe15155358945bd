"""Two-phase U-net training for optic disc segmentation.

Phase 1 trains the encoder as a disc-center localizer; phase 2 freezes
it and trains a skip-connected decoder for segmentation.  Includes the
full experimental protocol on synthetic fundus-like data: preprocessing,
five-fold cross-validation, a sample-efficiency sweep, and paired
significance testing.
"""

__version__ = "0.1.0"

from .data import SyntheticSpec, generate_sample, kfold_split, subsample_fraction
from .evaluate import dice_coefficient, euclidean_error, paired_t_test, threshold_mask
from .model import ModelConfig, UNetModel, build_localizer, extend_to_unet, load_model, save_model
from .preprocess import PreprocessConfig, clahe, preprocess_pipeline
from .tensor import Parameter, Tensor
from .train import TrainConfig, mse_loss, neg_log_soft_dice_loss

__all__ = [
    "SyntheticSpec", "generate_sample", "kfold_split", "subsample_fraction",
    "dice_coefficient", "euclidean_error", "paired_t_test", "threshold_mask",
    "ModelConfig", "UNetModel", "build_localizer", "extend_to_unet",
    "load_model", "save_model",
    "PreprocessConfig", "clahe", "preprocess_pipeline",
    "Parameter", "Tensor",
    "TrainConfig", "mse_loss", "neg_log_soft_dice_loss",
]
