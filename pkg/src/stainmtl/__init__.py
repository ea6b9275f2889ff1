"""Stain separation, stain augmentation, a toy multi-task model and
segmentation scoring for H&E histopathology patches."""

__version__ = "0.1.0"

from .augment import (
    MixturePolicy,
    PerturbConfig,
    RandStainNA,
    StainMixtureAugmenter,
    StatPrior,
    fit_stat_prior,
    geometric_augment,
    mixture_augment,
    perturb_stain_matrix,
    randstainna_augment,
    stain_augment,
)
from .color import channel_stats, lab_to_rgb, od_to_rgb, rgb_to_lab, rgb_to_od
from .exceptions import (
    DuplicateId,
    FormatError,
    InsufficientTissue,
    InvalidInput,
    MissingColumn,
    NotFound,
    ParseError,
    StainError,
)
from .metrics import MetricsReport, cosas_score, dice, evaluate_dataset, iou, threshold_logits, tta_predict
from .mtl import MultiTaskStainModel, PixelBatch, ToyModelParams
from .stainsep import (
    SeparationConfig,
    SPCNNormalizer,
    StainProfile,
    StainSeparator,
    estimate_stains,
    fit_profile,
    normalize_spcn,
    reconstruct,
)
