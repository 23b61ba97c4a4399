"""Plug-in safety patches for a toy text-to-image diffusion model."""

from .diffusion import (
    DenoiserParams,
    NoiseSchedule,
    add_noise,
    encode_image,
    encode_text,
    generate,
    make_schedule,
    predict_noise,
    sample,
    train_base,
)
from .estimators import PatchedModel, SafeControl, ToyTextToImage, merge
from .evaluation import (
    EvalReport,
    SafetyClassifier,
    SafetyVerdict,
    alignment_score,
    classify,
    fidelity_score,
    reduction_ratio,
    unsafe_probability,
)
from .patch import PatchParams, init_patch, map_condition, merge_patches, patch_forward
from .storage import load_base, load_patch, save_base, save_patch
from .training import TrainConfig, sample_batch, train_patch

__version__ = "0.1.0"
