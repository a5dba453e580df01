from .checkpoint import Checkpoint, make_checkpoint
from .model import CLIPReIDModel, build_model, images_to_tensor, parameter_hashes
from .schedule import OptimSchedule, lr_at
from .stages import (
    ImageFeatureCache,
    LossLog,
    TextFeatureCache,
    precompute_image_features,
    pretrain_stage0,
    run_baseline,
    run_one_stage,
    run_stage1,
    run_stage1_averaged,
    run_stage2,
    seed_everything,
)

__all__ = [
    "Checkpoint", "make_checkpoint", "CLIPReIDModel", "build_model", "images_to_tensor",
    "parameter_hashes", "OptimSchedule", "lr_at", "ImageFeatureCache", "LossLog",
    "TextFeatureCache", "precompute_image_features", "pretrain_stage0", "run_baseline",
    "run_one_stage", "run_stage1", "run_stage1_averaged", "run_stage2", "seed_everything",
]
