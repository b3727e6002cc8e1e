from .pipeline import Trainer, build_model, finetune, finetune_model, train_base
from .sampling import sample_anchors, sample_pyramid_for_image, sample_rois
from .schemas import PRESETS, TrainConfig, load_train_config

__all__ = [
    "Trainer", "build_model", "finetune", "finetune_model", "train_base",
    "sample_anchors", "sample_pyramid_for_image", "sample_rois",
    "PRESETS", "TrainConfig", "load_train_config",
]
