from .checkpoint import Checkpoint, load_checkpoint, load_model, save_checkpoint
from .model import FasterRCNN, roi_level_for_scale
from .schemas import Detection, DetectorConfig, FPNFeatures

__all__ = [
    "Checkpoint", "load_checkpoint", "load_model", "save_checkpoint",
    "FasterRCNN", "roi_level_for_scale",
    "Detection", "DetectorConfig", "FPNFeatures",
]
