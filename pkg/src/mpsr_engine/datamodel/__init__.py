from .schemas import Annotation, Box, ClassSplit, Dataset, ImageRecord
from .store import load_dataset, save_dataset

__all__ = ["Annotation", "Box", "ClassSplit", "Dataset", "ImageRecord", "load_dataset", "save_dataset"]
