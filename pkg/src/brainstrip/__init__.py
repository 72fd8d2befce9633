"""Brain extraction from T1-weighted volumes, processed as sagittal slices.

Stages: HOG + linear SVM slice grouping, an active shape model with
optimal features, a numpy CNN boundary refiner, a dense CRF, and a
Gaussian-process-guided rule cascade for the small end slices.
"""

from .config import PipelineConfig, load_config
from .core import GroupPartition, PhantomSpec, Subject, Volume, generate_phantom
from .pipeline import Bundle, load_bundle, save_bundle, segment_volume, train_pipeline

__all__ = [
    "Bundle", "GroupPartition", "PhantomSpec", "PipelineConfig", "Subject", "Volume",
    "generate_phantom", "load_bundle", "load_config", "save_bundle", "segment_volume",
    "train_pipeline",
]
__version__ = "0.1.0"
