"""Stability/plasticity decoupled prompt tuning for continual learning."""
from .estimator import PromptFusionClassifier
from .stream import (Dataset, TaskStream, load_manifest, make_class_incremental_stream,
                     make_domain_incremental_stream, make_domain_blobs, make_split_blobs)

__all__ = [
    "PromptFusionClassifier", "Dataset", "TaskStream", "load_manifest",
    "make_class_incremental_stream", "make_domain_incremental_stream",
    "make_split_blobs", "make_domain_blobs",
]
__version__ = "0.1.0"
