"""Defect segmentation followed by a differentiable refining network."""
from .model import DefectNet
from .refine import KernelBank, RefineParams, default_bank
from .segnet import SegNetConfig, build_segnet, seg_forward
from .synthdata import GenSpec, Sample, generate_dataset, load_dataset
from .training import StageSchedule, TrainConfig, staged_train

__all__ = [
    "DefectNet",
    "GenSpec",
    "KernelBank",
    "RefineParams",
    "Sample",
    "SegNetConfig",
    "StageSchedule",
    "TrainConfig",
    "build_segnet",
    "default_bank",
    "generate_dataset",
    "load_dataset",
    "seg_forward",
    "staged_train",
]
__version__ = "0.1.0"
