"""Hyperspectral segmentation with spatial/spectral fusion and two-stage masks."""

from .datacube import (
    AugmentationSpec,
    DatasetSplit,
    HyperspectralCube,
    SceneRecord,
    SegmentationMask,
    SynthParams,
    augment,
    patient_split,
    pseudo_color,
    read_envi,
    synth_dataset,
    synth_scene,
    write_envi,
)
from .decoder import AblationFlags, ModelConfig, OmniFuse
from .encoders import EncoderConfig
from .metrics import MetricReport, dsc, hausdorff, iou, spectral_redundancy
from .training import Checkpoint, LossWeights, TrainConfig, evaluate, fit, total_loss, train

__all__ = [
    "AblationFlags",
    "AugmentationSpec",
    "Checkpoint",
    "DatasetSplit",
    "EncoderConfig",
    "HyperspectralCube",
    "LossWeights",
    "MetricReport",
    "ModelConfig",
    "OmniFuse",
    "SceneRecord",
    "SegmentationMask",
    "SynthParams",
    "TrainConfig",
    "augment",
    "dsc",
    "evaluate",
    "fit",
    "hausdorff",
    "iou",
    "patient_split",
    "pseudo_color",
    "read_envi",
    "spectral_redundancy",
    "synth_dataset",
    "synth_scene",
    "total_loss",
    "train",
    "write_envi",
]
