"""Abdominal adipose tissue segmentation pipeline with a phantom test harness."""

from .volume import LabelMap, LabelScheme, SlicePlane, Volume3D, read_volume, write_volume
from .phantom import PhantomCase, PhantomConfig, generate_cohort, generate_phantom, perturb_retest
from .netgraph import FusionMode, NetworkSpec, WeightStore, count_parameters
from .train import TrainConfig, composite_loss, train_model
from .pipeline import AbdominalRegion, Model, ModelBundle, VolumesReport, run_pipeline
from .metrics import ReliabilityReport, apd, compare_sessions, dice, icc_a1

__all__ = [
    "AbdominalRegion",
    "FusionMode",
    "LabelMap",
    "LabelScheme",
    "Model",
    "ModelBundle",
    "NetworkSpec",
    "PhantomCase",
    "PhantomConfig",
    "ReliabilityReport",
    "SlicePlane",
    "TrainConfig",
    "Volume3D",
    "VolumesReport",
    "WeightStore",
    "apd",
    "compare_sessions",
    "composite_loss",
    "count_parameters",
    "dice",
    "generate_cohort",
    "generate_phantom",
    "icc_a1",
    "perturb_retest",
    "read_volume",
    "run_pipeline",
    "train_model",
    "write_volume",
]

__version__ = "0.1.0"
