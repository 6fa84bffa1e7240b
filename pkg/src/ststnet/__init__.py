"""Micro-expression recognition pipeline: apex spotting, optical-flow
features, a shallow triple-stream classifier, and LOSO evaluation."""

from .data import (
    CompositeDataset,
    DatasetId,
    EmotionClass,
    FrameSequence,
    SynthSpec,
    generate_synthetic,
    load_dataset,
)
from .flow import FlowCube, FlowField, FlowParams, build_flow_cube, estimate_flow, optical_strain
from .grids import Grid2, Grid3
from .model import NetworkParams, TrainConfig, count_parameters, forward, predict, train
from .evaluation import ConfusionMatrix, MetricReport, make_loso_plan, metrics, run_loso

__version__ = "0.1.0"

__all__ = [
    "CompositeDataset",
    "ConfusionMatrix",
    "DatasetId",
    "EmotionClass",
    "FlowCube",
    "FlowField",
    "FlowParams",
    "FrameSequence",
    "Grid2",
    "Grid3",
    "MetricReport",
    "NetworkParams",
    "SynthSpec",
    "TrainConfig",
    "build_flow_cube",
    "count_parameters",
    "estimate_flow",
    "forward",
    "generate_synthetic",
    "load_dataset",
    "make_loso_plan",
    "metrics",
    "optical_strain",
    "predict",
    "run_loso",
    "train",
]
