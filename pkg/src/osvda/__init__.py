"""Contrastive open-set unsupervised video domain adaptation on clip features."""

from .data import Dataset, SynthConfig, VideoSample, load_manifest, synth_dataset, write_manifest
from .kernels import BACKEND
from .metrics import MetricsReport, evaluate, hos
from .network import ModelDims, ModelParams, init_params
from .trainer import TrainConfig, TrainState, infer, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Dataset",
    "MetricsReport",
    "ModelDims",
    "ModelParams",
    "SynthConfig",
    "TrainConfig",
    "TrainState",
    "VideoSample",
    "evaluate",
    "hos",
    "infer",
    "init_params",
    "load_manifest",
    "synth_dataset",
    "train",
    "write_manifest",
]
