"""Mixed time-step training for spiking neural networks, with an event-driven simulator."""

from __future__ import annotations

from .graph import (
    LayerSpec,
    StagedNetwork,
    TemporalConfig,
    build_network,
    fold_bn_remove_bias,
    forward,
    load_checkpoint,
    partition,
    preset,
    save_checkpoint,
)
from .neuron import NeuronParams, SurrogateSpec
from .training import TrainConfig, bn_calibrate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "LayerSpec",
    "NeuronParams",
    "StagedNetwork",
    "SurrogateSpec",
    "TemporalConfig",
    "TrainConfig",
    "bn_calibrate",
    "build_network",
    "evaluate",
    "fold_bn_remove_bias",
    "forward",
    "load_checkpoint",
    "partition",
    "preset",
    "save_checkpoint",
    "train",
]
