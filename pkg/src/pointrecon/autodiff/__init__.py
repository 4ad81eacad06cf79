"""Minimal reverse-mode autodiff: tensors on a tape, a small layer zoo and Adam."""

from .layers import Layer, LayerSpec, forward, init_layer, parameters, run
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, gradients, no_grad

__all__ = [
    "AdamState",
    "Layer",
    "LayerSpec",
    "Tape",
    "Tensor",
    "adam_step",
    "forward",
    "gradients",
    "init_layer",
    "no_grad",
    "parameters",
    "run",
]
