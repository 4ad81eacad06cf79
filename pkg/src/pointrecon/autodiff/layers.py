"""Layer specifications, parameter initialization and the layer-level forward."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("linear", "conv2d", "conv3d", "relu", "sigmoid", "nearest_upsample3d", "concat", "mean")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0
    factor: int = 2
    axis: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("linear", "conv2d", "conv3d"):
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"{self.kind}: channel counts must be positive")
        if self.kind in ("conv2d", "conv3d"):
            if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
                raise ValueError(f"{self.kind}: invalid kernel/stride/padding")

    @property
    def has_params(self) -> bool:
        return self.kind in ("linear", "conv2d", "conv3d")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Layer:
    spec: LayerSpec
    params: dict = field(default_factory=dict)
    name: str = ""


def init_layer(spec: LayerSpec, rng: np.random.Generator, name: str = "") -> Layer:
    """Fan-in scaled uniform weights in ``±sqrt(6 / fan_in)``, zero biases."""
    params = {}
    if spec.kind == "linear":
        shape = (spec.out_channels, spec.in_channels)
    elif spec.kind == "conv2d":
        shape = (spec.out_channels, spec.in_channels) + (spec.kernel_size,) * 2
    elif spec.kind == "conv3d":
        shape = (spec.out_channels, spec.in_channels) + (spec.kernel_size,) * 3
    else:
        return Layer(spec, params, name)
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    params["weight"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=f"{name}.weight")
    params["bias"] = Tensor(np.zeros(spec.out_channels), requires_grad=True, name=f"{name}.bias")
    return Layer(spec, params, name)


def _check(cond, layer: Layer, msg: str):
    if not cond:
        label = layer.name or layer.spec.kind
        raise ValueError(f"layer {label} ({layer.spec.kind}): {msg}")


def forward(layer: Layer, *inputs: Tensor) -> Tensor:
    """Apply one layer; shape errors name the layer and the offending dimensions."""
    s = layer.spec
    if s.kind == "concat":
        _check(len(inputs) >= 1, layer, "needs at least one input")
        ref = list(inputs[0].shape)
        for t in inputs[1:]:
            other = list(t.shape)
            _check(
                len(other) == len(ref) and all(a == b for i, (a, b) in enumerate(zip(ref, other)) if i != s.axis),
                layer,
                f"cannot concatenate shapes {tuple(ref)} and {tuple(other)} along axis {s.axis}",
            )
        return T.concat(inputs, axis=s.axis)
    _check(len(inputs) == 1, layer, f"expects one input, got {len(inputs)}")
    x = inputs[0]
    if s.kind == "linear":
        _check(x.ndim == 2 and x.shape[1] == s.in_channels, layer,
               f"expected input (N, {s.in_channels}), got {x.shape}")
        return T.linear(x, layer.params["weight"], layer.params["bias"])
    if s.kind in ("conv2d", "conv3d"):
        nd = 2 if s.kind == "conv2d" else 3
        _check(x.ndim == nd + 2 and x.shape[1] == s.in_channels, layer,
               f"expected input (N, {s.in_channels}, {', '.join(['*'] * nd)}), got {x.shape}")
        for n in x.shape[2:]:
            _check(n + 2 * s.padding >= s.kernel_size, layer,
                   f"spatial extent {n} too small for kernel {s.kernel_size} with padding {s.padding}")
        return T.conv(x, layer.params["weight"], layer.params["bias"], stride=s.stride, padding=s.padding)
    if s.kind == "relu":
        return T.relu(x)
    if s.kind == "sigmoid":
        return T.sigmoid(x)
    if s.kind == "nearest_upsample3d":
        _check(x.ndim == 5, layer, f"expected (N, C, D, H, W), got {x.shape}")
        return T.upsample_nearest(x, s.factor)
    if s.kind == "mean":
        _check(0 <= s.axis < x.ndim, layer, f"axis {s.axis} out of range for shape {x.shape}")
        return T.mean(x, axis=s.axis)
    raise AssertionError(s.kind)


def run(layers, x: Tensor) -> Tensor:
    for layer in layers:
        x = forward(layer, x)
    return x


def parameters(layers) -> list:
    return [p for layer in layers for p in layer.params.values()]
