"""Architecture builders for the desk-scale classifiers."""
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from .engine import AvgPool, Conv2D, Dense, Flatten, Layer, Model, ReLU
from .exceptions import ConfigurationError
from .noise import NoiseSpec, NoiseTarget


class Architecture(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"
    CNN = "cnn"


class NoisePlacement(str, Enum):
    NONE = "none"
    INPUT = "input"
    WEIGHT = "weight"
    ACTIVATION = "activation"


@dataclass
class ModelSpec:
    arch: Architecture = Architecture.MLP
    hidden: int = 32
    channels: int = 8
    noise_target: NoisePlacement = NoisePlacement.NONE
    alpha: float = 0.25
    base_sigma: float = 1.0
    learnable: bool = True

    def __post_init__(self):
        self.arch = Architecture(self.arch)
        self.noise_target = NoisePlacement(self.noise_target)
        if self.hidden < 1 or self.channels < 1:
            raise ConfigurationError("model.hidden and model.channels must be positive")
        if self.alpha < 0 or self.base_sigma < 0:
            raise ConfigurationError("model.alpha and model.base_sigma must be non-negative")


def _dense(rng, fan_in: int, fan_out: int, gain: float = 2.0) -> Dense:
    weight = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))
    return Dense(fan_in, fan_out, weight=weight)


def _layers(spec: ModelSpec, input_shape: Sequence[int], num_classes: int, rng) -> List[Layer]:
    features = int(np.prod(input_shape))
    head: List[Layer] = [Flatten()] if len(input_shape) > 1 else []
    if spec.arch is Architecture.LINEAR:
        return head + [_dense(rng, features, num_classes, gain=1.0)]
    if spec.arch is Architecture.MLP:
        return head + [
            _dense(rng, features, spec.hidden),
            ReLU(),
            _dense(rng, spec.hidden, spec.hidden),
            ReLU(),
            _dense(rng, spec.hidden, num_classes, gain=1.0),
        ]
    if len(input_shape) != 3:
        raise ConfigurationError(f"model.arch=cnn needs (C, H, W) inputs, got {tuple(input_shape)}")
    channels, height, width = input_shape
    fan_in = channels * 9
    conv = Conv2D(
        channels,
        spec.channels,
        kernel_size=3,
        padding=1,
        weight=rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.channels, channels, 3, 3)),
    )
    pooled = spec.channels * (height // 2) * (width // 2)
    return [conv, ReLU(), AvgPool(2), Flatten(), _dense(rng, pooled, num_classes, gain=1.0)]


def build_model(
    spec: ModelSpec, input_shape: Sequence[int], num_classes: int, seed: int = 0
) -> Model:
    """
    Build a freshly initialised model.

    With a noise placement other than none, every parametric layer gets its own NoiseSpec.
    """
    rng = np.random.default_rng(seed)
    layers = _layers(spec, input_shape, num_classes, rng)
    noise: List[Optional[NoiseSpec]] = [None] * len(layers)
    if spec.noise_target is not NoisePlacement.NONE:
        target = NoiseTarget(spec.noise_target.value)
        for index, layer in enumerate(layers):
            if layer.parametric:
                noise[index] = NoiseSpec(target, spec.base_sigma, spec.alpha, spec.learnable)
    return Model(layers, input_shape, noise)
