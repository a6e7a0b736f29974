"""
Gaussian noise injection into inputs, weights or activations.

Every Gaussian vector comes from a counter-based Philox stream keyed by (stream, seed, sample,
layer), so a given stream id reproduces the same vector regardless of evaluation order or thread.
Smoothing, attacks and black-box queries each draw from their own stream family and never share a
vector.
"""
from dataclasses import dataclass, replace
from enum import Enum
from typing import TYPE_CHECKING, Dict, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigurationError

if TYPE_CHECKING:
    from .engine import Model


class NoiseStream(int, Enum):
    SMOOTHING = 0
    ATTACK = 1
    QUERY = 2


class NoiseTarget(str, Enum):
    INPUT = "input"
    WEIGHT = "weight"
    ACTIVATION = "activation"


@dataclass
class NoiseSpec:
    """
    Noise attached to one layer.

    Input and activation noise have per-entry scale alpha * base_sigma. Weight noise follows
    parametric noise injection: the scale is alpha * base_sigma * std(W) with std(W) taken over
    the layer's current weights and treated as a constant when differentiating.
    """

    target: NoiseTarget
    base_sigma: float = 1.0
    alpha: float = 0.25
    learnable: bool = True
    enabled: bool = True

    def __post_init__(self):
        self.target = NoiseTarget(self.target)
        if self.base_sigma < 0:
            raise ConfigurationError(f"base_sigma must be non-negative, got {self.base_sigma}")

    @property
    def effective_scale(self) -> float:
        return self.alpha * self.base_sigma


@dataclass(frozen=True)
class NoiseDraw:
    """Identifies one reproducible Gaussian stream: (seed, sample, layer) within a stream family."""

    seed: int
    sample: int = 0
    layer: int = 0
    stream: NoiseStream = NoiseStream.SMOOTHING

    def __post_init__(self):
        if self.seed < 0 or self.sample < 0 or self.layer < 0:
            raise ConfigurationError(f"noise stream ids must be non-negative: {self}")

    def for_layer(self, layer: int) -> "NoiseDraw":
        return replace(self, layer=layer)

    def for_sample(self, sample: int) -> "NoiseDraw":
        return replace(self, sample=sample)

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(
            self.seed, spawn_key=(int(self.stream), self.sample, self.layer)
        )
        return np.random.Generator(np.random.Philox(sequence))

    def standard_normal(self, shape: Sequence[int]) -> np.ndarray:
        return self.generator().standard_normal(tuple(shape))


def draw_gaussian(spec: NoiseSpec, shape: Sequence[int], draw: NoiseDraw) -> np.ndarray:
    """I.i.d. N(0, (alpha * base_sigma)^2) entries from the draw's stream."""
    if not spec.enabled:
        raise ConfigurationError("cannot draw from a disabled noise spec")
    scale = spec.effective_scale
    if scale < 0:
        raise ConfigurationError(f"effective noise scale must be non-negative, got {scale}")
    if scale == 0:
        return np.zeros(tuple(shape))
    return scale * draw.standard_normal(shape)


def layer_perturbation(
    spec: NoiseSpec,
    shape: Sequence[int],
    draw: NoiseDraw,
    reference: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Perturbation for one layer and its derivative with respect to alpha.

    Returns (alpha * unit, unit) where unit = base_sigma * xi, times std(reference)
    for weight noise.
    """
    if spec.alpha < 0:
        raise ConfigurationError(f"noise alpha must be non-negative, got {spec.alpha}")
    scale = spec.base_sigma
    if spec.target is NoiseTarget.WEIGHT:
        scale *= float(np.std(reference))
    unit = scale * draw.standard_normal(shape)
    return spec.alpha * unit, unit


def noisy_forward(model: "Model", batch, sigma_input: float, draw: NoiseDraw) -> np.ndarray:
    """Logits of batch + eta, eta ~ N(0, sigma_input^2 I), with layer noise from the same draw."""
    return model.forward(batch, draw, sigma_input=sigma_input)


def grad_alpha(model: "Model", batch, labels, draw: NoiseDraw) -> Dict[int, float]:
    """
    Pathwise d(mean CE)/d(alpha) for every learnable noise scale, Gaussian sample held fixed.

    Layers whose noise is disabled or not learnable report 0.
    """
    from .engine import loss_and_gradients

    _, grads = loss_and_gradients(model, batch, labels, draw)
    result = {}
    for index, spec in enumerate(model.noise):
        if spec is None or not spec.learnable:
            continue
        result[index] = grads.alphas.get(index, 0.0) if spec.enabled else 0.0
    return result
