"""
Dense-tensor numerical core.

Tensors are float64 numpy arrays in row-major order. A Model is an ordered list of layers plus an
optional NoiseSpec per layer; forward passes record a Tape that the reverse pass consumes, giving
parameter gradients for training, input gradients for attacks and pathwise gradients for the
learnable noise scales. Forward and backward never mutate the model, so one model can be evaluated
from many threads at once.
"""
import copy
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigurationError, InputError, NumericError
from .noise import NoiseDraw, NoiseSpec, NoiseTarget, layer_perturbation

Shape = Tuple[int, ...]


def _as_tensor(values, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise InputError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(array)


class Layer:
    """Base class for all layer kinds."""

    kind = "layer"

    def params(self) -> List[np.ndarray]:
        return []

    def set_params(self, params: Sequence[np.ndarray]):
        if params:
            raise ConfigurationError(f"{self.kind} layer has no parameters")

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def forward(self, x: np.ndarray, params: List[np.ndarray]) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(
        self, grad_out: np.ndarray, cache: Any, params: List[np.ndarray]
    ) -> Tuple[np.ndarray, List[np.ndarray]]:
        raise NotImplementedError

    def spec(self) -> Dict[str, Any]:
        return {"kind": self.kind}

    @property
    def parametric(self) -> bool:
        return bool(self.params())


class Dense(Layer):
    """Fully connected layer, weight shaped (in_features, out_features)."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, weight=None, bias=None):
        if in_features < 1 or out_features < 1:
            raise ConfigurationError("dense layer dimensions must be positive")
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = np.zeros((in_features, out_features))
        self.bias = np.zeros(out_features)
        if weight is not None or bias is not None:
            self.set_params(
                [
                    self.weight if weight is None else weight,
                    self.bias if bias is None else bias,
                ]
            )

    def params(self) -> List[np.ndarray]:
        return [self.weight, self.bias]

    def set_params(self, params: Sequence[np.ndarray]):
        weight, bias = (np.array(p, dtype=np.float64) for p in params)
        if weight.shape != (self.in_features, self.out_features):
            raise ConfigurationError(
                f"dense weight must have shape {(self.in_features, self.out_features)}, "
                f"got {weight.shape}"
            )
        if bias.shape != (self.out_features,):
            raise ConfigurationError(
                f"dense bias must have shape {(self.out_features,)}, got {bias.shape}"
            )
        self.weight, self.bias = weight, bias

    def output_shape(self, input_shape: Shape) -> Shape:
        if tuple(input_shape) != (self.in_features,):
            raise ConfigurationError(
                f"dense layer expects input shape ({self.in_features},), got {tuple(input_shape)}"
            )
        return (self.out_features,)

    def forward(self, x, params):
        weight, bias = params
        return x @ weight + bias, x

    def backward(self, grad_out, cache, params):
        weight, _ = params
        return grad_out @ weight.T, [cache.T @ grad_out, grad_out.sum(axis=0)]

    def spec(self):
        return {
            "kind": self.kind,
            "in_features": self.in_features,
            "out_features": self.out_features,
        }


class Conv2D(Layer):
    """2-D convolution over (N, C, H, W) inputs with square kernels and zero padding."""

    kind = "conv2d"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int = 0,
        weight=None,
        bias=None,
    ):
        if min(in_channels, out_channels, kernel_size, stride) < 1 or padding < 0:
            raise ConfigurationError("conv2d dimensions must be positive and padding non-negative")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)
        self.weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size))
        self.bias = np.zeros(out_channels)
        if weight is not None or bias is not None:
            self.set_params(
                [
                    self.weight if weight is None else weight,
                    self.bias if bias is None else bias,
                ]
            )

    def params(self):
        return [self.weight, self.bias]

    def set_params(self, params):
        weight, bias = (np.array(p, dtype=np.float64) for p in params)
        expected = (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        if weight.shape != expected:
            raise ConfigurationError(
                f"conv2d weight must have shape {expected}, got {weight.shape}"
            )
        if bias.shape != (self.out_channels,):
            raise ConfigurationError(
                f"conv2d bias must have shape {(self.out_channels,)}, got {bias.shape}"
            )
        self.weight, self.bias = weight, bias

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ConfigurationError(
                f"conv2d expects input shape ({self.in_channels}, H, W), got {tuple(input_shape)}"
            )
        _, height, width = input_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        if height + 2 * p < k or width + 2 * p < k:
            raise ConfigurationError(f"conv2d kernel {k} larger than padded input {input_shape}")
        return (self.out_channels, (height + 2 * p - k) // s + 1, (width + 2 * p - k) // s + 1)

    def _windows(self, x: np.ndarray) -> np.ndarray:
        p, k, s = self.padding, self.kernel_size, self.stride
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
        return windows[:, :, ::s, ::s]

    def forward(self, x, params):
        weight, bias = params
        windows = self._windows(x)
        out = np.einsum("nchwij,ocij->nohw", windows, weight) + bias[None, :, None, None]
        return out, (x.shape, windows)

    def backward(self, grad_out, cache, params):
        weight, _ = params
        x_shape, windows = cache
        k, s, p = self.kernel_size, self.stride, self.padding
        grad_w = np.einsum("nchwij,nohw->ocij", windows, grad_out)
        grad_b = grad_out.sum(axis=(0, 2, 3))
        grad_windows = np.einsum("nohw,ocij->nchwij", grad_out, weight)

        n, c, height, width = x_shape
        out_h, out_w = grad_out.shape[2], grad_out.shape[3]
        grad_padded = np.zeros((n, c, height + 2 * p, width + 2 * p))
        for i in range(k):
            for j in range(k):
                grad_padded[
                    :, :, i : i + s * (out_h - 1) + 1 : s, j : j + s * (out_w - 1) + 1 : s
                ] += grad_windows[..., i, j]
        return grad_padded[:, :, p : p + height, p : p + width], [grad_w, grad_b]

    def spec(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, params):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, grad_out, cache, params):
        # subgradient 0 at the kink
        return np.where(cache, grad_out, 0.0), []


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, params):
        return x.reshape(x.shape[0], int(np.prod(x.shape[1:]))), x.shape

    def backward(self, grad_out, cache, params):
        return grad_out.reshape(cache), []


class AvgPool(Layer):
    """Non-overlapping average pooling with a square window."""

    kind = "avgpool"

    def __init__(self, window: int = 2):
        if window < 1:
            raise ConfigurationError("avgpool window must be positive")
        self.window = int(window)

    def output_shape(self, input_shape):
        w = self.window
        if len(input_shape) != 3 or input_shape[1] % w or input_shape[2] % w:
            raise ConfigurationError(
                f"avgpool window {w} does not tile input shape {tuple(input_shape)}"
            )
        return (input_shape[0], input_shape[1] // w, input_shape[2] // w)

    def forward(self, x, params):
        n, c, height, width = x.shape
        w = self.window
        return x.reshape(n, c, height // w, w, width // w, w).mean(axis=(3, 5)), None

    def backward(self, grad_out, cache, params):
        w = self.window
        expanded = np.repeat(np.repeat(grad_out, w, axis=2), w, axis=3)
        return expanded * (1.0 / (w * w)), []

    def spec(self):
        return {"kind": self.kind, "window": self.window}


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, Flatten, AvgPool)}


@dataclass
class Tape:
    """Everything the reverse pass needs from one forward pass."""

    caches: List[Any]
    params: List[List[np.ndarray]]
    noise_units: List[Optional[np.ndarray]]
    batch_shape: Shape


@dataclass
class Gradients:
    """Gradients of one scalar objective."""

    inputs: np.ndarray
    params: List[np.ndarray]
    alphas: Dict[int, float] = field(default_factory=dict)


class Model:
    """Ordered layer stack with optional per-layer noise."""

    def __init__(
        self,
        layers: Sequence[Layer],
        input_shape: Sequence[int],
        noise: Optional[Sequence[Optional[NoiseSpec]]] = None,
        input_domain: Tuple[float, float] = (0.0, 1.0),
    ):
        self.layers = list(layers)
        self.input_shape: Shape = tuple(int(d) for d in input_shape)
        self.noise: List[Optional[NoiseSpec]] = (
            list(noise) if noise is not None else [None] * len(self.layers)
        )
        self.input_domain = (float(input_domain[0]), float(input_domain[1]))
        if not self.layers:
            raise ConfigurationError("a model needs at least one layer")
        if len(self.noise) != len(self.layers):
            raise ConfigurationError("noise specs must align with layers")
        if self.input_domain[0] >= self.input_domain[1]:
            raise ConfigurationError(f"invalid input domain {self.input_domain}")
        self.shapes = self._infer_shapes()
        if len(self.shapes[-1]) != 1:
            raise ConfigurationError(f"final layer must emit class logits, got {self.shapes[-1]}")
        for index, spec in enumerate(self.noise):
            weightless = not self.layers[index].parametric
            if spec is not None and spec.target is NoiseTarget.WEIGHT and weightless:
                raise ConfigurationError(
                    f"weight noise on layer {index} ({self.layers[index].kind}) without weights"
                )

    def _infer_shapes(self) -> List[Shape]:
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        return shapes

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def parameters(self) -> List[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def set_parameters(self, params: Sequence[np.ndarray]):
        params = list(params)
        offset = 0
        for layer in self.layers:
            count = len(layer.params())
            layer.set_params(params[offset : offset + count])
            offset += count
        if offset != len(params):
            raise ConfigurationError(f"expected {offset} parameter tensors, got {len(params)}")

    def noisy_layers(self) -> List[int]:
        return [i for i, spec in enumerate(self.noise) if spec is not None and spec.enabled]

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def check_batch(self, batch) -> np.ndarray:
        batch = _as_tensor(batch, "batch")
        if batch.ndim != len(self.input_shape) + 1 or batch.shape[1:] != self.input_shape:
            raise ConfigurationError(
                f"batch shape {batch.shape} does not match model input {self.input_shape}"
            )
        return batch

    def check_domain(self, batch: np.ndarray):
        low, high = self.input_domain
        if batch.size and (batch.min() < low or batch.max() > high):
            raise InputError(f"inputs must lie within the input domain [{low}, {high}]")

    def forward(
        self, batch, noise_draw: Optional[NoiseDraw] = None, sigma_input: float = 0.0
    ) -> np.ndarray:
        return self.forward_with_tape(batch, noise_draw, sigma_input)[0]

    def forward_with_tape(
        self, batch, noise_draw: Optional[NoiseDraw] = None, sigma_input: float = 0.0
    ) -> Tuple[np.ndarray, Tape]:
        """
        Run the layers and record a tape.

        Layer noise is applied only when a noise draw is supplied; input noise of scale
        sigma_input uses layer slot 0 of the draw and layer i uses slot i + 1.
        """
        h = self.check_batch(batch)
        batch_shape = h.shape
        if sigma_input < 0:
            raise ConfigurationError(f"input noise scale must be non-negative, got {sigma_input}")
        if sigma_input > 0:
            if noise_draw is None:
                raise ConfigurationError("input noise requires a noise draw")
            h = h + sigma_input * noise_draw.for_layer(0).standard_normal(h.shape)

        caches, used_params, units = [], [], []
        for index, layer in enumerate(self.layers):
            spec = self.noise[index] if noise_draw is not None else None
            active = spec is not None and spec.enabled
            params = layer.params()
            unit = None
            if active:
                draw = noise_draw.for_layer(index + 1)
                if spec.target is NoiseTarget.INPUT:
                    perturbation, unit = layer_perturbation(spec, h.shape, draw)
                    h = h + perturbation
                elif spec.target is NoiseTarget.WEIGHT:
                    perturbation, unit = layer_perturbation(
                        spec, params[0].shape, draw, reference=params[0]
                    )
                    params = [params[0] + perturbation] + params[1:]
            out, cache = layer.forward(h, params)
            if active and spec.target is NoiseTarget.ACTIVATION:
                perturbation, unit = layer_perturbation(spec, out.shape, draw)
                out = out + perturbation
            if not np.all(np.isfinite(out)):
                raise NumericError(f"non-finite output in layer {index} ({layer.kind})")
            caches.append(cache)
            used_params.append(params)
            units.append(unit)
            h = out
        return h, Tape(caches, used_params, units, batch_shape)

    def backward(self, tape: Tape, grad_logits: np.ndarray) -> Gradients:
        """Propagate d(objective)/d(logits) back to inputs, parameters and noise scales."""
        g = np.asarray(grad_logits, dtype=np.float64)
        expected = (tape.batch_shape[0], self.num_classes)
        if g.shape != expected:
            raise ConfigurationError(f"logit gradient shape {g.shape} != {expected}")
        per_layer: List[List[np.ndarray]] = [[] for _ in self.layers]
        alphas: Dict[int, float] = {}
        for index in reversed(range(len(self.layers))):
            layer = self.layers[index]
            unit = tape.noise_units[index]
            target = self.noise[index].target if unit is not None else None
            if target is NoiseTarget.ACTIVATION:
                alphas[index] = float(np.sum(g * unit))
            g, grads = layer.backward(g, tape.caches[index], tape.params[index])
            if target is NoiseTarget.WEIGHT:
                alphas[index] = float(np.sum(grads[0] * unit))
            elif target is NoiseTarget.INPUT:
                alphas[index] = float(np.sum(g * unit))
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in layer {index} ({layer.kind})")
            per_layer[index] = grads
        return Gradients(g, [p for grads in per_layer for p in grads], alphas)


def _check_labels(labels, batch_size: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch_size,):
        raise InputError(f"expected {batch_size} labels, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be integer class indices")
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    return labels


def softmax(logits) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    encoded = np.zeros((len(labels), num_classes))
    encoded[np.arange(len(labels)), labels] = 1.0
    return encoded


def per_example_cross_entropy(logits, labels) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[0], logits.shape[-1])
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def cross_entropy(logits, labels) -> float:
    """Mean of -log softmax(logits)[label] over the batch; 0 for an empty batch."""
    losses = per_example_cross_entropy(logits, labels)
    return float(losses.mean()) if losses.size else 0.0


def soft_cross_entropy(logits, targets) -> np.ndarray:
    """Per-example cross-entropy against probability targets."""
    return -(np.asarray(targets) * log_softmax(logits)).sum(axis=-1)


def cross_entropy_logit_grad(logits, labels) -> np.ndarray:
    """Per-example d CE / d logits, i.e. softmax - onehot."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[0], logits.shape[-1])
    return softmax(logits) - one_hot(labels, logits.shape[-1])


def forward(model: Model, batch, noise_draw: Optional[NoiseDraw] = None) -> np.ndarray:
    return model.forward(batch, noise_draw)


def loss_and_gradients(
    model: Model, batch, labels, noise_draw: Optional[NoiseDraw] = None
) -> Tuple[float, Gradients]:
    """Mean cross-entropy and its gradients."""
    logits, tape = model.forward_with_tape(batch, noise_draw)
    grad = cross_entropy_logit_grad(logits, labels)
    if len(grad):
        grad = grad / len(grad)
    return cross_entropy(logits, labels), model.backward(tape, grad)


def grad_params(model: Model, batch, labels, noise_draw: Optional[NoiseDraw] = None):
    """Gradients of the mean cross-entropy, aligned with model.parameters()."""
    return loss_and_gradients(model, batch, labels, noise_draw)[1].params


def grad_input(model: Model, batch, labels, noise_draw: Optional[NoiseDraw] = None) -> np.ndarray:
    """Per-example input gradients, i.e. the gradient of the summed cross-entropy."""
    logits, tape = model.forward_with_tape(batch, noise_draw)
    return model.backward(tape, cross_entropy_logit_grad(logits, labels)).inputs


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: Optional[List[np.ndarray]] = None,
    decay_mask: Optional[Sequence[bool]] = None,
) -> List[np.ndarray]:
    """
    One SGD update with heavy-ball momentum and L2 weight decay.

    d = g + weight_decay * p; v = momentum * v + d; p' = p - lr * v. When a velocity list is
    given it holds the momentum buffers and is updated in place.
    """
    if lr < 0:
        raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
    if momentum < 0 or weight_decay < 0:
        raise ConfigurationError("momentum and weight decay must be non-negative")
    if len(params) != len(grads):
        raise ConfigurationError("parameter and gradient lists differ in length")
    updated = []
    for index, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ConfigurationError(f"gradient {index} shape {g.shape} != parameter {p.shape}")
        if weight_decay and (decay_mask is None or decay_mask[index]):
            g = g + weight_decay * p
        if momentum:
            if velocity is None:
                raise ConfigurationError("momentum requires velocity buffers")
            velocity[index] = momentum * velocity[index] + g
            g = velocity[index]
        updated.append(p - lr * g)
    return updated


class SGD:
    """Stateful SGD holding momentum buffers for a fixed parameter list."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr < 0:
            raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Optional[List[np.ndarray]] = None

    def step(
        self,
        params: Sequence[np.ndarray],
        grads: Sequence[np.ndarray],
        decay_mask: Optional[Sequence[bool]] = None,
    ) -> List[np.ndarray]:
        if self.velocity is None:
            self.velocity = [np.zeros(np.shape(p)) for p in params]
        return sgd_step(
            params, grads, self.lr, self.momentum, self.weight_decay, self.velocity, decay_mask
        )


def exact_sum(values, axis: int = 0) -> np.ndarray:
    """
    Correctly rounded sum along one axis.

    The result does not depend on the order of the summed entries, so reductions over Monte
    Carlo samples are permutation invariant and independent of how work was split across threads.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return np.zeros(np.delete(values.shape, axis))
    if values.ndim == 1:
        return np.float64(math.fsum(values))
    return np.apply_along_axis(math.fsum, axis, values)
