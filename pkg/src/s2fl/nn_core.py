"""Dense network engine with layer-boundary splits.

Layers are numbered from 1 in every public API. A split index ``s`` gives the
client layers ``1..s`` and the server layers ``s+1..L``. The final layer of a
full model carries the ``softmax_output`` activation: its forward output is the
raw logits and the softmax lives in :func:`cross_entropy_loss`.

Numerics run in float64; communicated parameters and features are accounted
as 32-bit reals (:data:`BYTES_PER_REAL`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, InvalidSplitError, ShapeError

BYTES_PER_REAL = 4
ACTIVATIONS = ("identity", "relu", "softmax_output")


@dataclass
class Layer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy(), self.activation)


def init_layer(in_dim: int, out_dim: int, activation: str, rng: np.random.Generator) -> Layer:
    bound = 1.0 / np.sqrt(in_dim)
    weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    bias = rng.uniform(-bound, bound, size=out_dim)
    return Layer(weight, bias, activation)


def layer_flops(layer: Layer) -> int:
    """FLOPs for one forward and one backward pass of a single sample.

    forward: 2*in*out multiply-adds + out bias adds
    backward: 2*in*out weight grad + 2*in*out input grad + out bias grad
    total: 6*in*out + 2*out
    """
    return 6 * layer.in_dim * layer.out_dim + 2 * layer.out_dim


def _check_chain(layers: Sequence[Layer]) -> None:
    for i in range(len(layers) - 1):
        if layers[i].out_dim != layers[i + 1].in_dim:
            raise ShapeError(
                f"layer {i + 1} out_dim {layers[i].out_dim} does not feed "
                f"layer {i + 2} in_dim {layers[i + 1].in_dim}"
            )


@dataclass
class ModelPortion:
    """A contiguous run of layers ``entry_index..exit_index`` of a full model.

    An empty portion has ``exit_index == entry_index - 1``.
    """

    layers: list[Layer]
    entry_index: int = 1
    exit_index: int | None = None

    def __post_init__(self):
        if self.exit_index is None:
            self.exit_index = self.entry_index + len(self.layers) - 1
        if self.exit_index - self.entry_index + 1 != len(self.layers):
            raise ShapeError(
                f"portion [{self.entry_index}..{self.exit_index}] holds {len(self.layers)} layers"
            )
        _check_chain(self.layers)

    @property
    def param_count(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def param_bytes(self) -> int:
        return BYTES_PER_REAL * self.param_count

    @property
    def flops_per_sample(self) -> int:
        return flop_count(self)

    def contains(self, index: int) -> bool:
        return self.entry_index <= index <= self.exit_index

    def layer(self, index: int) -> Layer:
        """Layer by its full-model number."""
        if not self.contains(index):
            raise IndexError(f"layer {index} not in portion [{self.entry_index}..{self.exit_index}]")
        return self.layers[index - self.entry_index]

    def sub_portion(self, entry_index: int) -> "ModelPortion":
        """View of the layers from ``entry_index`` to the end (shares arrays)."""
        start = entry_index - self.entry_index
        if start < 0 or entry_index > self.exit_index + 1:
            raise ShapeError(
                f"entry layer {entry_index} outside portion [{self.entry_index}..{self.exit_index}]"
            )
        return ModelPortion(self.layers[start:], entry_index, self.exit_index)

    def copy(self) -> "ModelPortion":
        return ModelPortion([layer.copy() for layer in self.layers], self.entry_index, self.exit_index)


@dataclass
class FullModel:
    layers: list[Layer]
    split_candidates: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        _check_chain(self.layers)
        self.split_candidates = tuple(int(s) for s in self.split_candidates)
        cands = self.split_candidates
        if any(b <= a for a, b in zip(cands, cands[1:])):
            raise InvalidSplitError(f"split candidates {cands} are not strictly increasing")
        if cands and (cands[0] < 1 or cands[-1] > len(self.layers) - 1):
            raise InvalidSplitError(f"split candidates {cands} outside [1, {len(self.layers) - 1}]")
        for i, layer in enumerate(self.layers[:-1]):
            if layer.activation == "softmax_output":
                raise ValueError(f"softmax_output on layer {i + 1}, which is not the last layer")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def K(self) -> int:
        return len(self.split_candidates)

    def as_portion(self) -> ModelPortion:
        """The whole model as a portion; shares arrays with the model."""
        return ModelPortion(self.layers, 1, self.n_layers)

    @property
    def param_bytes(self) -> int:
        return self.as_portion().param_bytes

    @property
    def flops_per_sample(self) -> int:
        return flop_count(self.as_portion())

    def copy(self) -> "FullModel":
        return FullModel([layer.copy() for layer in self.layers], self.split_candidates)


def build_model(
    dims: Sequence[int],
    split_candidates: Sequence[int],
    rng: np.random.Generator,
) -> FullModel:
    """ReLU MLP with ``dims = [input, hidden..., classes]`` and a logits head."""
    if len(dims) < 2:
        raise ShapeError("need at least an input and an output width")
    layers = []
    n = len(dims) - 1
    for i in range(n):
        act = "softmax_output" if i == n - 1 else "relu"
        layers.append(init_layer(dims[i], dims[i + 1], act, rng))
    return FullModel(layers, tuple(split_candidates))


def flop_count(portion: ModelPortion) -> int:
    return sum(layer_flops(layer) for layer in portion.layers)


def forward_portion(portion: ModelPortion, inputs: np.ndarray):
    """Run ``inputs`` through the portion.

    Returns ``(outputs, cache)``; the cache holds each layer's input and
    pre-activation, enough for :func:`portion_gradients`.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"inputs must be 2-D, got shape {x.shape}")
    cache = []
    for offset, layer in enumerate(portion.layers):
        if x.shape[1] != layer.in_dim:
            raise ShapeError(
                f"layer {portion.entry_index + offset} expects width {layer.in_dim}, got {x.shape[1]}"
            )
        z = x @ layer.weight.T + layer.bias
        cache.append((x, z))
        x = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return x, cache


def portion_gradients(portion: ModelPortion, cache, upstream_grad: np.ndarray):
    """Backpropagate without touching parameters.

    Returns ``(input_grad, grads)`` where ``grads[k]`` is ``(dW, db)`` for the
    k-th layer of the portion.
    """
    g = np.asarray(upstream_grad, dtype=np.float64)
    if not portion.layers:
        return g, []
    out_dim = portion.layers[-1].out_dim
    if g.ndim != 2 or g.shape != (cache[-1][1].shape[0], out_dim):
        raise ShapeError(
            f"upstream gradient shape {g.shape} does not match portion output "
            f"({cache[-1][1].shape[0]}, {out_dim}) at layer {portion.exit_index}"
        )
    grads = [None] * len(portion.layers)
    for k in range(len(portion.layers) - 1, -1, -1):
        layer = portion.layers[k]
        x, z = cache[k]
        dz = g * (z > 0.0) if layer.activation == "relu" else g
        grads[k] = (dz.T @ x, dz.sum(axis=0))
        g = dz @ layer.weight
    return g, grads


def sgd_step(layers: Sequence[Layer], grads, lr: float, l2: float = 0.0) -> None:
    """In-place ``w <- w - lr * (grad + l2 * w)``."""
    for layer, (dw, db) in zip(layers, grads):
        if l2:
            dw = dw + l2 * layer.weight
            db = db + l2 * layer.bias
        layer.weight -= lr * dw
        layer.bias -= lr * db


def backward_portion(portion: ModelPortion, cache, upstream_grad: np.ndarray, lr: float) -> np.ndarray:
    """Backpropagate, apply one SGD step in place, return the input gradient.

    The input gradient is computed with the pre-update weights.
    """
    input_grad, grads = portion_gradients(portion, cache, upstream_grad)
    if lr:
        sgd_step(portion.layers, grads, lr)
    return input_grad


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] == 0:
        raise DomainError("cross-entropy of an empty batch")
    if logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"{logits.shape[0]} logit rows for {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DomainError(f"labels outside [0, {logits.shape[1]})")
    m = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(m)
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= m
    return float(loss), grad


def split_model(model: FullModel, split_index: int):
    """Cut ``model`` after layer ``split_index``; the portions copy the arrays."""
    if split_index not in model.split_candidates:
        raise InvalidSplitError(
            f"split {split_index} is not one of the candidates {model.split_candidates}"
        )
    return split_at(model, split_index)


def split_at(model: FullModel, split_index: int):
    """Like :func:`split_model` but accepts any boundary in ``[0, L]``."""
    if not 0 <= split_index <= model.n_layers:
        raise InvalidSplitError(f"split {split_index} outside [0, {model.n_layers}]")
    layers = [layer.copy() for layer in model.layers]
    client = ModelPortion(layers[:split_index], 1, split_index)
    server = ModelPortion(layers[split_index:], split_index + 1, model.n_layers)
    return client, server


def merge_portions(client: ModelPortion, server: ModelPortion, split_candidates=()) -> FullModel:
    if client.exit_index + 1 != server.entry_index or client.entry_index != 1:
        raise ShapeError(
            f"portions [{client.entry_index}..{client.exit_index}] and "
            f"[{server.entry_index}..{server.exit_index}] are not adjacent from layer 1"
        )
    layers = [layer.copy() for layer in client.layers + server.layers]
    return FullModel(layers, tuple(split_candidates))
