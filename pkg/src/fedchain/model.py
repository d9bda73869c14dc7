"""Dense MLP with ReLU hidden layers, softmax output and Adam training.

Weights are stored as ``(fan_in, fan_out)`` float64 matrices so a batch
``X`` of shape ``(n, fan_in)`` maps to ``X @ W + b``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import CacheError, EmptyDataset, InvalidArchitecture, LabelError, ShapeError

DEFAULT_ARCHITECTURE = (784, 32, 10)
FULL_ARCHITECTURE = (784, 1024, 512, 128, 10)


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy())


@dataclass
class ModelWeights:
    """Ordered list of dense layers; consecutive shapes must chain."""

    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise InvalidArchitecture("a model needs at least one layer")
        for i, layer in enumerate(self.layers):
            w, b = layer.weight, layer.bias
            if w.ndim != 2 or b.ndim != 1:
                raise ShapeError(f"layer {i}: weight must be 2-D and bias 1-D")
            if b.shape[0] != w.shape[1]:
                raise ShapeError(f"layer {i}: bias length {b.shape[0]} != output dim {w.shape[1]}")
            if i and self.layers[i - 1].weight.shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: input dim {w.shape[0]} does not chain")

    @classmethod
    def from_arrays(cls, pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> "ModelWeights":
        return cls([DenseLayer(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                    for w, b in pairs])

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers]

    def shapes(self) -> list[tuple[int, int]]:
        return [l.weight.shape for l in self.layers]

    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def arrays(self) -> Iterator[np.ndarray]:
        for layer in self.layers:
            yield layer.weight
            yield layer.bias

    def copy(self) -> "ModelWeights":
        return ModelWeights([l.copy() for l in self.layers])

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def congruent(self, other: "ModelWeights") -> bool:
        return self.shapes() == other.shapes()

    def bit_equal(self, other: "ModelWeights") -> bool:
        if not self.congruent(other):
            return False
        return all(a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays()))


# Gradients share the ModelWeights layout: one array per parameter.
Gradients = ModelWeights


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.adam_epsilon > 0:
            raise ValueError("adam_epsilon must be positive")

    def with_seed(self, seed: int) -> "TrainConfig":
        return dataclasses.replace(self, rng_seed=seed)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, model: ModelWeights) -> "AdamState":
        return cls([np.zeros_like(a) for a in model.arrays()],
                   [np.zeros_like(a) for a in model.arrays()], 0)


@dataclass
class ForwardCache:
    model: ModelWeights
    inputs: list[np.ndarray]       # input to each layer
    pre_activations: list[np.ndarray]
    probs: np.ndarray = field(repr=False)


def init_model(layer_dims: Sequence[int], seed: int) -> ModelWeights:
    """He-style uniform init: weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero biases."""
    dims = list(layer_dims)
    if len(dims) < 2:
        raise InvalidArchitecture(f"need at least input and output dims, got {dims}")
    if any(int(d) != d or d < 1 for d in dims):
        raise InvalidArchitecture(f"layer dims must be positive integers, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(DenseLayer(w, np.zeros(fan_out)))
    return ModelWeights(layers)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: ModelWeights, inputs: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layers[0].weight.shape[0]:
        raise ShapeError(f"inputs shape {x.shape} does not match input dim "
                         f"{model.layers[0].weight.shape[0]}")
    layer_inputs, pre = [], []
    a = x
    last = model.layer_count - 1
    for i, layer in enumerate(model.layers):
        layer_inputs.append(a)
        z = a @ layer.weight + layer.bias
        pre.append(z)
        a = softmax(z) if i == last else np.maximum(z, 0.0)
    return a, ForwardCache(model, layer_inputs, pre, a)


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n_rows:
        raise LabelError(f"expected {n_rows} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise LabelError("labels must be integer class indices")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    return y


def loss_sparse_ce(probs: np.ndarray, labels) -> float:
    p = np.asarray(probs, dtype=np.float64)
    y = _check_labels(labels, p.shape[0], p.shape[1])
    if y.size == 0:
        raise EmptyDataset("cannot compute loss on an empty batch")
    picked = p[np.arange(y.shape[0]), y]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))


def backward(model: ModelWeights, cache: ForwardCache, labels) -> Gradients:
    """Gradient of the mean sparse cross-entropy w.r.t. every parameter."""
    if cache.model is not model or len(cache.inputs) != model.layer_count:
        raise CacheError("activation cache was produced by a different model")
    n = cache.probs.shape[0]
    y = _check_labels(labels, n, cache.probs.shape[1])
    if n == 0:
        raise EmptyDataset("cannot backpropagate an empty batch")
    delta = cache.probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads: list[DenseLayer] = [None] * model.layer_count  # type: ignore[list-item]
    for i in range(model.layer_count - 1, -1, -1):
        grads[i] = DenseLayer(cache.inputs[i].T @ delta, delta.sum(axis=0))
        if i:
            delta = (delta @ model.layers[i].weight.T) * (cache.pre_activations[i - 1] > 0)
    return ModelWeights(grads)


def adam_step(model: ModelWeights, grads: Gradients, state: AdamState,
              cfg: TrainConfig) -> tuple[ModelWeights, AdamState]:
    if not model.congruent(grads) or len(state.m) != 2 * model.layer_count:
        raise ShapeError("gradients / optimizer state are not congruent with the model")
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(model.arrays(), grads.arrays(), state.m, state.v):
        if m.shape != p.shape:
            raise ShapeError("optimizer state shape mismatch")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_params.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon))
        new_m.append(m)
        new_v.append(v)
    layers = [DenseLayer(new_params[2 * i], new_params[2 * i + 1]) for i in range(model.layer_count)]
    return ModelWeights(layers), AdamState(new_m, new_v, t)


def train_local_with_history(model: ModelWeights, dataset, cfg: TrainConfig
                             ) -> tuple[ModelWeights, list[float]]:
    """Mini-batch Adam for ``cfg.epochs``; also returns the mean batch loss per epoch."""
    x, y = dataset
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDataset("local dataset is empty")
    y = _check_labels(y, x.shape[0], model.layers[-1].weight.shape[1])
    rng = np.random.default_rng(cfg.rng_seed)
    state = AdamState.zeros_like(model)
    current = model.copy()
    history = []
    n = x.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            probs, cache = forward(current, x[idx])
            total += loss_sparse_ce(probs, y[idx]) * idx.size
            grads = backward(current, cache, y[idx])
            current, state = adam_step(current, grads, state, cfg)
        history.append(total / n)
    return current, history


def train_local(model: ModelWeights, dataset, cfg: TrainConfig) -> ModelWeights:
    return train_local_with_history(model, dataset, cfg)[0]


def predict(model: ModelWeights, inputs: np.ndarray) -> np.ndarray:
    probs, _ = forward(model, inputs)
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class.
    return np.argmax(probs, axis=1)


def evaluate_accuracy(model: ModelWeights, test) -> float:
    x, y = test
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDataset("test set is empty")
    y = _check_labels(y, x.shape[0], model.layers[-1].weight.shape[1])
    return float(np.mean(predict(model, x) == y))
