"""FedAvg aggregation of client models into the next global model."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyInput, ShapeError
from .model import DenseLayer, ModelWeights


@dataclass
class AggregationConfig:
    importance: list[float]
    server_rate: float = 1.0

    def __post_init__(self):
        self.importance = [float(p) for p in self.importance]
        if not self.importance:
            raise ConfigError("importance vector is empty")
        if any(p < 0 for p in self.importance):
            raise ConfigError("importance factors must be non-negative")
        if abs(math.fsum(self.importance) - 1.0) > 1e-9:
            raise ConfigError(f"importance factors sum to {math.fsum(self.importance)}, not 1")

    @property
    def client_count(self) -> int:
        return len(self.importance)

    @classmethod
    def uniform(cls, client_count: int, server_rate: float = 1.0) -> "AggregationConfig":
        if client_count < 1:
            raise EmptyInput("no clients to aggregate")
        return cls([1.0 / client_count] * client_count, server_rate)


def importance_from_sample_counts(counts: Sequence[int]) -> list[float]:
    if len(counts) == 0:
        raise EmptyInput("no sample counts given")
    if any(int(c) < 1 for c in counts):
        raise ConfigError("every client must declare at least one sample")
    total = sum(int(c) for c in counts)
    return [int(c) / total for c in counts]


def _combine(arrays: list[np.ndarray], weights: list[float]) -> np.ndarray:
    # Anchored at the first client: identical submissions give exact zero
    # deltas, so consensus reproduces the submitted weights bit for bit.
    anchor = arrays[0]
    acc = np.zeros_like(anchor)
    for a, p in zip(arrays[1:], weights[1:]):
        acc += p * (a - anchor)
    return anchor + acc


def fed_avg(global_t: ModelWeights, client_models: Sequence[ModelWeights],
            cfg: AggregationConfig) -> ModelWeights:
    """w_{t+1} = w_t + rate * sum_k p_k (w_k - w_t).

    Evaluated as ``w_t + rate * (mean - w_t)`` where ``mean`` is the
    importance-weighted client average; equal to the stated update whenever
    the importances sum to one.
    """
    if len(client_models) != cfg.client_count:
        raise ConfigError(f"{len(client_models)} client models but {cfg.client_count} importances")
    for m in client_models:
        if not global_t.congruent(m):
            raise ShapeError("client model is not congruent with the global model")
    rate = cfg.server_rate
    layers = []
    for i, g in enumerate(global_t.layers):
        parts = []
        for attr in ("weight", "bias"):
            mean = _combine([getattr(m.layers[i], attr) for m in client_models], cfg.importance)
            base = getattr(g, attr)
            parts.append(mean if rate == 1.0 else base + rate * (mean - base))
        layers.append(DenseLayer(*parts))
    return ModelWeights(layers)
