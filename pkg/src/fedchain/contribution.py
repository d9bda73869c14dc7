"""Federated contribution: how far a client's trained model moved from the global one.

For client ``k`` the per-layer Frobenius norms of ``global - local`` form a
vector; its euclidean norm is the absolute contribution, and dividing by the
round total gives the relative contribution stored on the ledger.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

import numpy as np

from .errors import RangeError, ShapeError, ZeroTotalContribution
from .model import DenseLayer, ModelWeights

BASIS_POINTS = 10_000


@dataclass
class ContributionReport:
    client_id: int
    gamma_abs: float
    gamma_rel: float
    per_layer_norms: list[float] = field(default_factory=list)
    round_id: int = 0

    @property
    def basis_points(self) -> int:
        return to_fixed_point(self.gamma_rel)


def layer_delta(global_layer: np.ndarray, local_layer: np.ndarray) -> np.ndarray:
    g = np.asarray(global_layer, dtype=np.float64)
    l = np.asarray(local_layer, dtype=np.float64)
    if g.shape != l.shape:
        raise ShapeError(f"layer shapes differ: {g.shape} vs {l.shape}")
    return g - l


def frobenius_norm(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def augmented(layer: DenseLayer) -> np.ndarray:
    """Weight matrix with the bias appended, so the delta covers every trainable parameter.

    With ``(fan_in, fan_out)`` storage the bias becomes an extra row; in the
    ``(out, in)`` convention that is the usual extra column.
    """
    return np.vstack([layer.weight, layer.bias[np.newaxis, :]])


def federated_contribution(global_model: ModelWeights, local_model: ModelWeights
                           ) -> tuple[float, list[float]]:
    if not global_model.congruent(local_model):
        raise ShapeError("global and local models are not shape-congruent")
    norms = [frobenius_norm(layer_delta(augmented(g), augmented(l)))
             for g, l in zip(global_model.layers, local_model.layers)]
    return float(np.linalg.norm(norms)), norms


def relative_contributions(gammas: Sequence[float]) -> list[float]:
    values = [float(g) for g in gammas]
    if not values:
        raise ValueError("need at least one client")
    if any(g < 0 or math.isnan(g) for g in values):
        raise ValueError("contributions must be non-negative")
    total = math.fsum(values)
    if total == 0.0:
        raise ZeroTotalContribution("all clients reported zero contribution")
    return [g / total for g in values]


def to_fixed_point(gamma_rel: float) -> int:
    """Basis points, rounding half up on the decimal value of ``gamma_rel``."""
    if not 0.0 <= gamma_rel <= 1.0:
        raise RangeError(f"relative contribution {gamma_rel} outside [0, 1]")
    # str() gives the shortest repr, so 0.33335 scales to 3333.5 rather than 3333.4999...
    scaled = Decimal(str(float(gamma_rel))) * BASIS_POINTS
    return int(scaled.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def contribution_reports(global_model: ModelWeights, local_models: dict[int, ModelWeights],
                         round_id: int = 0) -> list[ContributionReport]:
    """Reports for every submitting client, ordered by client id.

    Raises ZeroTotalContribution if no client moved away from the global model.
    """
    ids = sorted(local_models)
    measured = [federated_contribution(global_model, local_models[k]) for k in ids]
    rel = relative_contributions([g for g, _ in measured])
    return [ContributionReport(k, g, r, norms, round_id)
            for k, (g, norms), r in zip(ids, measured, rel)]
