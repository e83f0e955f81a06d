"""Mean-field contrastive divergence objective and its gradient.

Sign convention: the optimizer MINIMIZES

    total = -sum_i CD_i + lambda1 * ||theta||_1 + lambda2 * ||theta||^2 / 2

with the L1 part handled inside the optimizer. q0 and q1 are treated as
constants while a single optimizer step runs, which makes the smooth part
linear-plus-quadratic in theta.
"""
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from backend.mean_field import (Marginals, MarginalsBatch, entropies, feature_expectations)
from backend.model import Model


@dataclass(frozen=True)
class ObjectiveValue:
    cd_sum: float
    l1: float
    l2: float
    total: float

    def as_dict(self) -> dict:
        return {"cd_sum": self.cd_sum, "l1": self.l1, "l2": self.l2, "total": self.total}


def cd_terms(model: Model, q0: MarginalsBatch, q1: MarginalsBatch) -> np.ndarray:
    """Per-instance CD = theta.<f>_q0 + H(q0) - theta.<f>_q1 - H(q1)."""
    e0 = feature_expectations(model, q0) @ model.weights
    e1 = feature_expectations(model, q1) @ model.weights
    return e0 + entropies(q0) - e1 - entropies(q1)


def cd_term(model: Model, q0: Marginals, q1: Marginals) -> float:
    return float(cd_terms(model, MarginalsBatch.stack([q0]), MarginalsBatch.stack([q1]))[0])


def active_gradient(model: Model, q0: MarginalsBatch, q1: MarginalsBatch) -> np.ndarray:
    """sum_i <f>_q1 - <f>_q0 over active features: the gradient of -sum_i CD_i.

    Neither regularizer is included.
    """
    diff = feature_expectations(model, q1) - feature_expectations(model, q0)
    return diff.sum(axis=0)


def objective_value(model: Model, cd_sum: float, l1: float, l2: float) -> ObjectiveValue:
    theta = model.weights
    l1_term = float(l1 * np.abs(theta).sum())
    l2_term = float(l2 * theta.dot(theta) / 2.0)
    return ObjectiveValue(float(cd_sum), l1_term, l2_term, -float(cd_sum) + l1_term + l2_term)


def frozen_objective(gradient: np.ndarray, offset: float,
                     l2: float) -> Callable[[np.ndarray], Tuple[float, np.ndarray]]:
    """Smooth objective with q0/q1 held fixed.

    -sum_i CD_i(theta) = theta . gradient + offset, where offset is
    sum_i H(q1_i) - H(q0_i); the L2 term is added on top.
    """
    gradient = np.asarray(gradient, dtype=np.float64)

    def evaluate(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        value = float(theta.dot(gradient) + offset + l2 * theta.dot(theta) / 2.0)
        return value, gradient + l2 * theta

    return evaluate
