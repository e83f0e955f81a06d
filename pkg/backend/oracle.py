"""Brute-force exact inference for tiny models.

Joint assignments of the free variables are enumerated in mixed-radix order
(last free variable fastest) and scored in the log domain. Used by tests and
by the ``oracle`` CLI command.
"""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.special import logsumexp, xlogy

from backend.mean_field import Marginals
from backend.model import Instance, Model, VariableSchema

logger = logging.getLogger(__name__)

MAX_JOINT_STATES = 2 ** 20


class EnumerationTooLarge(RuntimeError):
    """Raised when a joint state space exceeds MAX_JOINT_STATES."""

    def __init__(self, size: int):
        self.size = size
        super().__init__(f"joint state space of {size} assignments exceeds {MAX_JOINT_STATES}")


@dataclass(frozen=True, eq=False)
class JointTable:
    schema: VariableSchema
    free: np.ndarray
    assignments: np.ndarray
    log_probs: np.ndarray
    log_z: float

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def z(self) -> float:
        return float(np.exp(self.log_z))

    def __len__(self) -> int:
        return len(self.log_probs)


def feature_matrix(model: Model, assignments: np.ndarray) -> np.ndarray:
    """(T, F) 0/1 matrix: which features fire under each joint assignment."""
    out = np.ones((len(assignments), model.n_features))
    for r, f in enumerate(model.features):
        for s in f.states:
            out[:, r] *= assignments[:, s.variable] == s.value
    return out


def _enumerate(model: Model, values: np.ndarray, free: np.ndarray) -> np.ndarray:
    cards = np.asarray(model.schema.cardinalities)[free]
    size = int(np.prod(cards, dtype=object)) if len(free) else 1
    if size > MAX_JOINT_STATES:
        raise EnumerationTooLarge(size)
    assignments = np.tile(values, (size, 1))
    if len(free):
        digits = np.unravel_index(np.arange(size), tuple(cards))
        assignments[:, free] = np.column_stack(digits)
    return assignments


def exact_conditional(model: Model, instance: Instance) -> JointTable:
    """Exact distribution over the hidden variables of ``instance`` with its labels clamped."""
    instance.check(model.schema)
    values = np.asarray(instance.values, dtype=np.int64)
    free = np.flatnonzero(np.asarray(instance.hidden, dtype=bool))
    assignments = _enumerate(model, values, free)
    scores = feature_matrix(model, assignments) @ model.weights
    log_z = float(logsumexp(scores))
    return JointTable(model.schema, free, assignments, scores - log_z, log_z)


def exact_marginals(table: JointTable) -> List[np.ndarray]:
    """Per-variable marginals; clamped variables come out as exact point masses."""
    probs = table.probs
    out = []
    for k, c in enumerate(table.schema.cardinalities):
        mass = np.bincount(table.assignments[:, k], weights=probs, minlength=c)
        # exp(log_probs) sums to 1 only up to rounding
        out.append(mass / mass.sum())
    return out


def exact_cll_and_gradient(model: Model, instance: Instance) -> Tuple[float, np.ndarray]:
    """ln p(labels | rest) and <f>_free - <f>_clamped.

    The gradient is that of the negative log-likelihood, the minimized quantity.
    """
    clamped = exact_conditional(model, instance)
    free = exact_conditional(model, Instance(instance.values, (True,) * len(instance.values)))
    e_clamped = clamped.probs @ feature_matrix(model, clamped.assignments)
    e_free = free.probs @ feature_matrix(model, free.assignments)
    return clamped.log_z - free.log_z, e_free - e_clamped


def kl_to_exact(beliefs: Marginals, table: JointTable, model: Model) -> float:
    """KL(q || p) by enumeration over the table's free variables."""
    if model.schema != table.schema:
        raise ValueError("model and joint table use different schemas")
    free = np.flatnonzero(~np.asarray(beliefs.clamped, dtype=bool))
    if not np.array_equal(free, table.free):
        raise ValueError("beliefs and joint table free different variable sets")
    offsets = table.schema.offsets
    slots = offsets[table.free] + table.assignments[:, table.free]
    with np.errstate(divide="ignore"):
        log_q = np.log(beliefs.probs)[slots].sum(axis=1)
    q = np.exp(log_q)
    return float(xlogy(q, q).sum() - q @ table.log_probs)
