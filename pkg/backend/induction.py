"""Candidate feature scoring: exact Grafting gradients and the contrastive approximation.

For a state s of instance i, the *error* is q1(s) - q0(s) and the *signals*
are q0(s) - E0[s] and q1(s) - E1[s], E_t being the mean of q_t(s) over
instances. The exact CD gradient of a pairwise candidate (A, B) is

    sum_i q1(A) q1(B) - q0(A) q0(B)

and decomposes into signal x error products plus mean terms. Contrastive
scoring keeps only the products whose signal and error magnitudes pass the
thresholds, which turns scoring into a sparse signal^T x error product.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sparse

from backend.mean_field import Marginals, MarginalsBatch
from backend.model import (CandidatePolicy, CandidateSpace, Feature, FeatureError, FeatureKind,
                           Model, State, VariableSchema)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Thresholds:
    t_err: float = 0.2
    t_sig: float = 0.2

    def __post_init__(self):
        if self.t_err < 0 or self.t_sig < 0:
            raise ValueError(f"thresholds must be non-negative: {self}")


@dataclass(frozen=True, eq=False)
class SignalErrorTable:
    """Errors and signals of every candidate state (columns) in every instance (rows)."""
    schema: VariableSchema
    slots: np.ndarray
    err: np.ndarray
    eps0: np.ndarray
    eps1: np.ndarray
    mean0: np.ndarray
    mean1: np.ndarray

    @property
    def n_instances(self) -> int:
        return self.err.shape[0]

    @property
    def signal(self) -> np.ndarray:
        """(eps0 + eps1) / 2, the quantity gated by t_sig."""
        return (self.eps0 + self.eps1) / 2.0

    def column(self, state: State) -> int:
        slot = self.schema.slot(state)
        col = int(np.searchsorted(self.slots, slot))
        if col >= len(self.slots) or self.slots[col] != slot:
            raise FeatureError(f"{state} is not a candidate state")
        return col


def build_signal_error_table(q0s: MarginalsBatch, q1s: MarginalsBatch,
                             policy: CandidatePolicy = CandidatePolicy.NON_REFERENCE) -> SignalErrorTable:
    if len(q0s) != len(q1s) or len(q0s) == 0:
        raise ValueError(f"need aligned, non-empty q0/q1 batches, got {len(q0s)} and {len(q1s)}")
    schema = q0s.schema
    slots = schema.candidate_slots(policy)
    p0 = q0s.probs[:, slots]
    p1 = q1s.probs[:, slots]
    mean0 = p0.mean(axis=0)
    mean1 = p1.mean(axis=0)
    return SignalErrorTable(schema, slots, p1 - p0, p0 - mean0, p1 - mean1, mean0, mean1)


class ScoreMap:
    """Sparse map from canonical pairwise feature to an approximate gradient.

    Stored as parallel slot arrays in canonical order; explicit zeros are dropped.
    ``accumulations`` counts the (pair, instance) products that produced it.
    """

    def __init__(self, schema: VariableSchema, slot_a: np.ndarray, slot_b: np.ndarray,
                 scores: np.ndarray, accumulations: int = 0, one_sided: int = 0):
        slot_a = np.asarray(slot_a, dtype=np.int64)
        slot_b = np.asarray(slot_b, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        keep = scores != 0.0
        slot_a, slot_b, scores = slot_a[keep], slot_b[keep], scores[keep]
        order = np.lexsort((slot_b, slot_a))
        self.schema = schema
        self.slot_a = slot_a[order]
        self.slot_b = slot_b[order]
        self.scores = scores[order]
        self.accumulations = int(accumulations)
        self.one_sided = int(one_sided)

    @classmethod
    def accumulate(cls, schema: VariableSchema, slot_a: np.ndarray, slot_b: np.ndarray,
                   values: np.ndarray, **counts) -> "ScoreMap":
        """Fold (a, b) and (b, a) into one canonical key and sum duplicates."""
        lo = np.minimum(slot_a, slot_b).astype(np.int64)
        hi = np.maximum(slot_a, slot_b).astype(np.int64)
        keys = lo * schema.n_slots + hi
        uniq, inverse = np.unique(keys, return_inverse=True)
        sums = np.bincount(inverse.reshape(-1), weights=values, minlength=len(uniq))
        return cls(schema, uniq // schema.n_slots, uniq % schema.n_slots, sums, **counts)

    def _key(self, feature: Feature) -> Tuple[int, int]:
        if feature.kind is not FeatureKind.PAIRWISE:
            raise FeatureError(f"score maps hold pairwise features only, got {feature}")
        a, b = self.schema.feature_slots(feature)
        return a, b

    def __len__(self) -> int:
        return len(self.scores)

    def __contains__(self, feature: Feature) -> bool:
        return self.get(feature) != 0.0

    def get(self, feature: Feature, default: float = 0.0) -> float:
        a, b = self._key(feature)
        lo = np.searchsorted(self.slot_a, a, side="left")
        hi = np.searchsorted(self.slot_a, a, side="right")
        j = lo + np.searchsorted(self.slot_b[lo:hi], b)
        if j < hi and self.slot_b[j] == b:
            return float(self.scores[j])
        return default

    def feature(self, j: int) -> Feature:
        return Feature((self.schema.state_of(int(self.slot_a[j])),
                        self.schema.state_of(int(self.slot_b[j]))))

    def items(self) -> Iterator[Tuple[Feature, float]]:
        for j in range(len(self)):
            yield self.feature(j), float(self.scores[j])

    def as_dict(self) -> Dict[Feature, float]:
        return dict(self.items())

    def excluding(self, model: Model) -> "ScoreMap":
        """Drop candidates that are already features of ``model``."""
        terms = model.terms
        if len(terms.pair_a) == 0 or len(self) == 0:
            return self
        n = self.schema.n_slots
        present = np.isin(self.slot_a * n + self.slot_b, terms.pair_a * n + terms.pair_b)
        return ScoreMap(self.schema, self.slot_a[~present], self.slot_b[~present],
                        self.scores[~present], self.accumulations, self.one_sided)


@dataclass(frozen=True)
class PairDecomposition:
    err_signal: float
    err_err: float
    err_mean: float
    symmetric: float
    mean_drift: float

    @property
    def total(self) -> float:
        """errA*eps0B + errB*eps0A + errA*errB + mean terms."""
        return self.err_signal + self.err_err + self.err_mean

    @property
    def symmetric_total(self) -> float:
        """Signal-average form plus mean terms (plus drift when E1 != E0)."""
        return self.symmetric + self.err_mean + self.mean_drift


def decompose_pair_gradient(q0a: float, q0b: float, q1a: float, q1b: float,
                            e0a: float, e0b: float, e1a: Optional[float] = None,
                            e1b: Optional[float] = None) -> PairDecomposition:
    """Split q1A*q1B - q0A*q0B into error, signal and mean products.

    The q1 means default to the q0 means (converged unary weights), in which
    case ``mean_drift`` is zero and both totals equal the exact difference.
    """
    e1a = e0a if e1a is None else e1a
    e1b = e0b if e1b is None else e1b
    err_a, err_b = q1a - q0a, q1b - q0b
    eps0a, eps0b = q0a - e0a, q0b - e0b
    eps1a, eps1b = q1a - e1a, q1b - e1b
    return PairDecomposition(
        err_signal=err_a * eps0b + err_b * eps0a,
        err_err=err_a * err_b,
        err_mean=err_a * e0b + err_b * e0a,
        symmetric=(eps1a + eps0a) / 2.0 * err_b + (eps1b + eps0b) / 2.0 * err_a,
        mean_drift=((e1a - e0a) * err_b + (e1b - e0b) * err_a) / 2.0,
    )


def _pair_slots(candidates: Sequence[Feature], schema: VariableSchema) -> Tuple[np.ndarray, np.ndarray]:
    a, b = [], []
    for f in candidates:
        if f.kind is not FeatureKind.PAIRWISE or not f.is_canonical():
            raise FeatureError(f"candidate {f} is not a canonical pairwise feature")
        sa, sb = schema.feature_slots(f)
        a.append(sa)
        b.append(sb)
    return np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)


def grafting_scores(model: Model, q0s: MarginalsBatch, q1s: MarginalsBatch,
                    candidates: Optional[Sequence[Feature]] = None) -> ScoreMap:
    """Exact CD gradient of every inactive pairwise candidate.

    Without an explicit candidate list every candidate pair of the model's
    policy is scored, through one dense product over candidate slots.
    """
    schema = model.schema
    m = len(q0s)
    if candidates is not None:
        a, b = _pair_slots(candidates, schema)
        p0, p1 = q0s.probs, q1s.probs
        scores = (p1[:, a] * p1[:, b] - p0[:, a] * p0[:, b]).sum(axis=0)
        return ScoreMap(schema, a, b, scores, accumulations=m * len(a)).excluding(model)
    space = CandidateSpace(schema, model.policy)
    slots = space.slots
    p0 = q0s.probs[:, slots]
    p1 = q1s.probs[:, slots]
    gram = p1.T @ p1 - p0.T @ p0
    i, j = np.triu_indices(len(slots), k=1)
    distinct = schema.slot_variable[slots[i]] != schema.slot_variable[slots[j]]
    i, j = i[distinct], j[distinct]
    scores = ScoreMap(schema, slots[i], slots[j], gram[i, j], accumulations=m * len(i))
    return scores.excluding(model)


def _same_variable_pairs(table: SignalErrorTable, left: np.ndarray, right: np.ndarray) -> int:
    """Ordered (left, right) state pairs per instance that share a variable."""
    variables = table.schema.slot_variable[table.slots]
    starts = np.flatnonzero(np.r_[True, np.diff(variables) != 0])
    lv = np.add.reduceat(left.astype(np.int64), starts, axis=1)
    rv = np.add.reduceat(right.astype(np.int64), starts, axis=1)
    return int((lv * rv).sum())


def _ordered_pairs(table: SignalErrorTable, left: np.ndarray, right: np.ndarray) -> int:
    total = int((left.sum(axis=1).astype(np.int64) * right.sum(axis=1)).sum())
    return total - _same_variable_pairs(table, left, right)


def cfi_scores(table: SignalErrorTable, th: Thresholds) -> ScoreMap:
    """Contrastive approximation of candidate gradients.

    For each instance, every A with |signal| > t_sig is paired with every B on
    another variable with |err| > t_err, adding signal(A) * err(B) to the
    canonical key of (A, B).
    """
    schema = table.schema
    sig = table.signal
    in_sig = np.abs(sig) > th.t_sig
    in_err = np.abs(table.err) > th.t_err
    sig_m = sparse.csr_matrix(np.where(in_sig, sig, 0.0))
    err_m = sparse.csr_matrix(np.where(in_err, table.err, 0.0))
    prod = (sig_m.T @ err_m).tocoo()
    a = table.slots[prod.row]
    b = table.slots[prod.col]
    keep = schema.slot_variable[a] != schema.slot_variable[b]
    accumulations = _ordered_pairs(table, in_sig, in_err)
    both = in_sig & in_err
    one_sided = accumulations - _ordered_pairs(table, both, both)
    scores = ScoreMap.accumulate(schema, a[keep], b[keep], prod.data[keep],
                                 accumulations=accumulations, one_sided=one_sided)
    logger.debug("contrastive scoring: %d accumulations (%d one-sided), %d candidates",
                 accumulations, one_sided, len(scores))
    return scores


def mean_correction(table: SignalErrorTable, feature: Feature) -> float:
    """Mean terms that contrastive scores leave out at zero thresholds.

    grafting(A, B) = cfi(A, B) + (E0[A] + E1[A]) / 2 * sum_i err(B)
                               + (E0[B] + E1[B]) / 2 * sum_i err(A)
    Zero when every per-state error sum is zero.
    """
    sa, sb = feature.states
    ca, cb = table.column(sa), table.column(sb)
    sum_a = float(table.err[:, ca].sum())
    sum_b = float(table.err[:, cb].sum())
    mid_a = (table.mean0[ca] + table.mean1[ca]) / 2.0
    mid_b = (table.mean0[cb] + table.mean1[cb]) / 2.0
    return float(mid_a * sum_b + mid_b * sum_a)


def select_top(scores: ScoreMap, j: int, gate: float) -> List[Feature]:
    """Up to ``j`` features with |score| > gate, largest first, ties in canonical order."""
    if j < 1:
        raise ValueError(f"batch size must be >= 1, got {j}")
    mag = np.abs(scores.scores)
    picked = np.flatnonzero(mag > gate)
    order = np.lexsort((scores.slot_b[picked], scores.slot_a[picked], -mag[picked]))
    return [scores.feature(int(k)) for k in picked[order[:j]]]


def higher_order_terms(states: Sequence[State], q0: Marginals, q1: Marginals) -> Tuple[float, float]:
    """(direct, expanded) forms of the gradient of a feature over k >= 3 states."""
    feature = Feature.of(*states)
    if len(feature.states) < 3:
        raise FeatureError(f"higher-order features need at least 3 states, got {len(states)}")
    p0 = np.array([q0.prob(s) for s in feature.states])
    p1 = np.array([q1.prob(s) for s in feature.states])
    direct = float(np.prod(p1) - np.prod(p0))
    expanded = float(np.prod(p0 + (p1 - p0)) - np.prod(p0))
    return direct, expanded


def higher_order_gradient(states: Sequence[State], q0: Marginals, q1: Marginals) -> float:
    direct, expanded = higher_order_terms(states, q0, q1)
    if not math.isclose(direct, expanded, rel_tol=0.0, abs_tol=1e-12):
        raise ArithmeticError(f"expanded gradient {expanded!r} differs from direct {direct!r}")
    return direct
