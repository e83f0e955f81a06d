"""Hidden-label cross-validation and the evaluation metrics.

Label slots (instance x variable) are partitioned into folds; a fold's slots
are hidden during training and scored afterwards from the q0 marginals of the
trained model. Metrics: average conditional log-likelihood per hidden
variable, average precision over pooled hidden states, argmax error rate.
"""
import logging
import math
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.datagen import phase_rng
from backend.mean_field import MarginalsBatch, mf_converge_batch
from backend.model import Dataset, Model, SchemaError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class CvSplit:
    fold: int
    hidden: np.ndarray

    @property
    def n_hidden(self) -> int:
        return int(self.hidden.sum())


@dataclass(frozen=True)
class EvalReport:
    cll: float
    auc: float
    error_rate: float
    hidden_slots: int
    wall_time_seconds: float = 0.0
    introduced: int = 0
    active: int = 0

    def as_dict(self) -> Dict[str, Any]:
        return {
            "cll": self.cll, "auc": self.auc, "error_rate": self.error_rate,
            "hidden_slots": self.hidden_slots, "wall_time_seconds": self.wall_time_seconds,
            "introduced": self.introduced, "active": self.active,
        }


def make_splits(data: Dataset, folds: int = 10, fraction: float = 0.1, seed: int = 0) -> List[CvSplit]:
    """Randomly partition all label slots into ``folds`` near-equal groups."""
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if not math.isclose(folds * fraction, 1.0, rel_tol=1e-9):
        logger.warning("fraction %.4g does not match %d folds; each fold hides 1/%d of the labels",
                       fraction, folds, folds)
    m, n = data.n_instances, data.schema.n_vars
    perm = phase_rng(seed, "splits").permutation(m * n)
    splits = []
    for k, group in enumerate(np.array_split(perm, folds)):
        mask = np.zeros(m * n, dtype=bool)
        mask[group] = True
        splits.append(CvSplit(k, mask.reshape(m, n)))
    return splits


def _hidden_slots(data: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = np.nonzero(data.hidden)
    if rows.size == 0:
        raise SchemaError("evaluation needs at least one hidden variable")
    return rows, cols


def infer(model: Model, data: Dataset, threads: Optional[int] = None) -> MarginalsBatch:
    return mf_converge_batch(model, data, threads=threads)


def cll_from_beliefs(q0: MarginalsBatch, data: Dataset) -> float:
    rows, cols = _hidden_slots(data)
    truth = data.schema.offsets[cols] + data.values[rows, cols]
    return float(np.log(np.maximum(q0.probs[rows, truth], PROB_FLOOR)).mean())


def average_precision(scores: np.ndarray, relevant: np.ndarray) -> float:
    """Mean of precision at each relevant hit; equal scores keep input order."""
    relevant = np.asarray(relevant, dtype=bool)
    n_rel = int(relevant.sum())
    if n_rel == 0:
        raise ValueError("average precision needs at least one relevant item")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = relevant[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / n_rel)


def auc_from_beliefs(q0: MarginalsBatch, data: Dataset) -> float:
    """Pool every (instance, hidden variable, value) state, ranked by q0."""
    rows, cols = _hidden_slots(data)
    cards = np.asarray(data.schema.cardinalities)[cols]
    inst = np.repeat(rows, cards)
    var = np.repeat(cols, cards)
    starts = np.repeat(np.cumsum(cards) - cards, cards)
    value = np.arange(len(inst)) - starts
    scores = q0.probs[inst, data.schema.offsets[var] + value]
    return average_precision(scores, value == data.values[inst, var])


def error_from_beliefs(q0: MarginalsBatch, data: Dataset) -> float:
    _hidden_slots(data)
    offsets = data.schema.offsets
    wrong = 0
    total = 0
    for k in range(data.schema.n_vars):
        rows = np.flatnonzero(data.hidden[:, k])
        if rows.size == 0:
            continue
        # argmax keeps the first maximum, so ties go to the lower value
        pred = q0.probs[rows, offsets[k]:offsets[k + 1]].argmax(axis=1)
        wrong += int((pred != data.values[rows, k]).sum())
        total += rows.size
    return wrong / total


def conditional_log_likelihood(model: Model, data: Dataset, threads: Optional[int] = None) -> float:
    return cll_from_beliefs(infer(model, data, threads), data)


def pr_auc(model: Model, data: Dataset, threads: Optional[int] = None) -> float:
    return auc_from_beliefs(infer(model, data, threads), data)


def error_rate(model: Model, data: Dataset, threads: Optional[int] = None) -> float:
    return error_from_beliefs(infer(model, data, threads), data)


def evaluate(model: Model, data: Dataset, threads: Optional[int] = None, **extra) -> EvalReport:
    """All three metrics from a single inference pass."""
    q0 = infer(model, data, threads)
    return EvalReport(cll_from_beliefs(q0, data), auc_from_beliefs(q0, data),
                      error_from_beliefs(q0, data), int(data.hidden.sum()), **extra)


def histogram(values: Sequence[float], bin_width: float, lo: float = -1.0,
              hi: float = 1.0) -> List[Tuple[float, float, int]]:
    """Half-open bins [lo + k*w, lo + (k+1)*w); out-of-range values go to the end bins."""
    if bin_width <= 0 or not lo < hi:
        raise ValueError(f"bad histogram range [{lo}, {hi}) with width {bin_width}")
    n_bins = max(1, int(math.ceil((hi - lo) / bin_width - 1e-9)))
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    idx = np.clip(np.floor((v - lo) / bin_width), 0, n_bins - 1).astype(np.int64)
    counts = np.bincount(idx, minlength=n_bins)
    return [(lo + k * bin_width, min(lo + (k + 1) * bin_width, hi), int(counts[k]))
            for k in range(n_bins)]


def cross_validate(data: Dataset, train_fn, splits: Sequence[CvSplit],
                   threads: Optional[int] = None) -> List[Tuple[Model, Any, EvalReport]]:
    """Train on each fold's masked data with ``train_fn(masked)`` and score its hidden slots.

    ``train_fn`` returns ``(model, trace)``.
    """
    results = []
    for split in splits:
        masked = data.with_hidden(split.hidden)
        start = time.perf_counter()
        model, trace = train_fn(masked)
        elapsed = time.perf_counter() - start
        report = evaluate(model, masked, threads, wall_time_seconds=elapsed,
                          introduced=model.n_features, active=model.active_count)
        logger.info("fold %d: cll %.4f, auc %.4f, err %.4f, %.2fs", split.fold, report.cll,
                    report.auc, report.error_rate, elapsed)
        results.append((model, trace, report))
    return results


def summarize(reports: Sequence[EvalReport]) -> Dict[str, Dict[str, float]]:
    """Mean and sample standard deviation of each metric across folds."""
    out = {}
    for key in ("cll", "auc", "error_rate", "wall_time_seconds"):
        xs = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        std = float(xs.std(ddof=1)) if len(xs) > 1 else 0.0
        out[key] = {"mean": float(xs.mean()), "std": std}
    return out
