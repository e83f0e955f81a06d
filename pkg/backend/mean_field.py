"""Fully factorized (mean-field) inference.

q0 clamps the observed labels of an instance and iterates sequential
coordinate updates over its hidden variables to a fixed point; q1 frees
every variable and applies exactly one more sweep. Marginals of many
instances are handled together as a matrix with one row per instance; rows
never interact, so batched results equal per-instance ones.

Fields are normalized with a max-shifted softmax, so weights of magnitude
~50 do not overflow. The cost of a coordinate update grows with the number
of pairwise features touching the variable, not with the number of slots.
"""
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sparse
from scipy.special import softmax, xlogy

from backend import workers
from backend.model import Dataset, Feature, Instance, Model, State, VariableSchema

logger = logging.getLogger(__name__)

DEFAULT_MAX_SWEEPS = 100
DEFAULT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Marginals:
    """Belief state of one instance: probability vector per variable, flat over slots."""
    schema: VariableSchema
    probs: np.ndarray
    clamped: np.ndarray
    sweeps: int = 0
    converged: bool = True

    def vector(self, k: int) -> np.ndarray:
        lo, hi = self.schema.offsets[k], self.schema.offsets[k + 1]
        return self.probs[lo:hi]

    def prob(self, state: State) -> float:
        return float(self.probs[self.schema.slot(state)])


@dataclass(frozen=True, eq=False)
class MarginalsBatch:
    """Belief states of M instances: ``probs`` is (M, slots), ``clamped`` is (M, N)."""
    schema: VariableSchema
    probs: np.ndarray
    clamped: np.ndarray
    sweeps: np.ndarray
    converged: np.ndarray

    def __len__(self) -> int:
        return self.probs.shape[0]

    def row(self, i: int) -> Marginals:
        return Marginals(self.schema, self.probs[i], self.clamped[i],
                         int(self.sweeps[i]), bool(self.converged[i]))

    def rows(self) -> Iterator[Marginals]:
        for i in range(len(self)):
            yield self.row(i)

    @property
    def n_unconverged(self) -> int:
        return int((~self.converged).sum())

    @classmethod
    def stack(cls, beliefs: Sequence[Marginals]) -> "MarginalsBatch":
        if not beliefs:
            raise ValueError("cannot stack an empty list of marginals")
        return cls(beliefs[0].schema,
                   np.vstack([b.probs for b in beliefs]),
                   np.vstack([b.clamped for b in beliefs]),
                   np.array([b.sweeps for b in beliefs]),
                   np.array([b.converged for b in beliefs]))


class Potentials:
    """Model weights laid out for field computation.

    ``unary[s]`` sums unary weights on slot s. Pairwise weights are held in
    the sparse symmetric ``coupling`` matrix over slots; for variable k,
    ``neighbours[k]`` lists the slots sharing a pairwise feature with it
    (zero weights included) and ``blocks[k]`` is the dense
    (len(neighbours[k]), cardinality) slice of ``coupling``. A field update
    therefore touches only the features that mention the variable.
    ``higher[k]`` lists (value, other slots, weight) for features of arity >= 3.
    """

    def __init__(self, model: Model):
        schema = model.schema
        terms = model.terms
        w = model.weights
        s = schema.n_slots
        self.schema = schema
        self.unary = np.zeros(s)
        np.add.at(self.unary, terms.unary_slot, w[terms.unary_index])
        wp = w[terms.pair_index]
        self.coupling = sparse.csr_matrix(
            (np.r_[wp, wp], (np.r_[terms.pair_a, terms.pair_b], np.r_[terms.pair_b, terms.pair_a])),
            shape=(s, s))
        self.neighbours: List[np.ndarray] = []
        self.blocks: List[np.ndarray] = []
        offsets = schema.offsets
        for k in range(schema.n_vars):
            rows = self.coupling[offsets[k]:offsets[k + 1]]
            nbr = np.unique(rows.indices).astype(np.int64)
            self.neighbours.append(nbr)
            if nbr.size:
                self.blocks.append(rows[:, nbr].toarray().T)
            else:
                self.blocks.append(np.zeros((0, rows.shape[0])))
        self.higher: List[List[Tuple[int, np.ndarray, float]]] = [[] for _ in range(schema.n_vars)]
        for idx, slots in terms.higher:
            if w[idx] == 0.0:
                continue
            for pos, slot in enumerate(slots):
                others = np.array(slots[:pos] + slots[pos + 1:], dtype=np.int64)
                k = int(schema.slot_variable[slot])
                self.higher[k].append((int(schema.slot_value[slot]), others, float(w[idx])))

    @property
    def n_couplings(self) -> int:
        """Stored pairwise entries, each feature counted once per direction."""
        return int(self.coupling.nnz)

    def fields(self, probs: np.ndarray, k: int, rows: Optional[np.ndarray] = None) -> np.ndarray:
        """Unnormalized log-marginals of variable k for ``rows`` of ``probs`` (default all)."""
        lo, hi = self.schema.offsets[k], self.schema.offsets[k + 1]
        nbr = self.neighbours[k]
        sub = probs[:, nbr] if rows is None else probs[np.ix_(rows, nbr)]
        field = sub @ self.blocks[k] + self.unary[lo:hi]
        for value, others, weight in self.higher[k]:
            held = probs[:, others] if rows is None else probs[np.ix_(rows, others)]
            field[:, value] += weight * held.prod(axis=1)
        return field


def _normalized(field: np.ndarray) -> np.ndarray:
    return softmax(field, axis=1)


def _slot_lookup(schema: VariableSchema) -> Tuple[np.ndarray, np.ndarray]:
    return schema.slot_variable, np.asarray(schema.cardinalities)[schema.slot_variable]


def initial_probs(schema: VariableSchema, values: np.ndarray, hidden: np.ndarray) -> np.ndarray:
    """Point mass on observed values, uniform on hidden variables."""
    m = values.shape[0]
    probs = np.zeros((m, schema.n_slots))
    rows, cols = np.nonzero(~hidden)
    probs[rows, schema.offsets[cols] + values[rows, cols]] = 1.0
    slot_var, slot_card = _slot_lookup(schema)
    return np.where(hidden[:, slot_var], 1.0 / slot_card, probs)


def update_variable(model: Model, beliefs: Marginals, k: int,
                    potentials: Optional[Potentials] = None) -> np.ndarray:
    """One coordinate update of variable k given the other marginals."""
    pot = potentials or Potentials(model)
    return _normalized(pot.fields(beliefs.probs[None, :], k))[0]


def _converge_rows(pot: Potentials, values: np.ndarray, hidden: np.ndarray,
                   max_sweeps: int, tol: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    schema = pot.schema
    offsets = schema.offsets
    probs = initial_probs(schema, values, hidden)
    active = hidden.any(axis=1)
    sweeps = np.zeros(len(values), dtype=np.int64)
    for _ in range(max_sweeps):
        if not active.any():
            break
        delta = np.zeros(len(values))
        for k in range(schema.n_vars):
            rows = np.flatnonzero(active & hidden[:, k])
            if rows.size == 0:
                continue
            lo, hi = offsets[k], offsets[k + 1]
            new = _normalized(pot.fields(probs, k, rows))
            delta[rows] = np.maximum(delta[rows], np.abs(new - probs[rows, lo:hi]).max(axis=1))
            probs[rows, lo:hi] = new
        sweeps[active] += 1
        active &= delta >= tol
    return probs, sweeps, ~active


def mf_converge_batch(model: Model, data: Dataset, max_sweeps: int = DEFAULT_MAX_SWEEPS,
                      tol: float = DEFAULT_TOL, potentials: Optional[Potentials] = None,
                      threads: Optional[int] = None) -> MarginalsBatch:
    """q0 for every instance of ``data``: labels clamped, hidden variables iterated."""
    pot = potentials or Potentials(model)
    values, hidden = data.values, data.hidden
    chunks = workers.split_rows(len(data))
    results = workers.map_ordered(
        lambda sl: _converge_rows(pot, values[sl], hidden[sl], max_sweeps, tol),
        chunks, workers.resolve_workers(threads))
    if results:
        probs = np.vstack([r[0] for r in results])
        sweeps = np.concatenate([r[1] for r in results])
        converged = np.concatenate([r[2] for r in results])
    else:
        probs = np.zeros((0, model.schema.n_slots))
        sweeps = np.zeros(0, dtype=np.int64)
        converged = np.zeros(0, dtype=bool)
    batch = MarginalsBatch(model.schema, probs, ~hidden, sweeps, converged)
    if batch.n_unconverged:
        logger.warning("mean field did not converge for %d of %d instances within %d sweeps",
                       batch.n_unconverged, len(batch), max_sweeps)
    return batch


def mf_converge(model: Model, instance: Instance, max_sweeps: int = DEFAULT_MAX_SWEEPS,
                tol: float = DEFAULT_TOL) -> Marginals:
    return mf_converge_batch(model, Dataset(model.schema, (instance,)), max_sweeps, tol,
                             threads=1).row(0)


def _sweep_rows(pot: Potentials, probs: np.ndarray) -> np.ndarray:
    probs = probs.copy()
    offsets = pot.schema.offsets
    for k in range(pot.schema.n_vars):
        probs[:, offsets[k]:offsets[k + 1]] = _normalized(pot.fields(probs, k))
    return probs


def cd_sweep_batch(model: Model, q0: MarginalsBatch, potentials: Optional[Potentials] = None,
                   threads: Optional[int] = None) -> MarginalsBatch:
    """q1: every variable freed, one ascending sequential sweep starting from q0."""
    pot = potentials or Potentials(model)
    chunks = workers.split_rows(len(q0))
    parts = workers.map_ordered(lambda sl: _sweep_rows(pot, q0.probs[sl]), chunks,
                                workers.resolve_workers(threads))
    probs = np.vstack(parts) if parts else q0.probs.copy()
    m = len(q0)
    return MarginalsBatch(model.schema, probs, np.zeros_like(q0.clamped),
                          np.ones(m, dtype=np.int64), np.ones(m, dtype=bool))


def cd_sweep(model: Model, instance: Instance, q0: Marginals) -> Marginals:
    # the instance only fixes the schema here; q1 unclamps every variable
    instance.check(model.schema)
    return cd_sweep_batch(model, MarginalsBatch.stack([q0]), threads=1).row(0)


def expect_feature(f: Feature, beliefs: Marginals) -> float:
    """Probability that every state of ``f`` holds under a factorized belief."""
    return float(np.prod([beliefs.probs[beliefs.schema.slot(s)] for s in f.states]))


def feature_expectations(model: Model, beliefs: MarginalsBatch) -> np.ndarray:
    """(M, F) matrix of expect_feature for every instance and model feature."""
    terms = model.terms
    p = beliefs.probs
    out = np.empty((len(beliefs), model.n_features))
    out[:, terms.unary_index] = p[:, terms.unary_slot]
    out[:, terms.pair_index] = p[:, terms.pair_a] * p[:, terms.pair_b]
    for idx, slots in terms.higher:
        out[:, idx] = p[:, list(slots)].prod(axis=1)
    return out


def entropies(beliefs: MarginalsBatch) -> np.ndarray:
    """Entropy (nats) of each row; clamped variables contribute 0."""
    free = ~beliefs.clamped[:, beliefs.schema.slot_variable]
    return -np.where(free, xlogy(beliefs.probs, beliefs.probs), 0.0).sum(axis=1)


def entropy(beliefs: Marginals) -> float:
    free = ~beliefs.clamped[beliefs.schema.slot_variable]
    return float(-np.where(free, xlogy(beliefs.probs, beliefs.probs), 0.0).sum())


def free_energies(model: Model, beliefs: MarginalsBatch) -> np.ndarray:
    return -(feature_expectations(model, beliefs) @ model.weights) - entropies(beliefs)


def free_energy(model: Model, beliefs: Marginals) -> float:
    """F = -sum_r theta_r <f_r> - H(q)."""
    return float(free_energies(model, MarginalsBatch.stack([beliefs]))[0])
