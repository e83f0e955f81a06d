"""Variables, states, features and the log-linear model they define.

A *state* is a (variable, value) pair. Features are indicator functions over
one or more states on distinct variables and are always kept in canonical
form: states sorted by (variable, value). Every value of every variable also
owns a *slot*, a flat index ``offsets[variable] + value`` that the inference
code uses to address marginals as one vector.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from itertools import chain
from typing import Dict, Iterable, Iterator, List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class SchemaError(ValueError):
    """Raised when a schema, instance or dataset is malformed."""
    pass


class FeatureError(ValueError):
    """Raised for features that are not canonical or do not fit the schema."""
    pass


class CandidatePolicy(str, Enum):
    # value 0 is the reference value and owns no features
    NON_REFERENCE = "non-reference"
    ALL_VALUES = "all-value-pairs"


class FeatureKind(str, Enum):
    UNARY = "unary"
    PAIRWISE = "pairwise"
    HIGHER_ORDER = "higher-order"


@dataclass(frozen=True, order=True)
class State:
    variable: int
    value: int

    def __str__(self) -> str:
        return f"X{self.variable}={self.value}"


@dataclass(frozen=True, order=True)
class Feature:
    states: Tuple[State, ...]

    def __post_init__(self):
        states = tuple(self.states)
        object.__setattr__(self, "states", states)
        if not states:
            raise FeatureError("feature needs at least one state")
        variables = [s.variable for s in states]
        if len(set(variables)) != len(variables):
            raise FeatureError(f"feature states must use distinct variables: {self}")

    @classmethod
    def of(cls, *states: State) -> "Feature":
        """Build the canonical feature over ``states`` (any order)."""
        return cls(tuple(sorted(states)))

    @property
    def kind(self) -> FeatureKind:
        if len(self.states) == 1:
            return FeatureKind.UNARY
        if len(self.states) == 2:
            return FeatureKind.PAIRWISE
        return FeatureKind.HIGHER_ORDER

    @property
    def variables(self) -> Tuple[int, ...]:
        return tuple(s.variable for s in self.states)

    def is_canonical(self) -> bool:
        return all(a < b for a, b in zip(self.states, self.states[1:]))

    def __str__(self) -> str:
        return "&".join(str(s) for s in self.states)


@dataclass(frozen=True)
class VariableSchema:
    cardinalities: Tuple[int, ...]

    def __post_init__(self):
        cards = tuple(int(c) for c in self.cardinalities)
        object.__setattr__(self, "cardinalities", cards)
        if not cards:
            raise SchemaError("schema needs at least one variable")
        bad = [k for k, c in enumerate(cards) if c < 2]
        if bad:
            raise SchemaError(f"variables {bad[:10]} have cardinality < 2")

    @property
    def n_vars(self) -> int:
        return len(self.cardinalities)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Slot offsets, length N + 1; variable k owns slots [offsets[k], offsets[k+1])."""
        return np.concatenate(([0], np.cumsum(self.cardinalities))).astype(np.int64)

    @property
    def n_slots(self) -> int:
        return int(self.offsets[-1])

    @cached_property
    def slot_variable(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_vars), self.cardinalities)

    @cached_property
    def slot_value(self) -> np.ndarray:
        return np.arange(self.n_slots) - self.offsets[self.slot_variable]

    def check_state(self, state: State) -> None:
        if not 0 <= state.variable < self.n_vars:
            raise FeatureError(f"{state}: variable outside schema of {self.n_vars}")
        if not 0 <= state.value < self.cardinalities[state.variable]:
            raise FeatureError(f"{state}: value outside cardinality "
                               f"{self.cardinalities[state.variable]}")

    def slot(self, state: State) -> int:
        return int(self.offsets[state.variable]) + state.value

    def state_of(self, slot: int) -> State:
        return State(int(self.slot_variable[slot]), int(self.slot_value[slot]))

    def feature_slots(self, feature: Feature) -> Tuple[int, ...]:
        return tuple(self.slot(s) for s in feature.states)

    def candidate_slots(self, policy: CandidatePolicy = CandidatePolicy.NON_REFERENCE) -> np.ndarray:
        """Slots that may carry features, ascending (which is canonical state order)."""
        if CandidatePolicy(policy) is CandidatePolicy.ALL_VALUES:
            return np.arange(self.n_slots)
        return np.flatnonzero(self.slot_value != 0)

    def candidate_states(self, policy: CandidatePolicy = CandidatePolicy.NON_REFERENCE) -> List[State]:
        return [self.state_of(s) for s in self.candidate_slots(policy)]


@dataclass(frozen=True)
class Instance:
    values: Tuple[int, ...]
    hidden: Tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))
        object.__setattr__(self, "hidden", tuple(bool(h) for h in self.hidden))
        if len(self.values) != len(self.hidden):
            raise SchemaError("values and hidden mask lengths differ")

    @classmethod
    def observed(cls, values: Sequence[int]) -> "Instance":
        return cls(tuple(values), (False,) * len(values))

    @property
    def hidden_vars(self) -> List[int]:
        return [k for k, h in enumerate(self.hidden) if h]

    def check(self, schema: VariableSchema) -> None:
        if len(self.values) != schema.n_vars:
            raise SchemaError(f"instance has {len(self.values)} values, schema has {schema.n_vars}")
        for k, (v, c) in enumerate(zip(self.values, schema.cardinalities)):
            if not 0 <= v < c:
                raise SchemaError(f"value {v} of variable {k} outside cardinality {c}")


@dataclass(frozen=True)
class Dataset:
    schema: VariableSchema
    instances: Tuple[Instance, ...]

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        for inst in self.instances:
            inst.check(self.schema)

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def n_instances(self) -> int:
        return len(self.instances)

    @cached_property
    def values(self) -> np.ndarray:
        """(M, N) integer matrix of assigned values."""
        if not self.instances:
            return np.zeros((0, self.schema.n_vars), dtype=np.int64)
        return np.array([inst.values for inst in self.instances], dtype=np.int64)

    @cached_property
    def hidden(self) -> np.ndarray:
        """(M, N) boolean matrix, True where the variable is hidden."""
        if not self.instances:
            return np.zeros((0, self.schema.n_vars), dtype=bool)
        return np.array([inst.hidden for inst in self.instances], dtype=bool)

    def with_hidden(self, mask: np.ndarray) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_instances, self.schema.n_vars):
            raise SchemaError(f"hidden mask shape {mask.shape} does not match dataset")
        return Dataset(self.schema, tuple(
            Instance(inst.values, tuple(row)) for inst, row in zip(self.instances, mask.tolist())
        ))

    def subset(self, rows: Iterable[int]) -> "Dataset":
        return Dataset(self.schema, tuple(self.instances[i] for i in rows))


@dataclass(frozen=True)
class FeatureTerms:
    """Features of a model grouped by arity, as slot arrays aligned to weight indices."""
    unary_index: np.ndarray
    unary_slot: np.ndarray
    pair_index: np.ndarray
    pair_a: np.ndarray
    pair_b: np.ndarray
    higher: Tuple[Tuple[int, Tuple[int, ...]], ...] = field(default=())


@dataclass(frozen=True, eq=False)
class Model:
    schema: VariableSchema
    features: Tuple[Feature, ...]
    weights: np.ndarray
    policy: CandidatePolicy = CandidatePolicy.NON_REFERENCE

    def __post_init__(self):
        features = tuple(self.features)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        weights.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "policy", CandidatePolicy(self.policy))
        if len(weights) != len(features):
            raise FeatureError(f"{len(weights)} weights for {len(features)} features")
        if not np.all(np.isfinite(weights)):
            raise FeatureError("model weights must be finite")
        if len(set(features)) != len(features):
            raise FeatureError("model contains duplicate features")
        for f in features:
            if not f.is_canonical():
                raise FeatureError(f"feature {f} is not canonical")
            for s in f.states:
                self.schema.check_state(s)

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def l1_norm(self) -> float:
        return float(np.abs(self.weights).sum())

    @property
    def active_count(self) -> int:
        """Features with non-zero weight."""
        return int(np.count_nonzero(self.weights))

    def active_features(self) -> List[Tuple[Feature, float]]:
        return [(f, float(w)) for f, w in zip(self.features, self.weights) if w != 0.0]

    @cached_property
    def index(self) -> Dict[Feature, int]:
        return {f: i for i, f in enumerate(self.features)}

    def weight_of(self, feature: Feature) -> float:
        i = self.index.get(feature)
        return 0.0 if i is None else float(self.weights[i])

    def with_weights(self, weights: np.ndarray) -> "Model":
        return Model(self.schema, self.features, weights, self.policy)

    @cached_property
    def terms(self) -> FeatureTerms:
        unary_index, unary_slot = [], []
        pair_index, pair_a, pair_b = [], [], []
        higher = []
        for i, f in enumerate(self.features):
            slots = self.schema.feature_slots(f)
            if len(slots) == 1:
                unary_index.append(i)
                unary_slot.append(slots[0])
            elif len(slots) == 2:
                pair_index.append(i)
                pair_a.append(slots[0])
                pair_b.append(slots[1])
            else:
                higher.append((i, slots))
        return FeatureTerms(_int_array(unary_index), _int_array(unary_slot), _int_array(pair_index),
                            _int_array(pair_a), _int_array(pair_b), tuple(higher))


def _int_array(xs: Sequence[int]) -> np.ndarray:
    return np.array(xs, dtype=np.int64)


def canonical_pair(a: State, b: State) -> Feature:
    """Pairwise feature over two states on distinct variables, in canonical order."""
    if a.variable == b.variable:
        raise FeatureError(f"self-edge {a}, {b} is not a candidate feature")
    return Feature.of(a, b)


class CandidateSpace:
    """Lazy view of every candidate feature of a schema under a candidate policy.

    Unary candidates come first, then pairwise ones in canonical order.
    Counts are exact and computed without enumerating.
    """

    def __init__(self, schema: VariableSchema,
                 policy: CandidatePolicy = CandidatePolicy.NON_REFERENCE):
        self.schema = schema
        self.policy = CandidatePolicy(policy)
        self.slots = schema.candidate_slots(self.policy)
        self._per_var = np.bincount(schema.slot_variable[self.slots], minlength=schema.n_vars)

    @property
    def unary_count(self) -> int:
        return len(self.slots)

    @property
    def pairwise_count(self) -> int:
        c = len(self.slots)
        same = int((self._per_var * (self._per_var - 1) // 2).sum())
        return c * (c - 1) // 2 - same

    def __len__(self) -> int:
        return self.unary_count + self.pairwise_count

    def unary(self) -> Iterator[Feature]:
        for s in self.slots:
            yield Feature((self.schema.state_of(int(s)),))

    def pair_slots(self) -> Tuple[np.ndarray, np.ndarray]:
        """Slot arrays (a, b), a < b, of every pairwise candidate in canonical order."""
        i, j = np.triu_indices(len(self.slots), k=1)
        a, b = self.slots[i], self.slots[j]
        keep = self.schema.slot_variable[a] != self.schema.slot_variable[b]
        return a[keep], b[keep]

    def pairwise(self) -> Iterator[Feature]:
        states = {int(s): self.schema.state_of(int(s)) for s in self.slots}
        for idx, a in enumerate(self.slots):
            sa = states[int(a)]
            for b in self.slots[idx + 1:]:
                sb = states[int(b)]
                if sa.variable != sb.variable:
                    yield Feature((sa, sb))

    def __iter__(self) -> Iterator[Feature]:
        return chain(self.unary(), self.pairwise())


def enumerate_candidates(schema: VariableSchema,
                         policy: CandidatePolicy = CandidatePolicy.NON_REFERENCE) -> CandidateSpace:
    return CandidateSpace(schema, policy)


def init_unary_model(schema: VariableSchema,
                     policy: CandidatePolicy = CandidatePolicy.NON_REFERENCE) -> Model:
    """Model holding every unary candidate at weight 0."""
    features = tuple(enumerate_candidates(schema, policy).unary())
    return Model(schema, features, np.zeros(len(features)), policy)


def activate_features(model: Model, new: Iterable[Feature]) -> Model:
    """Append features not yet in ``model`` with weight 0.

    Existing features keep their position and weight; new ones are appended
    in the given order, so weight vectors only ever grow at the tail.
    """
    seen = set(model.index)
    added: List[Feature] = []
    for f in new:
        if not f.is_canonical():
            raise FeatureError(f"feature {f} is not canonical")
        for s in f.states:
            model.schema.check_state(s)
        if f not in seen:
            seen.add(f)
            added.append(f)
    if not added:
        return model
    logger.debug("activating %d features", len(added))
    return Model(model.schema, model.features + tuple(added),
                 np.concatenate((model.weights, np.zeros(len(added)))), model.policy)
