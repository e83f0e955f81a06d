"""Synthetic ground-truth networks and Gibbs-sampled datasets.

All randomness flows from one integer seed; each phase (structure, weights,
chain, splits) draws from its own generator spawned from that seed, so
changing e.g. the chain length never changes the sampled structure.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from backend.model import (CandidatePolicy, Dataset, Feature, FeatureError, FeatureKind, Instance,
                           Model, State, VariableSchema, init_unary_model)

logger = logging.getLogger(__name__)

PHASES = {"structure": 0, "weights": 1, "chain": 2, "splits": 3}


def phase_rng(seed: int, phase: str) -> np.random.Generator:
    """PCG64 generator for one named phase of a seeded run."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), PHASES[phase]]))


@dataclass(frozen=True)
class SyntheticSpec:
    n_nodes: int
    degree: float = 5.0
    samples: int = 200
    burn_in: int = 10000
    thinning: int = 1000
    weight_lo: float = -5.0
    weight_hi: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError(f"need at least one node, got {self.n_nodes}")
        if not 0 < self.degree or (self.n_nodes > 1 and not self.degree < self.n_nodes):
            raise ValueError(f"mean degree must satisfy 0 < K < N, got K={self.degree}, N={self.n_nodes}")
        if not self.weight_lo < self.weight_hi:
            raise ValueError(f"weight range [{self.weight_lo}, {self.weight_hi}) is empty")
        if self.burn_in < 1 or self.thinning < 1:
            raise ValueError("burn-in and thinning must be at least one sweep")
        if self.samples < 1:
            raise ValueError(f"need at least one sample, got {self.samples}")

    @property
    def edge_probability(self) -> float:
        if self.n_nodes == 1:
            return 0.0
        return min(1.0, self.degree / (self.n_nodes - 1))

    @property
    def chain_length(self) -> int:
        """Total sweeps: burn-in, then one thinning interval between samples."""
        return self.burn_in + (self.samples - 1) * self.thinning


@dataclass(frozen=True, eq=False)
class TrueNetwork:
    edges: np.ndarray
    weights: np.ndarray
    model: Model

    def edge_rows(self) -> List[Tuple[int, int, float]]:
        return [(int(a), int(b), float(w)) for (a, b), w in zip(self.edges, self.weights)]

    @property
    def pair_features(self) -> List[Feature]:
        return [f for f in self.model.features if f.kind is FeatureKind.PAIRWISE]


def sample_structure(spec: SyntheticSpec) -> TrueNetwork:
    """Bernoulli edge sampling with p = K / (N - 1), one (1, 1) feature per edge."""
    schema = VariableSchema((2,) * spec.n_nodes)
    a, b = np.triu_indices(spec.n_nodes, k=1)
    keep = phase_rng(spec.seed, "structure").random(len(a)) < spec.edge_probability
    edges = np.column_stack((a[keep], b[keep])).astype(np.int64)
    weights = phase_rng(spec.seed, "weights").uniform(spec.weight_lo, spec.weight_hi, len(edges))
    unary = init_unary_model(schema, CandidatePolicy.NON_REFERENCE)
    pairs = tuple(Feature((State(int(i), 1), State(int(j), 1))) for i, j in edges)
    model = Model(schema, unary.features + pairs, np.concatenate((unary.weights, weights)))
    logger.info("sampled %d edges over %d nodes (p=%.5g)", len(edges), spec.n_nodes,
                spec.edge_probability)
    return TrueNetwork(edges, weights, model)


def _conditional_terms(model: Model):
    schema = model.schema
    unary = [[0.0] * c for c in schema.cardinalities]
    terms: List[List[Tuple[int, int, int, float]]] = [[] for _ in range(schema.n_vars)]
    for f, w in zip(model.features, model.weights):
        if w == 0.0:
            continue
        if f.kind is FeatureKind.UNARY:
            s = f.states[0]
            unary[s.variable][s.value] += float(w)
        elif f.kind is FeatureKind.PAIRWISE:
            sa, sb = f.states
            terms[sa.variable].append((sa.value, sb.variable, sb.value, float(w)))
            terms[sb.variable].append((sb.value, sa.variable, sa.value, float(w)))
        else:
            raise FeatureError(f"Gibbs sampling supports unary and pairwise features, got {f}")
    return unary, terms


def gibbs_chain(truth: Model, spec: SyntheticSpec) -> Dataset:
    """Sequential-scan Gibbs sampler; one sweep resamples every variable once, ascending."""
    schema = truth.schema
    unary, terms = _conditional_terms(truth)
    cards = schema.cardinalities
    rng = phase_rng(spec.seed, "chain")
    x = [int(v) for v in rng.integers(0, cards)]
    samples: List[Instance] = []
    hidden = (False,) * schema.n_vars
    next_record = spec.burn_in
    for sweep in range(1, spec.chain_length + 1):
        u = rng.random(schema.n_vars)
        for k in range(schema.n_vars):
            field = list(unary[k])
            for vk, j, vj, w in terms[k]:
                if x[j] == vj:
                    field[vk] += w
            top = max(field)
            ps = [math.exp(f - top) for f in field]
            r = u[k] * sum(ps)
            v, acc = 0, ps[0]
            while r >= acc and v < cards[k] - 1:
                v += 1
                acc += ps[v]
            x[k] = v
        if sweep == next_record:
            samples.append(Instance(tuple(x), hidden))
            next_record += spec.thinning
    logger.info("gibbs chain: %d sweeps, %d samples", spec.chain_length, len(samples))
    return Dataset(schema, tuple(samples))
