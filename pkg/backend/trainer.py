"""Training loop for the three induction strategies.

Every outer iteration recomputes q0/q1 for the current model, takes exactly
one OWL-QN step on the CD objective with those marginals frozen, and (in the
incremental modes) scores candidates from the same marginals and activates
the best batch.
"""
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend import config as app_config
from backend.induction import (ScoreMap, Thresholds, build_signal_error_table, cfi_scores,
                               grafting_scores, select_top)
from backend.mean_field import (DEFAULT_MAX_SWEEPS, DEFAULT_TOL, MarginalsBatch, Potentials,
                                cd_sweep_batch, entropies, mf_converge_batch)
from backend.model import (CandidatePolicy, CandidateSpace, Dataset, Feature, FeatureError, Model,
                           SchemaError, activate_features, init_unary_model)
from backend.objective import active_gradient, cd_terms, frozen_objective, objective_value
from backend.owlqn import OptimizerState, OwlqnConfig, owlqn_iterate

logger = logging.getLogger(__name__)


class TrainMode(str, Enum):
    FULL = "full"
    GRAFTING = "grafting"
    CFI = "cfi"
    # fixed feature set, no induction
    TRUEGRAPH = "truegraph"

    @property
    def induces(self) -> bool:
        return self in (TrainMode.GRAFTING, TrainMode.CFI)


class Staging(str, Enum):
    MERGED = "merged"
    TWO_STAGE = "two-stage"


@dataclass(frozen=True)
class TrainConfig:
    mode: TrainMode = TrainMode.CFI
    l1: float = 2.0
    l2: float = 1.0
    batch_size: int = 50
    thresholds: Thresholds = field(default_factory=Thresholds)
    # None selects with gate = l1
    gate: Optional[float] = None
    mf_max_sweeps: int = DEFAULT_MAX_SWEEPS
    mf_tol: float = DEFAULT_TOL
    optimizer: OwlqnConfig = field(default_factory=OwlqnConfig)
    reset_memory_on_growth: bool = False
    rel_tol: float = 1e-4
    patience: int = 3
    max_iterations: int = 500
    seed: int = 0
    policy: CandidatePolicy = CandidatePolicy.NON_REFERENCE
    staging: Staging = Staging.MERGED

    def __post_init__(self):
        object.__setattr__(self, "mode", TrainMode(self.mode))
        object.__setattr__(self, "policy", CandidatePolicy(self.policy))
        object.__setattr__(self, "staging", Staging(self.staging))
        app_config.require(app_config.validate_regularizer(self.l1), "l1", self.l1)
        app_config.require(app_config.validate_regularizer(self.l2), "l2", self.l2)
        app_config.require(app_config.validate_batch_size(self.batch_size), "batch_size", self.batch_size)
        app_config.require(app_config.validate_threshold(self.thresholds.t_err), "t_err",
                           self.thresholds.t_err)
        app_config.require(app_config.validate_threshold(self.thresholds.t_sig), "t_sig",
                           self.thresholds.t_sig)
        app_config.require(app_config.validate_patience(self.patience), "patience", self.patience)
        app_config.require(app_config.validate_rel_tol(self.rel_tol), "rel_tol", self.rel_tol)
        app_config.require(self.max_iterations >= 1, "max_iterations", self.max_iterations)
        app_config.require(self.mf_max_sweeps >= 1, "mf_max_sweeps", self.mf_max_sweeps)

    @property
    def selection_gate(self) -> float:
        return self.l1 if self.gate is None else self.gate

    @classmethod
    def from_config(cls, config: Dict[str, Any], **overrides) -> "TrainConfig":
        """Build from an app config dict; keyword overrides win, None means "not given"."""
        merged = dict(app_config.DEFAULTS)
        merged.update(config)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls(
            mode=merged.get("mode", TrainMode.CFI),
            l1=float(merged["l1"]),
            l2=float(merged["l2"]),
            batch_size=int(merged["batch_size"]),
            thresholds=Thresholds(float(merged["t_err"]), float(merged["t_sig"])),
            gate=merged.get("gate"),
            mf_max_sweeps=int(merged["mf_max_sweeps"]),
            mf_tol=float(merged["mf_tol"]),
            optimizer=OwlqnConfig(int(merged["lbfgs_memory"]), float(merged["armijo_c"]),
                                  float(merged["backtrack_factor"]),
                                  int(merged["max_line_search_steps"])),
            reset_memory_on_growth=bool(merged["reset_memory_on_growth"]),
            rel_tol=float(merged["rel_tol"]),
            patience=int(merged["patience"]),
            max_iterations=int(merged["max_iterations"]),
            seed=int(merged.get("seed", 0)),
            policy=merged["candidate_policy"],
            staging=merged["staging"],
        )

    def as_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode.value, "l1": self.l1, "l2": self.l2, "batch_size": self.batch_size,
            "t_err": self.thresholds.t_err, "t_sig": self.thresholds.t_sig,
            "gate": self.selection_gate, "mf_max_sweeps": self.mf_max_sweeps, "mf_tol": self.mf_tol,
            "lbfgs_memory": self.optimizer.memory, "armijo_c": self.optimizer.armijo_c,
            "backtrack_factor": self.optimizer.backtrack_factor,
            "max_line_search_steps": self.optimizer.max_line_search_steps,
            "reset_memory_on_growth": self.reset_memory_on_growth, "rel_tol": self.rel_tol,
            "patience": self.patience, "max_iterations": self.max_iterations, "seed": self.seed,
            "candidate_policy": self.policy.value, "staging": self.staging.value,
        }


@dataclass(frozen=True)
class TraceEntry:
    """One outer iteration.

    ``objective`` and ``l1_norm`` describe the weights the iteration started
    from (with freshly computed marginals); the counts describe the model it
    produced.
    """
    iteration: int
    objective: float
    l1_norm: float
    introduced: int
    active: int
    added: int = 0
    scored_pairs: int = 0
    one_sided: int = 0
    stalled: bool = False
    unconverged: int = 0
    inference_time: float = 0.0
    optimizer_time: float = 0.0
    score_time: float = 0.0

    def as_dict(self, timings: bool = False) -> Dict[str, Any]:
        row = {
            "iteration": self.iteration, "objective": self.objective, "l1_norm": self.l1_norm,
            "introduced": self.introduced, "active": self.active, "added": self.added,
            "scored_pairs": self.scored_pairs, "one_sided": self.one_sided,
            "stalled": self.stalled, "unconverged": self.unconverged,
        }
        if timings:
            row.update(inference_time=self.inference_time, optimizer_time=self.optimizer_time,
                       score_time=self.score_time)
        return row


@dataclass
class TrainTrace:
    entries: List[TraceEntry] = field(default_factory=list)
    converged: bool = False
    stalled: bool = False
    max_iterations_reached: bool = False
    best_iteration: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, entry: TraceEntry) -> None:
        if self.entries:
            last = self.entries[-1]
            if entry.iteration <= last.iteration or entry.introduced < last.introduced:
                raise ValueError(f"trace entry {entry.iteration} does not extend the trace")
        self.entries.append(entry)

    @property
    def score_time(self) -> float:
        return sum(e.score_time for e in self.entries)

    @property
    def scored_pairs(self) -> int:
        return sum(e.scored_pairs for e in self.entries)

    def rows(self, timings: bool = False) -> List[Dict[str, Any]]:
        return [e.as_dict(timings) for e in self.entries]

    def summary(self) -> Dict[str, Any]:
        last = self.entries[-1] if self.entries else None
        return {
            "iterations": len(self.entries),
            "introduced": last.introduced if last else 0,
            "active": last.active if last else 0,
            "scored_pairs": self.scored_pairs,
            "converged": self.converged,
            "stalled": self.stalled,
            "max_iterations_reached": self.max_iterations_reached,
            "best_iteration": self.best_iteration,
        }


def check_termination(trace: TrainTrace, rel_tol: float, patience: int) -> bool:
    """True when the last ``patience`` iteration pairs all moved less than rel_tol
    in both the objective and ||theta||_1."""
    entries = trace.entries
    if len(entries) < patience + 1:
        return False
    for prev, cur in zip(entries[-patience - 1:-1], entries[-patience:]):
        if abs(cur.objective - prev.objective) > rel_tol * (1.0 + abs(cur.objective)):
            return False
        if abs(cur.l1_norm - prev.l1_norm) > rel_tol * (1.0 + cur.l1_norm):
            return False
    return True


def score_candidates(model: Model, q0: MarginalsBatch, q1: MarginalsBatch,
                     config: TrainConfig) -> ScoreMap:
    if config.mode is TrainMode.GRAFTING:
        return grafting_scores(model, q0, q1)
    table = build_signal_error_table(q0, q1, model.policy)
    return cfi_scores(table, config.thresholds).excluding(model)


def initial_model(data: Dataset, config: TrainConfig,
                  features: Optional[Sequence[Feature]] = None) -> Model:
    model = init_unary_model(data.schema, config.policy)
    if config.mode is TrainMode.FULL:
        return activate_features(model, CandidateSpace(data.schema, config.policy).pairwise())
    if config.mode is TrainMode.TRUEGRAPH:
        if features is None:
            raise FeatureError("truegraph training needs the true feature set")
        return activate_features(model, sorted(features))
    return model


def train(data: Dataset, config: TrainConfig, features: Optional[Sequence[Feature]] = None,
          threads: Optional[int] = None) -> Tuple[Model, TrainTrace]:
    """Train a model on ``data``; returns the model and its per-iteration trace.

    Stops when the termination test holds and no feature was added during the
    last ``patience`` iterations, when the optimizer stalls that long without
    additions, or at ``max_iterations`` (then the lowest-objective model seen
    is returned).
    """
    if len(data) == 0:
        raise SchemaError("training data is empty")
    model = initial_model(data, config, features)
    inducing = config.mode.induces and config.staging is Staging.MERGED
    state = OptimizerState(config.optimizer)
    trace = TrainTrace()
    best_value, best_model = np.inf, model
    last_growth = 0
    stall_run = 0
    logger.info("training %s on %d instances, %d variables, %d initial features",
                config.mode.value, len(data), data.schema.n_vars, model.n_features)

    for it in range(1, config.max_iterations + 1):
        t0 = time.perf_counter()
        pot = Potentials(model)
        q0 = mf_converge_batch(model, data, config.mf_max_sweeps, config.mf_tol,
                               potentials=pot, threads=threads)
        q1 = cd_sweep_batch(model, q0, potentials=pot, threads=threads)
        t1 = time.perf_counter()

        grad = active_gradient(model, q0, q1)
        offset = float((entropies(q1) - entropies(q0)).sum())
        value = objective_value(model, float(cd_terms(model, q0, q1).sum()), config.l1, config.l2)
        if value.total < best_value:
            best_value, best_model = value.total, model
            trace.best_iteration = it
        start_l1 = model.l1_norm
        evaluate = frozen_objective(grad, offset, config.l2)
        state, theta, info = owlqn_iterate(state, model.weights, grad + config.l2 * model.weights,
                                           evaluate, config.l1)
        model = model.with_weights(theta)
        t2 = time.perf_counter()

        added, scored, one_sided = 0, 0, 0
        if inducing:
            scores = score_candidates(model, q0, q1, config)
            scored, one_sided = scores.accumulations, scores.one_sided
            before = model.n_features
            model = activate_features(model, select_top(scores, config.batch_size,
                                                        config.selection_gate))
            added = model.n_features - before
            state.grow(added, reset=config.reset_memory_on_growth)
        t3 = time.perf_counter()

        trace.append(TraceEntry(it, value.total, start_l1, model.n_features, model.active_count,
                                added=added, scored_pairs=scored, one_sided=one_sided,
                                stalled=info.stalled, unconverged=q0.n_unconverged,
                                inference_time=t1 - t0, optimizer_time=t2 - t1,
                                score_time=t3 - t2))
        logger.info("iter %d: objective %.6g, |theta|_1 %.6g, introduced %d, active %d, added %d",
                    it, value.total, start_l1, model.n_features, model.active_count, added)

        if added:
            last_growth = it
        stall_run = stall_run + 1 if info.stalled and not added else 0
        if stall_run >= config.patience:
            logger.warning("optimizer stalled for %d iterations, stopping", stall_run)
            trace.stalled = True
            break
        if it - last_growth >= config.patience and check_termination(trace, config.rel_tol,
                                                                       config.patience):
            if config.mode.induces and not inducing:
                logger.info("unary stage converged at iteration %d, starting induction", it)
                inducing = True
                last_growth = it
                continue
            trace.converged = True
            break
    else:
        logger.warning("no convergence within %d iterations, returning best model (iteration %d)",
                       config.max_iterations, trace.best_iteration)
        trace.max_iterations_reached = True
        model = best_model

    return model, trace
