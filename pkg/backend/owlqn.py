"""Orthant-wise limited-memory quasi-Newton (OWL-QN) for smooth + L1 objectives.

The smooth part is supplied as a callback ``theta -> (value, gradient)``; the
L1 term ``lambda1 * ||theta||_1`` is handled here through the pseudo-gradient
and an orthant-projected backtracking line search. Coordinates that the
projection zeroes are exact zeros.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]

CURVATURE_EPS = 1e-12


@dataclass(frozen=True)
class OwlqnConfig:
    memory: int = 10
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_line_search_steps: int = 30


@dataclass
class OptimizerState:
    config: OwlqnConfig = field(default_factory=OwlqnConfig)
    memory: Deque[Tuple[np.ndarray, np.ndarray]] = field(default_factory=deque)
    last_theta: Optional[np.ndarray] = None
    last_grad: Optional[np.ndarray] = None
    iteration: int = 0
    rejected_pairs: int = 0

    def remember(self, theta: np.ndarray, smooth_grad: np.ndarray) -> None:
        """Push (theta - last_theta, grad - last_grad) unless it fails the curvature guard."""
        if self.last_theta is not None:
            s = theta - self.last_theta
            y = smooth_grad - self.last_grad
            if s.dot(y) > CURVATURE_EPS:
                self.memory.append((s, y))
                while len(self.memory) > self.config.memory:
                    self.memory.popleft()
            else:
                self.rejected_pairs += 1
        self.last_theta = theta.copy()
        self.last_grad = smooth_grad.copy()

    def grow(self, n_new: int, reset: bool = False) -> None:
        """Extend every stored vector with ``n_new`` trailing zeros (new features)."""
        if n_new <= 0:
            return
        if reset:
            self.memory.clear()

        def pad(v: np.ndarray) -> np.ndarray:
            return np.concatenate((v, np.zeros(n_new)))

        self.memory = deque((pad(s), pad(y)) for s, y in self.memory)
        if self.last_theta is not None:
            self.last_theta = pad(self.last_theta)
            self.last_grad = pad(self.last_grad)

    def reset(self) -> None:
        self.memory.clear()
        self.last_theta = None
        self.last_grad = None


@dataclass(frozen=True)
class StepInfo:
    value: float
    step_size: float
    line_search_steps: int
    stalled: bool = False
    stationary: bool = False


def pseudo_gradient(theta: np.ndarray, smooth_grad: np.ndarray, l1: float) -> np.ndarray:
    """Minimum-norm subgradient of smooth + l1 * ||theta||_1."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(smooth_grad, dtype=np.float64)
    if theta.shape != g.shape:
        raise ValueError(f"theta {theta.shape} and gradient {g.shape} differ in shape")
    out = np.where(theta > 0, g + l1, np.where(theta < 0, g - l1, 0.0))
    at_zero = theta == 0
    out = np.where(at_zero & (g + l1 < 0), g + l1, out)
    out = np.where(at_zero & (g - l1 > 0), g - l1, out)
    return out


def search_direction(state: OptimizerState, pgrad: np.ndarray) -> np.ndarray:
    """Two-loop L-BFGS recursion on -pgrad, then sign alignment with -pgrad."""
    q = -np.asarray(pgrad, dtype=np.float64)
    if state.memory:
        pairs = list(state.memory)
        rho = [1.0 / y.dot(s) for s, y in pairs]
        alpha = [0.0] * len(pairs)
        for i in range(len(pairs) - 1, -1, -1):
            s, y = pairs[i]
            alpha[i] = rho[i] * s.dot(q)
            q = q - alpha[i] * y
        s, y = pairs[-1]
        q = q * (s.dot(y) / y.dot(y))
        for i, (s, y) in enumerate(pairs):
            beta = rho[i] * y.dot(q)
            q = q + (alpha[i] - beta) * s
    # drop coordinates that disagree in sign with the steepest-descent direction
    return np.where(q * pgrad < 0, q, 0.0)


def _total(evaluate: Objective, theta: np.ndarray, l1: float) -> Tuple[float, np.ndarray]:
    value, grad = evaluate(theta)
    return value + l1 * float(np.abs(theta).sum()), grad


def orthant_step(theta: np.ndarray, d: np.ndarray, evaluate: Objective, l1: float,
                 state: OptimizerState, pgrad: np.ndarray,
                 current: Optional[float] = None) -> Tuple[np.ndarray, StepInfo]:
    """Projected backtracking line search along ``d`` inside the chosen orthant.

    Returns theta unchanged with ``stalled`` set when no step within
    ``max_line_search_steps`` satisfies the Armijo condition.
    """
    cfg = state.config
    if current is None:
        current, _ = _total(evaluate, theta, l1)
    xi = np.where(theta != 0, np.sign(theta), np.sign(-pgrad))
    alpha = 1.0
    # only the very first step is scaled; later memory clears start from 1
    if state.iteration <= 1 and not state.memory:
        norm = float(np.linalg.norm(pgrad))
        alpha = 1.0 / norm if norm > 0 else 1.0
    for step in range(1, cfg.max_line_search_steps + 1):
        candidate = theta + alpha * d
        candidate = np.where(np.sign(candidate) == xi, candidate, 0.0)
        if not np.array_equal(candidate, theta):
            value, _ = _total(evaluate, candidate, l1)
            if value <= current + cfg.armijo_c * float(pgrad.dot(candidate - theta)) and value < current:
                return candidate, StepInfo(value, alpha, step)
        alpha *= cfg.backtrack_factor
    logger.debug("line search exhausted after %d steps", cfg.max_line_search_steps)
    return theta, StepInfo(current, 0.0, cfg.max_line_search_steps, stalled=True)


def owlqn_iterate(state: OptimizerState, theta: np.ndarray, smooth_grad: np.ndarray,
                  evaluate: Objective, l1: float) -> Tuple[OptimizerState, np.ndarray, StepInfo]:
    """One pseudo-gradient -> direction -> line search cycle.

    The memory pair for the previous step is formed here, from the gradient
    of the current call, so callers may change the objective between calls.
    """
    theta = np.asarray(theta, dtype=np.float64)
    smooth_grad = np.asarray(smooth_grad, dtype=np.float64)
    state.remember(theta, smooth_grad)
    state.iteration += 1
    pgrad = pseudo_gradient(theta, smooth_grad, l1)
    if not np.any(pgrad):
        value, _ = _total(evaluate, theta, l1)
        return state, theta, StepInfo(value, 0.0, 0, stationary=True)
    d = search_direction(state, pgrad)
    if pgrad.dot(d) >= 0:
        # curvature memory produced no descent direction; fall back to steepest descent
        state.memory.clear()
        d = -pgrad
    new_theta, info = orthant_step(theta, d, evaluate, l1, state, pgrad)
    if info.stalled and state.memory:
        state.memory.clear()
        new_theta, info = orthant_step(theta, -pgrad, evaluate, l1, state, pgrad)
    if info.stalled:
        logger.debug("optimizer stalled at iteration %d", state.iteration)
    return state, new_theta, info


def minimize(evaluate: Objective, theta0: np.ndarray, l1: float,
             config: Optional[OwlqnConfig] = None, max_iterations: int = 100,
             tol: float = 1e-10) -> Tuple[np.ndarray, int]:
    """Run owlqn_iterate on a fixed objective until the pseudo-gradient vanishes.

    Returns the final point and the number of iterations used.
    """
    state = OptimizerState(config or OwlqnConfig())
    theta = np.asarray(theta0, dtype=np.float64).copy()
    for it in range(1, max_iterations + 1):
        _, grad = evaluate(theta)
        if np.max(np.abs(pseudo_gradient(theta, grad, l1)), initial=0.0) <= tol:
            return theta, it - 1
        state, theta, info = owlqn_iterate(state, theta, grad, evaluate, l1)
        if info.stalled or info.stationary:
            return theta, it
    return theta, max_iterations
