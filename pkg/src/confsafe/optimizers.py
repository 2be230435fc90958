"""Population-based search shared by the filter, the planner and the backup learner."""
from dataclasses import dataclass, field
from logging import getLogger
from typing import Callable, List, Optional

import numpy as np

from confsafe.core import Seed, as_generator

logger = getLogger(__name__)


@dataclass
class CrossEntropyResult:
    """Best candidate and sampling distribution after a cross-entropy search."""

    best: np.ndarray
    """Lowest-scoring candidate seen in any iteration."""
    score: float
    """Score of :py:attr:`best`."""
    mean: np.ndarray
    """Mean of the final sampling distribution."""
    std: np.ndarray
    """Standard deviation of the final sampling distribution."""
    history: List[float] = field(default_factory=list)
    """Best score after each iteration."""


def cross_entropy_search(
    score: Callable[[np.ndarray], np.ndarray],
    mean,
    std,
    lower=None,
    upper=None,
    population: int = 64,
    elite_count: int = 8,
    iterations: int = 10,
    rng: Seed = None,
    std_floor: float = 1e-6,
    initial: Optional[np.ndarray] = None,
) -> CrossEntropyResult:
    """Minimizes a batched score with the cross-entropy method.

    Candidates are drawn from a diagonal Gaussian, clipped to the bounds, and scored in
    one call. The ``elite_count`` lowest scores define the next mean and standard
    deviation.

    Args:
        score: maps ``(population, dimension)`` candidates to ``(population,)`` scores.
            Lower is better. Non-finite scores are ranked last.
        mean: initial mean of the sampling distribution.
        std: initial standard deviation of the sampling distribution.
        lower: optional lower bound on candidates.
        upper: optional upper bound on candidates.
        population: number of candidates per iteration.
        elite_count: number of candidates defining the next distribution.
        iterations: number of sampling rounds.
        rng: source of randomness.
        std_floor: smallest standard deviation per dimension.
        initial: candidates injected into the first population, e.g. a warm start.

    Returns:
        The best candidate, its score, and the final distribution.
    """
    if population < 1 or not 1 <= elite_count <= population:
        raise ValueError(
            f"Need 1 <= elite_count ({elite_count}) <= population ({population})"
        )
    generator = as_generator(rng)
    mean = np.array(mean, dtype=float).reshape(-1)
    std = np.broadcast_to(np.asarray(std, dtype=float), mean.shape)
    std = np.maximum(std, std_floor)
    lower = np.full_like(mean, -np.inf) if lower is None else np.asarray(lower, float)
    upper = np.full_like(mean, np.inf) if upper is None else np.asarray(upper, float)

    best, best_score, history = np.clip(mean, lower, upper), np.inf, []
    for iteration in range(iterations):
        candidates = generator.normal(mean, std, (population, mean.size))
        if iteration == 0 and initial is not None:
            injected = np.atleast_2d(np.asarray(initial, dtype=float))[:population]
            candidates[: len(injected)] = injected
        candidates = np.clip(candidates, lower, upper)
        scores = np.asarray(score(candidates), dtype=float).reshape(-1)
        scores = np.where(np.isfinite(scores), scores, np.inf)
        order = np.argsort(scores, kind="stable")
        if scores[order[0]] < best_score:
            best, best_score = candidates[order[0]].copy(), float(scores[order[0]])
        elites = candidates[order[:elite_count]]
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), std_floor)
        history.append(best_score)
        logger.debug("cross-entropy iteration %i: best score %g", iteration, best_score)
    return CrossEntropyResult(best, best_score, mean, std, history)
