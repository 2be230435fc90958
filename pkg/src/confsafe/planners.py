"""Nominal and warm-up policies.

The nominal policy seeks reward and ignores safety: it plans over a short receding
horizon on the model's mean with the cross-entropy method. The warm-up policy draws
actions uniformly over the action box.
"""
from logging import getLogger
from typing import Callable, Optional

import numpy as np

from confsafe.core import Box, Seed, as_batch, as_generator

logger = getLogger(__name__)


class UniformPolicy:
    """Actions drawn uniformly over a box."""

    def __init__(self, box: Box, rng: Seed = None):
        self.box = box
        self.generator = as_generator(rng)

    def __call__(self, states) -> np.ndarray:
        batch, single = as_batch(states)
        result = self.box.sample(self.generator, len(batch))
        return result[0] if single else result


class CEMPlanner:
    """Receding-horizon planner maximizing the predicted reward.

    Each call optimizes an open-loop action sequence over ``horizon`` steps of the
    model's mean with :py:func:`~confsafe.optimizers.cross_entropy_search`, and
    returns its first action. The next call starts from the previous solution shifted
    by one step.

    Args:
        dynamics: batched deterministic step ``(states, actions) -> next states``,
            usually the mean of a model set.
        reward: batched reward ``(states, actions) -> rewards``.
        action_box: feasible actions.
        horizon: planning horizon.
        population: candidate sequences per iteration.
        elite_count: candidates defining the next sampling distribution.
        iterations: cross-entropy iterations per call.
        discount: discount applied to predicted rewards.
        rng: source of randomness.
    """

    def __init__(
        self,
        dynamics: Callable,
        reward: Callable,
        action_box: Box,
        horizon: int = 20,
        population: int = 64,
        elite_count: int = 8,
        iterations: int = 4,
        discount: float = 1.0,
        rng: Seed = None,
    ):
        if horizon < 1:
            raise ValueError(f"Planning horizon must be positive, got {horizon}")
        self.dynamics = dynamics
        self.reward = reward
        self.action_box = action_box
        self.horizon = horizon
        self.population = population
        self.elite_count = elite_count
        self.iterations = iterations
        self.discount = discount
        self.generator = as_generator(rng)
        self._plan: Optional[np.ndarray] = None

    def reset(self):
        """Forgets the warm start, e.g. at the start of an episode."""
        self._plan = None

    def predicted_return(self, state: np.ndarray, sequences: np.ndarray) -> np.ndarray:
        """Discounted reward of each candidate action sequence from a state."""
        count = len(sequences)
        actions = sequences.reshape(count, self.horizon, self.action_box.dimension)
        states = np.tile(state, (count, 1))
        totals = np.zeros(count)
        with np.errstate(all="ignore"):
            for step in range(self.horizon):
                totals += self.discount ** step * np.asarray(
                    self.reward(states, actions[:, step]), dtype=float
                ).reshape(-1)
                states = np.asarray(
                    self.dynamics(states, actions[:, step]), dtype=float
                )
        return totals

    def plan(self, state) -> np.ndarray:
        """Optimized action sequence, shape ``(horizon, action dimension)``."""
        from confsafe.optimizers import cross_entropy_search

        state = np.asarray(state, dtype=float).reshape(-1)
        dimension = self.action_box.dimension
        if self._plan is None:
            mean = np.tile(self.action_box.center, self.horizon)
        else:
            mean = np.concatenate((self._plan[1:].ravel(), self._plan[-1]))
        std = np.tile(self.action_box.width / 4, self.horizon)
        result = cross_entropy_search(
            lambda candidates: -self.predicted_return(state, candidates),
            mean,
            std,
            lower=np.tile(self.action_box.lower, self.horizon),
            upper=np.tile(self.action_box.upper, self.horizon),
            population=self.population,
            elite_count=self.elite_count,
            iterations=self.iterations,
            rng=self.generator,
            initial=mean,
        )
        self._plan = result.best.reshape(self.horizon, dimension)
        return self._plan

    def __call__(self, states) -> np.ndarray:
        batch, single = as_batch(states)
        result = np.stack([self.plan(state)[0] for state in batch])
        return result[0] if single else result
