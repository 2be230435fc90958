from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Text, Tuple, Union

import numpy as np

from confsafe.autoconf import Registry
from confsafe.core import Policy, Seed, as_batch, as_generator, check_gamma

__doc__ = Path(__file__).with_suffix(".rst").read_text()

register_cost = Registry("cost")
"""Registry of immediate costs encoding the safe set."""


@dataclass(frozen=True)
class ImmediateCost:
    """State cost with certified bounds.

    The cost lies in ``[c_lower, c_upper]`` everywhere, and is at least ``c_hat`` on
    every unsafe state.
    """

    function: Callable[[np.ndarray], np.ndarray]
    c_lower: float
    c_upper: float
    c_hat: float
    name: Text = "cost"

    def __post_init__(self):
        if not self.c_lower <= self.c_upper:
            raise ValueError(f"c_lower {self.c_lower} exceeds c_upper {self.c_upper}")
        if not self.c_hat <= self.c_upper:
            raise ValueError(f"c_hat {self.c_hat} exceeds c_upper {self.c_upper}")

    @property
    def c_max(self) -> float:
        """Largest magnitude of the cost."""
        return max(abs(self.c_lower), abs(self.c_upper))

    def __call__(self, states) -> Union[float, np.ndarray]:
        batch, single = as_batch(states)
        result = np.asarray(self.function(batch), dtype=float).reshape(len(batch))
        return float(result[0]) if single else result

    def satisfies_bounds(self, states, safe) -> bool:
        """Checks the bounds on sampled states, given which of them are safe."""
        costs = self(np.atleast_2d(states))
        unsafe = ~np.asarray(safe, dtype=bool).reshape(-1)
        within = np.all((costs >= self.c_lower) & (costs <= self.c_upper))
        return bool(within and np.all(costs[unsafe] >= self.c_hat))


def indicator_cost(safe_indicator: Callable) -> ImmediateCost:
    """One on unsafe states, zero on safe states."""

    def cost(states: np.ndarray) -> np.ndarray:
        return 1.0 - np.asarray(safe_indicator(states), dtype=float).reshape(-1)

    return ImmediateCost(cost, c_lower=0.0, c_upper=1.0, c_hat=1.0, name="indicator")


def margin_cost(
    safe_indicator: Callable, signed_distance: Callable, slope: float = 20.0
) -> ImmediateCost:
    """Logistic function of the signed distance to the safe set.

    The cost is one half on the boundary and tends to one deep in the unsafe set. On
    states flagged unsafe, it is never below one half.
    """
    from scipy.special import expit

    if slope <= 0:
        raise ValueError(f"Margin cost slope must be positive, got {slope}")

    def cost(states: np.ndarray) -> np.ndarray:
        values = expit(slope * np.asarray(signed_distance(states), dtype=float))
        unsafe = ~np.asarray(safe_indicator(states), dtype=bool).reshape(-1)
        return np.where(unsafe, np.maximum(values, 0.5), values)

    return ImmediateCost(cost, c_lower=0.0, c_upper=1.0, c_hat=0.5, name="margin")


@dataclass(frozen=True)
class SafetyObjective:
    """Cost, discount and the thresholds defining safe sub-level sets.

    States whose cost-value is below :py:attr:`xi_bar` are safe. The tighter threshold
    :py:attr:`xi` is the one enforced by filters and certificates.
    """

    cost: ImmediateCost
    gamma: float
    c_min_bound: float
    """Lower bound on the smallest cost-value over the state space."""
    xi_bar: float
    xi: float

    def __post_init__(self):
        check_gamma(self.gamma)
        analytic = self.cost.c_lower / (1 - self.gamma)
        if self.c_min_bound < analytic - 1e-12:
            raise ValueError(
                f"c_min_bound {self.c_min_bound} is below the analytic bound {analytic}"
            )
        if not self.xi < self.xi_bar:
            raise ValueError(
                f"xi ({self.xi}) must be smaller than xi_bar ({self.xi_bar})"
            )

    @classmethod
    def create(
        cls,
        cost: ImmediateCost,
        gamma: float = 0.99,
        xi: Optional[float] = None,
        c_min_bound: Optional[float] = None,
    ) -> "SafetyObjective":
        """Objective with default bounds and thresholds.

        Args:
            cost: immediate cost.
            gamma: discount factor.
            xi: enforced threshold. Defaults to halfway between ``c_min_bound`` and
                ``xi_bar``.
            c_min_bound: lower bound on the cost-value. Defaults to
                ``c_lower / (1 - gamma)``.
        """
        check_gamma(gamma)
        if c_min_bound is None:
            c_min_bound = cost.c_lower / (1 - gamma)
        xi_bar = gamma * c_min_bound + cost.c_hat
        if xi is None:
            xi = c_min_bound + 0.5 * (xi_bar - c_min_bound)
        return cls(cost, gamma, c_min_bound, xi_bar, xi)

    def with_grid_floor(self, minimum: float) -> "SafetyObjective":
        """Objective using the smallest tabulated value as a tighter cost floor."""
        c_min_bound = max(self.c_min_bound, float(minimum))
        return replace(
            self,
            c_min_bound=c_min_bound,
            xi_bar=self.gamma * c_min_bound + self.cost.c_hat,
        )


def safe_threshold(objective: SafetyObjective) -> float:
    """Largest threshold whose sub-level set only contains safe states."""
    if not np.isfinite(objective.c_min_bound):
        raise ValueError("c_min_bound must be finite")
    return objective.gamma * objective.c_min_bound + objective.cost.c_hat


def cumulative_cost_mc(
    dynamics: Callable,
    policy: Policy,
    cost: Callable,
    gamma: float,
    x0,
    n_rollouts: int,
    rng: Seed = None,
    horizon: Optional[int] = None,
) -> Tuple[float, float]:
    """Monte-Carlo estimate of the discounted cumulative cost from a state.

    Roll-outs are simulated together as one batch and truncated after ``horizon``
    steps, by default when the discounted tail falls below ``1e-6``.

    Returns:
        The sample mean and its standard error.
    """
    from confsafe.core import NonFiniteStateError, as_vector, truncation_horizon

    check_gamma(gamma)
    if n_rollouts < 1:
        raise ValueError(f"Need at least one roll-out, got {n_rollouts}")
    if horizon is None:
        if not hasattr(cost, "c_max"):
            raise ValueError("A horizon is required for costs without known bounds")
        horizon = truncation_horizon(gamma, cost.c_max)
    generator = as_generator(rng)
    states = np.tile(as_vector(x0, "x0"), (n_rollouts, 1))
    totals = np.zeros(n_rollouts)
    for step in range(horizon + 1):
        totals += gamma ** step * np.asarray(cost(states), dtype=float).reshape(-1)
        if step == horizon:
            break
        states = np.asarray(dynamics(states, policy(states), generator), dtype=float)
        if not np.all(np.isfinite(states)):
            raise NonFiniteStateError(step + 1, states[~np.isfinite(states).all(1)][0])
    error = totals.std(ddof=1) / np.sqrt(n_rollouts) if n_rollouts > 1 else 0.0
    return float(totals.mean()), float(error)


@register_cost(name="indicator")
def indicator(environment) -> ImmediateCost:
    """One on unsafe states and zero elsewhere."""
    return indicator_cost(environment.safe_indicator)


@register_cost(name="margin")
def margin(environment, slope: float = 20.0) -> ImmediateCost:
    """Smooth cost saturating at one deep in the unsafe set.

    Args:
        slope: steepness of the logistic function of the signed distance.
    """
    return margin_cost(environment.safe_indicator, environment.signed_distance, slope)
