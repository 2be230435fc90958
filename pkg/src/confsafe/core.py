from dataclasses import dataclass
from enum import Enum, auto
from pathlib import Path
from typing import Callable, Optional, Sequence, Text, Tuple, Union

import numpy as np

__doc__ = Path(__file__).with_suffix(".rst").read_text()

Dynamics = Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]
"""Batched stochastic step: ``(states, actions, generator) -> next states``."""
Policy = Callable[[np.ndarray], np.ndarray]
"""Batched policy: ``(n, d_x)`` states to ``(n, d_u)`` actions."""


class NonFiniteStateError(ValueError):
    """A roll-out produced a NaN or infinite state."""

    def __init__(self, step: int, state: np.ndarray):
        super().__init__(f"Non-finite state at step {step}: {state}")
        self.step = step
        self.state = state


@dataclass(frozen=True)
class RandomSource:
    """Seed and stream identifier for reproducible, independent random streams."""

    seed: int = 0
    """64-bit seed."""
    stream: Union[int, Tuple[int, ...]] = ()
    """Stream path. Distinct paths yield independent generators."""

    def __post_init__(self):
        if isinstance(self.stream, (int, np.integer)):
            object.__setattr__(self, "stream", (int(self.stream),))
        else:
            object.__setattr__(self, "stream", tuple(int(u) for u in self.stream))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(sequence))

    def child(self, *streams: int) -> "RandomSource":
        """Independent sub-stream."""
        return RandomSource(self.seed, tuple(self.stream) + tuple(streams))


Seed = Optional[Union[int, np.random.Generator, RandomSource]]
"""Anything :py:func:`as_generator` accepts."""


def as_generator(seed: Seed = None) -> np.random.Generator:
    """Normalizes the different ways of specifying randomness to a generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, RandomSource):
        return seed.generator()
    return np.random.default_rng(seed=seed)


def as_vector(x, name: Text = "vector") -> np.ndarray:
    """Converts to a finite 1-d float array or raises ``ValueError``."""
    result = np.asarray(x, dtype=float).reshape(-1)
    if result.size == 0:
        raise ValueError(f"{name} must have at least one entry")
    if not np.all(np.isfinite(result)):
        raise ValueError(f"{name} has non-finite entries: {result}")
    return result


def as_batch(x) -> Tuple[np.ndarray, bool]:
    """Returns a 2-d array and whether the input was a single vector."""
    array = np.asarray(x, dtype=float)
    if array.ndim <= 1:
        return array.reshape(1, -1), True
    return array, False


class NoiseKind(Enum):
    """Distributions available for the additive process noise."""

    GAUSSIAN = auto()
    UNIFORM = auto()
    ZERO = auto()


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box ``lower <= x <= upper``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape:
            raise ValueError(f"Box bounds differ in size: {lower.size} vs {upper.size}")
        if np.any(lower > upper):
            raise ValueError(f"Box lower bound {lower} exceeds upper bound {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def symmetric(cls, half_width: Union[float, Sequence[float]], dimension: int = 1):
        """Box centered at the origin."""
        half = np.broadcast_to(np.abs(np.asarray(half_width, dtype=float)), dimension)
        return cls(-half, half.copy())

    @property
    def dimension(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tolerance: float = 0) -> Union[bool, np.ndarray]:
        batch, single = as_batch(x)
        inside = np.all(
            (batch >= self.lower - tolerance) & (batch <= self.upper + tolerance),
            axis=1,
        )
        return bool(inside[0]) if single else inside

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def sample(self, rng: Seed = None, n: int = 1) -> np.ndarray:
        """Uniform samples, shape ``(n, dimension)``."""
        return as_generator(rng).uniform(self.lower, self.upper, (n, self.dimension))


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Zero-mean additive process noise."""

    kind: NoiseKind
    scale: np.ndarray
    """Standard deviation (Gaussian) or half-width (uniform) per dimension."""

    def __post_init__(self):
        if isinstance(self.kind, Text):
            object.__setattr__(self, "kind", NoiseKind[self.kind.upper()])
        scale = np.asarray(self.scale, dtype=float).reshape(-1)
        if np.any(scale < 0) or not np.all(np.isfinite(scale)):
            raise ValueError(f"Noise scale must be finite and non-negative: {scale}")
        object.__setattr__(self, "scale", scale)

    @classmethod
    def zero(cls, dimension: int) -> "NoiseModel":
        return cls(NoiseKind.ZERO, np.zeros(dimension))

    @classmethod
    def gaussian(cls, std: Union[float, Sequence[float]], dimension: int = 1):
        return cls(NoiseKind.GAUSSIAN, np.broadcast_to(std, dimension).astype(float))

    @property
    def dimension(self) -> int:
        return self.scale.size

    @property
    def variance(self) -> np.ndarray:
        if self.kind is NoiseKind.GAUSSIAN:
            return self.scale ** 2
        if self.kind is NoiseKind.UNIFORM:
            return self.scale ** 2 / 3
        return np.zeros_like(self.scale)

    def sample(self, rng: Seed = None, n: int = 1) -> np.ndarray:
        """Draws, shape ``(n, dimension)``."""
        if self.kind is NoiseKind.ZERO:
            return np.zeros((n, self.dimension))
        generator = as_generator(rng)
        if self.kind is NoiseKind.GAUSSIAN:
            return generator.normal(0, 1, (n, self.dimension)) * self.scale
        return generator.uniform(-1, 1, (n, self.dimension)) * self.scale


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States ``x_0..x_K`` and actions ``u_0..u_{K-1}``."""

    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        actions = np.asarray(self.actions, dtype=float)
        if actions.size == 0:
            actions = actions.reshape(0, actions.shape[-1] if actions.ndim == 2 else 0)
        actions = np.atleast_2d(actions) if actions.size else actions
        if len(states) != len(actions) + 1:
            raise ValueError(
                f"Expected {len(actions) + 1} states for {len(actions)} actions,"
                f" got {len(states)}"
            )
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    def __len__(self) -> int:
        """Number of transitions."""
        return len(self.actions)

    def to_dataframe(self):
        import pandas as pd

        data = {f"x_{i}": self.states[:, i] for i in range(self.states.shape[1])}
        for i in range(self.actions.shape[1] if self.actions.ndim == 2 else 0):
            data[f"u_{i}"] = np.append(self.actions[:, i], np.nan)
        result = pd.DataFrame(data)
        result.index.name = "k"
        return result


def check_gamma(gamma: float) -> float:
    if not 0 < gamma < 1:
        raise ValueError(f"Discount factor must lie in (0, 1), got {gamma}")
    return float(gamma)


def truncation_horizon(gamma: float, c_max: float, tolerance: float = 1e-6) -> int:
    """Smallest K with ``gamma**K * c_max / (1 - gamma) < tolerance``."""
    from math import ceil, log

    check_gamma(gamma)
    if c_max <= 0:
        return 0
    horizon = max(int(ceil(log(tolerance * (1 - gamma) / c_max) / log(gamma))), 0)
    while gamma ** horizon * c_max / (1 - gamma) >= tolerance:
        horizon += 1
    return horizon


def rollout(
    dynamics: Dynamics,
    policy: Policy,
    x0,
    horizon: int,
    rng: Seed = None,
) -> Trajectory:
    """Rolls out a policy through stochastic dynamics.

    Args:
        dynamics: batched step ``(states, actions, generator) -> next states``.
        policy: batched policy.
        x0: initial state.
        horizon: number of transitions.
        rng: source of randomness for the dynamics.

    Returns:
        The trajectory, with ``horizon + 1`` states.
    """
    if horizon < 0:
        raise ValueError(f"Horizon must be non-negative, got {horizon}")
    generator = as_generator(rng)
    state = as_vector(x0, "x0")
    states, actions = [state], []
    for step in range(horizon):
        action = np.asarray(policy(state[None, :]), dtype=float).reshape(-1)
        state = np.asarray(
            dynamics(state[None, :], action[None, :], generator), dtype=float
        ).reshape(-1)
        if not np.all(np.isfinite(state)):
            raise NonFiniteStateError(step + 1, state)
        states.append(state)
        actions.append(action)
    dim_u = len(actions[0]) if actions else 0
    return Trajectory(np.array(states), np.array(actions).reshape(horizon, dim_u))


def discounted_return(
    trajectory: Trajectory, reward: Callable, gamma: float
) -> float:
    """Sum of ``gamma**k * r(x_k, u_k)`` over the trajectory's transitions."""
    check_gamma(gamma)
    if len(trajectory) == 0:
        return 0.0
    rewards = np.asarray(
        reward(trajectory.states[:-1], trajectory.actions), dtype=float
    ).reshape(-1)
    return float(np.sum(gamma ** np.arange(len(rewards)) * rewards))


def discounted_cost(trajectory: Trajectory, cost: Callable, gamma: float) -> float:
    """Sum of ``gamma**k * c(x_k)`` over all the trajectory's states."""
    check_gamma(gamma)
    costs = np.asarray(cost(trajectory.states), dtype=float).reshape(-1)
    return float(np.sum(gamma ** np.arange(len(costs)) * costs))
