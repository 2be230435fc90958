from collections import Counter
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Text, Tuple, Union
from warnings import warn

import numpy as np

from confsafe.autoconf import Registry
from confsafe.core import Box, NoiseKind, NoiseModel, Seed, as_batch, as_generator

__doc__ = Path(__file__).with_suffix(".rst").read_text()

register_environment = Registry("environment")
"""Registry of ground-truth environments."""

PITCH_A_CONTINUOUS = (-0.313, 56.7, 0.0, -0.0139, -0.426, 0.0, 0.0, 56.7, 0.0)
"""Continuous-time state matrix of the pitch benchmark, row-major."""
PITCH_B_CONTINUOUS = (0.232, 0.0203, 0.0)
"""Continuous-time input matrix of the pitch benchmark."""


class ClampingWarning(UserWarning):
    """States or actions outside the declared boxes were clamped."""


class Environment:
    """Ground-truth dynamics ``x' = f(x, u) + w`` with additive noise ``w``.

    Derived classes implement the deterministic part in :py:meth:`transition` and the
    safe set through :py:meth:`signed_distance`, which is positive exactly on unsafe
    states. All methods act on batches, rows being states or actions.
    """

    def __init__(self, state_box: Box, action_box: Box, noise: NoiseModel):
        if noise.dimension != state_box.dimension:
            raise ValueError(
                f"Noise dimension {noise.dimension} does not match state dimension"
                f" {state_box.dimension}"
            )
        self.state_box = state_box
        self.action_box = action_box
        self.noise = noise
        self.clamp_counts: Counter = Counter()
        """Number of clamped states and actions."""

    @property
    def state_dim(self) -> int:
        return self.state_box.dimension

    @property
    def action_dim(self) -> int:
        return self.action_box.dimension

    def transition(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Deterministic part of the dynamics, batched."""
        raise NotImplementedError()

    def signed_distance(self, states) -> np.ndarray:
        """Signed distance to the safe set boundary, positive on unsafe states."""
        raise NotImplementedError()

    def reward(self, states, actions) -> np.ndarray:
        batch, _ = as_batch(states)
        return np.zeros(len(batch))

    def initial_state(self, rng: Seed = None) -> np.ndarray:
        raise NotImplementedError()

    def grid_axes(self) -> List[Tuple[float, float, int]]:
        """Default value grid, ``(low, high, count)`` per state dimension."""
        box = self.state_box
        return [
            (float(low), float(high), 17) for low, high in zip(box.lower, box.upper)
        ]

    def safe_indicator(self, states) -> Union[bool, np.ndarray]:
        """``True`` on safe states."""
        batch, single = as_batch(states)
        safe = np.asarray(self.signed_distance(batch)) <= 0
        return bool(safe[0]) if single else safe

    def _clamp(self, batch: np.ndarray, box: Box, kind: Text) -> np.ndarray:
        outside = ~box.contains(batch)
        if outside.any():
            self.clamp_counts[kind] += int(outside.sum())
            warn(
                f"Clamped {outside.sum()} {kind}(s) to the declared box",
                ClampingWarning,
            )
            batch = box.clip(batch)
        return batch

    def step(self, states, actions, rng: Seed = None) -> np.ndarray:
        """Deterministic transition plus one noise draw per row.

        Out-of-box inputs are clamped, counted in :py:attr:`clamp_counts`, and reported
        with a :py:class:`ClampingWarning`.
        """
        batch, single = as_batch(states)
        controls, _ = as_batch(actions)
        if not (np.all(np.isfinite(batch)) and np.all(np.isfinite(controls))):
            raise ValueError("Environment step received non-finite states or actions")
        if len(controls) == 1 and len(batch) > 1:
            controls = np.repeat(controls, len(batch), axis=0)
        batch = self._clamp(batch, self.state_box, "state")
        controls = self._clamp(controls, self.action_box, "action")
        result = self.transition(batch, controls) + self.noise.sample(rng, len(batch))
        return result[0] if single else result

    def __call__(self, states, actions, rng: Seed = None) -> np.ndarray:
        return self.step(states, actions, rng)


class PitchControlEnv(Environment):
    """Linearized aircraft pitch dynamics, discretized with forward Euler.

    The state is the attack angle, the pitch rate and the pitch angle. The action is the
    elevator deflection. States with a positive pitch angle are unsafe.
    """

    def __init__(
        self,
        dt: float = 0.02,
        noise_std: float = 1e-3,
        action_bound: float = 1.4,
        reward_u_sign: float = -1.0,
        initial_jitter: float = 0.0,
        a_continuous: Sequence[float] = PITCH_A_CONTINUOUS,
        b_continuous: Sequence[float] = PITCH_B_CONTINUOUS,
        state_bounds: Sequence[float] = (5.0, 1.0, np.pi),
    ):
        if dt <= 0:
            raise ValueError(f"Time step must be positive, got {dt}")
        self.dt = dt
        self.a_continuous = np.asarray(a_continuous, dtype=float).reshape(3, 3)
        self.b_continuous = np.asarray(b_continuous, dtype=float).reshape(3)
        self.A = np.eye(3) + dt * self.a_continuous
        self.B = dt * self.b_continuous
        radius = np.abs(np.linalg.eigvals(self.A)).max()
        if radius > 1 + 10 * dt:
            raise ValueError(f"Discretized pitch dynamics unstable: radius {radius}")
        self.reward_u_sign = reward_u_sign
        self.initial_jitter = initial_jitter
        noise = (
            NoiseModel.gaussian(noise_std, 3) if noise_std > 0 else NoiseModel.zero(3)
        )
        super().__init__(
            Box.symmetric(state_bounds, 3), Box.symmetric(action_bound, 1), noise
        )

    def transition(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return states @ self.A.T + actions[:, :1] * self.B

    def signed_distance(self, states) -> np.ndarray:
        batch, _ = as_batch(states)
        return batch[:, 2]

    def reward(self, states, actions) -> np.ndarray:
        batch, _ = as_batch(states)
        controls, _ = as_batch(actions)
        return -2 * batch[:, 2] ** 2 + self.reward_u_sign * 0.02 * controls[:, 0] ** 2

    def initial_state(self, rng: Seed = None) -> np.ndarray:
        result = np.array([0.0, 0.0, -0.2])
        if self.initial_jitter > 0:
            result += as_generator(rng).normal(0, self.initial_jitter, 3)
        return result

    def grid_axes(self) -> List[Tuple[float, float, int]]:
        return [(-2.5, 2.5, 9), (-0.015, 0.015, 9), (-0.6, 0.2, 17)]


class DoubleIntegratorEnv(Environment):
    """Position and velocity driven by a bounded acceleration.

    States with ``|position| > position_limit`` are unsafe.
    """

    def __init__(
        self,
        dt: float = 0.1,
        noise_std: float = 0.005,
        action_bound: float = 1.0,
        position_limit: float = 1.0,
        state_bounds: Sequence[float] = (3.0, 3.0),
    ):
        if dt <= 0:
            raise ValueError(f"Time step must be positive, got {dt}")
        self.dt = dt
        self.position_limit = position_limit
        noise = (
            NoiseModel.gaussian(noise_std, 2) if noise_std > 0 else NoiseModel.zero(2)
        )
        super().__init__(
            Box.symmetric(state_bounds, 2), Box.symmetric(action_bound, 1), noise
        )

    def transition(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        position, velocity, u = states[:, 0], states[:, 1], actions[:, 0]
        return np.stack(
            (
                position + self.dt * velocity + 0.5 * self.dt ** 2 * u,
                velocity + self.dt * u,
            ),
            axis=1,
        )

    def signed_distance(self, states) -> np.ndarray:
        batch, _ = as_batch(states)
        return np.abs(batch[:, 0]) - self.position_limit

    def reward(self, states, actions) -> np.ndarray:
        batch, _ = as_batch(states)
        return -(batch[:, 0] ** 2)

    def initial_state(self, rng: Seed = None) -> np.ndarray:
        return np.array([-1.0, 0.0])

    def grid_axes(self) -> List[Tuple[float, float, int]]:
        limit = 1.5 * self.position_limit
        return [(-limit, limit, 31), (-2.0, 2.0, 31)]


class DiscreteChainMDP:
    """Finite Markov decision process with an unsafe set of states.

    States and actions are integer indices stored as 1-d float vectors, so that chains
    can be rolled out and solved with the same functions as continuous environments.
    ``transitions[u, s, t]`` is the probability of moving from ``s`` to ``t`` under
    action ``u``.
    """

    def __init__(self, transitions, unsafe: Iterable[int] = ()):
        transitions = np.array(transitions, dtype=float)
        if transitions.ndim == 2:
            transitions = transitions[None]
        if transitions.ndim != 3 or transitions.shape[1] != transitions.shape[2]:
            raise ValueError(
                f"Transitions must have shape (actions, states, states), got"
                f" {transitions.shape}"
            )
        if np.any(transitions < 0):
            raise ValueError("Transition probabilities must be non-negative")
        deviation = np.abs(transitions.sum(axis=2) - 1).max()
        if deviation > 1e-12:
            raise ValueError(f"Transition rows must sum to one, off by {deviation}")
        transitions.setflags(write=False)
        self.transitions = transitions
        self.unsafe = frozenset(int(u) for u in unsafe)
        if any(not 0 <= u < self.n_states for u in self.unsafe):
            raise ValueError(f"Unsafe states {sorted(self.unsafe)} out of range")
        self.state_box = Box([0], [self.n_states - 1])
        self.action_box = Box([0], [self.n_actions - 1])
        self.noise = NoiseModel(NoiseKind.ZERO, np.zeros(1))

    @classmethod
    def random(
        cls,
        n_states: int,
        n_actions: int = 1,
        rng: Seed = None,
        unsafe: Iterable[int] = (),
        concentration: float = 1.0,
    ) -> "DiscreteChainMDP":
        """Chain with Dirichlet-distributed transition rows."""
        generator = as_generator(rng)
        transitions = generator.dirichlet(
            np.full(n_states, concentration), (n_actions, n_states)
        )
        transitions /= transitions.sum(axis=2, keepdims=True)
        return cls(transitions, unsafe)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[0]

    @property
    def state_dim(self) -> int:
        return 1

    @property
    def action_dim(self) -> int:
        return 1

    def with_transitions(self, transitions) -> "DiscreteChainMDP":
        """Validated copy with new transition probabilities."""
        return DiscreteChainMDP(transitions, self.unsafe)

    def _indices(self, values, upper: int) -> np.ndarray:
        batch, _ = as_batch(values)
        if not np.all(np.isfinite(batch)):
            raise ValueError("Chain received non-finite states or actions")
        return np.clip(np.rint(batch[:, 0]).astype(int), 0, upper - 1)

    def signed_distance(self, states) -> np.ndarray:
        indices = self._indices(states, self.n_states)
        return np.where(np.isin(indices, list(self.unsafe)), 0.5, -0.5)

    def safe_indicator(self, states) -> Union[bool, np.ndarray]:
        batch, single = as_batch(states)
        safe = self.signed_distance(batch) <= 0
        return bool(safe[0]) if single else safe

    def reward(self, states, actions) -> np.ndarray:
        return np.zeros(len(as_batch(states)[0]))

    def initial_state(self, rng: Seed = None) -> np.ndarray:
        return np.zeros(1)

    def step(self, states, actions, rng: Seed = None) -> np.ndarray:
        """Samples next states, one per row."""
        single = as_batch(states)[1]
        indices = self._indices(states, self.n_states)
        controls = self._indices(actions, self.n_actions)
        if len(controls) == 1 and len(indices) > 1:
            controls = np.repeat(controls, len(indices))
        cumulative = self.transitions[controls, indices].cumsum(axis=1)
        draws = as_generator(rng).random((len(indices), 1))
        result = np.minimum((draws >= cumulative).sum(axis=1), self.n_states - 1)
        result = result.astype(float)[:, None]
        return result[0] if single else result

    def __call__(self, states, actions, rng: Seed = None) -> np.ndarray:
        return self.step(states, actions, rng)

    def policy_actions(
        self, policy: Union[Callable, Sequence[int], None]
    ) -> np.ndarray:
        """Action index chosen in each state."""
        if policy is None:
            return np.zeros(self.n_states, dtype=int)
        if callable(policy):
            states = np.arange(self.n_states, dtype=float)[:, None]
            policy = np.asarray(policy(states)).reshape(self.n_states, -1)[:, 0]
        actions = np.rint(np.asarray(policy, dtype=float)).astype(int)
        return np.clip(actions, 0, self.n_actions - 1)

    def transition_operator(self, policy: Union[Callable, Sequence[int], None] = None):
        """Sparse row-stochastic matrix of the chain under a fixed policy."""
        from scipy.sparse import csr_matrix

        actions = self.policy_actions(policy)
        return csr_matrix(self.transitions[actions, np.arange(self.n_states)])

    def policy_value(
        self,
        cost: Callable,
        gamma: float,
        policy: Union[Callable, Sequence[int], None] = None,
    ) -> np.ndarray:
        """Exact discounted cumulative cost from each state, ``(I - γP)⁻¹ c``."""
        from scipy.sparse import identity
        from scipy.sparse.linalg import spsolve

        from confsafe.core import check_gamma

        check_gamma(gamma)
        states = np.arange(self.n_states, dtype=float)[:, None]
        costs = np.asarray(cost(states), dtype=float).reshape(-1)
        operator = identity(self.n_states, format="csc") - gamma * (
            self.transition_operator(policy).tocsc()
        )
        return np.asarray(spsolve(operator, costs)).reshape(-1)

    def grid(self):
        """Integer grid on which the chain's values are tabulated."""
        from confsafe.values import GridSpec

        return GridSpec(
            [(0, self.n_states - 1, self.n_states)], conservative_cost=False
        )


@register_environment(name="pitch", is_factory=True)
def pitch(
    dt: float = 0.02,
    noise_std: float = 1e-3,
    action_bound: float = 1.4,
    reward_u_sign: float = -1.0,
    initial_jitter: float = 0.0,
    a_continuous: List[float] = list(PITCH_A_CONTINUOUS),
    b_continuous: List[float] = list(PITCH_B_CONTINUOUS),
) -> PitchControlEnv:
    """Aircraft pitch control.

    Args:
        dt: discretization time step in seconds.
        noise_std: standard deviation of the Gaussian process noise on each state.
        action_bound: elevator deflections are limited to ``[-action_bound,
            action_bound]`` radians.
        reward_u_sign: sign of the control term in the reward. The default penalizes
            large deflections. ``+1`` reproduces the rewarding variant.
        initial_jitter: standard deviation of the Gaussian jitter around the initial
            state ``(0, 0, -0.2)``.
        a_continuous: continuous-time state matrix, row-major.
        b_continuous: continuous-time input matrix.
    """
    return PitchControlEnv(
        dt=dt,
        noise_std=noise_std,
        action_bound=action_bound,
        reward_u_sign=reward_u_sign,
        initial_jitter=initial_jitter,
        a_continuous=a_continuous,
        b_continuous=b_continuous,
    )


@register_environment(name="double_integrator", is_factory=True)
def double_integrator(
    dt: float = 0.1,
    noise_std: float = 0.005,
    action_bound: float = 1.0,
    position_limit: float = 1.0,
) -> DoubleIntegratorEnv:
    """Double integrator with a bounded position.

    Args:
        dt: discretization time step.
        noise_std: standard deviation of the Gaussian process noise.
        action_bound: accelerations are limited to ``[-action_bound, action_bound]``.
        position_limit: positions beyond this magnitude are unsafe.
    """
    return DoubleIntegratorEnv(
        dt=dt,
        noise_std=noise_std,
        action_bound=action_bound,
        position_limit=position_limit,
    )


def as_environment(settings: Optional[Union[Environment, Text, dict]]) -> Environment:
    """Environment from an instance, a registry name or registry settings."""
    if isinstance(settings, (Environment, DiscreteChainMDP)):
        return settings
    return register_environment.factory(settings or "pitch")
