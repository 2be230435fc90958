from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Text, Tuple, Union

import numpy as np

from confsafe.core import Box, NoiseKind, NoiseModel, Policy, as_batch, check_gamma

__doc__ = Path(__file__).with_suffix(".rst").read_text()

logger = getLogger(__name__)

ETA_SEARCHES = ("breakpoints", "vertex")
"""Strategies for the inner maximisation over hallucinating inputs."""

MAX_OPERATOR_ENTRIES = 50_000_000
"""Largest number of non-zero entries of a tabulated Bellman operator."""


class ConvergenceError(RuntimeError):
    """Value iteration did not reach the requested tolerance."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"Value iteration did not converge in {iterations} sweeps:"
            f" residual {residual:.3g}"
        )
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Uniform grid over a box, one ``(low, high, points)`` triplet per dimension.

    Nodes are ordered as in C: the last dimension varies fastest.
    """

    axes: Sequence[Tuple[float, float, int]]
    cap: int = 1_000_000
    """Largest number of nodes."""
    conservative_cost: bool = False
    """Whether node costs are the maximum over the node's neighbourhood."""

    def __post_init__(self):
        axes = []
        for axis in self.axes:
            low, high, points = axis
            if int(points) < 2:
                raise ValueError(f"Grid axes need at least 2 points, got {points}")
            if not float(low) < float(high):
                raise ValueError(f"Grid axis bounds must be increasing: {low}, {high}")
            axes.append((float(low), float(high), int(points)))
        if len(axes) == 0:
            raise ValueError("A grid needs at least one axis")
        object.__setattr__(self, "axes", tuple(axes))
        if self.size > self.cap:
            raise ValueError(
                f"Grid has {self.size} nodes, more than the cap {self.cap}"
            )

    @property
    def dimension(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(points for _, _, points in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def lower(self) -> np.ndarray:
        return np.array([low for low, _, _ in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([high for _, high, _ in self.axes])

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (np.array(self.shape) - 1)

    @property
    def box(self) -> Box:
        return Box(self.lower, self.upper)

    @property
    def coordinates(self) -> List[np.ndarray]:
        return [np.linspace(low, high, points) for low, high, points in self.axes]

    def nodes(self) -> np.ndarray:
        """All nodes, shape ``(size, dimension)``."""
        mesh = np.meshgrid(*self.coordinates, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dimension)

    def interpolation_weights(self, points) -> Tuple[np.ndarray, np.ndarray]:
        """Flat node indices and multilinear weights of the cell corners.

        Points outside the grid are clamped to its edges.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        counts = np.array(self.shape)
        scaled = (np.clip(points, self.lower, self.upper) - self.lower) / self.spacing
        base = np.clip(np.floor(scaled).astype(int), 0, counts - 2)
        fraction = np.clip(scaled - base, 0, 1)
        indices = np.arange(2 ** self.dimension)[:, None]
        bits = (indices >> np.arange(self.dimension)) & 1
        corners = base[:, None, :] + bits[None, :, :]
        upper = fraction[:, None, :]
        weights = np.where(bits[None] == 1, upper, 1 - upper)
        flat = np.ravel_multi_index(
            tuple(corners[..., k] for k in range(self.dimension)), self.shape
        )
        return flat, weights.prod(axis=2)

    def interpolation_matrix(self, points, row_weights=None, rows=None):
        """Sparse matrix mapping node values to interpolated values at the points.

        Args:
            points: query points, shape ``(n, dimension)``.
            row_weights: optional factor applied to each point's weights.
            rows: optional output row of each point. Entries sharing a row are summed.
        """
        from scipy.sparse import csr_matrix

        flat, weights = self.interpolation_weights(points)
        if row_weights is not None:
            weights = weights * np.asarray(row_weights)[:, None]
        count = len(flat)
        rows = np.arange(count) if rows is None else np.asarray(rows)
        nrows = int(rows.max()) + 1 if count else 0
        return csr_matrix(
            (weights.ravel(), (np.repeat(rows, flat.shape[1]), flat.ravel())),
            shape=(nrows, self.size),
        )

    def nearest(self, points) -> np.ndarray:
        """Flat index of the nearest node to each point."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        scaled = (np.clip(points, self.lower, self.upper) - self.lower) / self.spacing
        indices = np.clip(np.rint(scaled).astype(int), 0, np.array(self.shape) - 1)
        return np.ravel_multi_index(tuple(indices.T), self.shape)

    def costs(self, cost: Callable) -> np.ndarray:
        """Cost at each node, dilated over the neighbourhood if conservative."""
        nodes = self.nodes()
        if not self.conservative_cost:
            return np.asarray(cost(nodes), dtype=float).reshape(-1)
        offsets = np.stack(
            np.meshgrid(*[(-h, 0.0, h) for h in self.spacing], indexing="ij"), axis=-1
        ).reshape(-1, self.dimension)
        result = np.full(self.size, -np.inf)
        for offset in offsets:
            result = np.maximum(
                result, np.asarray(cost(nodes + offset), dtype=float).reshape(-1)
            )
        return result

    def to_document(self) -> Mapping:
        return dict(
            axes=[list(u) for u in self.axes],
            cap=self.cap,
            conservative_cost=self.conservative_cost,
        )


@dataclass(frozen=True, eq=False)
class NoiseQuadrature:
    """Weighted offsets approximating expectations over the process noise."""

    nodes: np.ndarray
    """Noise offsets, shape ``(count, dimension)``."""
    weights: np.ndarray
    """Non-negative weights summing to one."""

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(weights) != len(nodes):
            raise ValueError(
                f"Got {len(nodes)} quadrature nodes and {len(weights)} weights"
            )
        if np.any(weights < 0) or abs(weights.sum() - 1) > 1e-9:
            raise ValueError("Quadrature weights must be non-negative and sum to one")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights / weights.sum())

    @property
    def dimension(self) -> int:
        return self.nodes.shape[1]

    @property
    def is_trivial(self) -> bool:
        return len(self.weights) == 1 and not np.any(self.nodes)

    @classmethod
    def zero(cls, dimension: int) -> "NoiseQuadrature":
        return cls(np.zeros((1, dimension)), np.ones(1))

    @classmethod
    def from_points(cls, nodes, weights=None) -> "NoiseQuadrature":
        """Quadrature from explicit offsets, equally weighted by default."""
        nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
        if weights is None:
            weights = np.full(len(nodes), 1 / len(nodes))
        return cls(nodes, weights)

    @classmethod
    def from_noise(
        cls, noise: NoiseModel, order: int = 5, samples: int = 64, seed: int = 0
    ) -> "NoiseQuadrature":
        """Gauss-Hermite tensor rule for Gaussian noise, fixed samples otherwise.

        Dimensions with zero scale get a single node. Non-Gaussian noise uses a fixed
        set of samples shifted and rescaled to match its mean and variance exactly.
        """
        from numpy.polynomial.hermite_e import hermegauss

        if noise.kind is NoiseKind.ZERO or not np.any(noise.scale):
            return cls.zero(noise.dimension)
        if noise.kind is NoiseKind.GAUSSIAN:
            points, weights = hermegauss(order)
            weights = weights / np.sqrt(2 * np.pi)
            per_axis = [
                (points * s, weights) if s > 0 else (np.zeros(1), np.ones(1))
                for s in noise.scale
            ]
            mesh = np.meshgrid(*[p for p, _ in per_axis], indexing="ij")
            masses = np.meshgrid(*[w for _, w in per_axis], indexing="ij")
            nodes = np.stack(mesh, axis=-1).reshape(-1, noise.dimension)
            weights = np.prod(np.stack(masses, axis=-1), axis=-1).reshape(-1)
            return cls(nodes, weights / weights.sum())
        draws = noise.sample(np.random.default_rng(seed), samples)
        draws = draws - draws.mean(axis=0)
        spread = draws.std(axis=0)
        target = np.sqrt(noise.variance)
        scale = np.divide(target, spread, out=np.zeros_like(target), where=spread > 0)
        draws = draws * scale
        return cls(draws, np.full(samples, 1 / samples))

    def smoothing_operator(self, grid: GridSpec):
        """Sparse matrix mapping node values to their expectation over the noise."""
        from scipy.sparse import identity

        if self.is_trivial:
            return identity(grid.size, format="csr")
        nodes = grid.nodes()
        points = nodes[:, None, :] + self.nodes[None, :, :]
        points = points.reshape(-1, grid.dimension)
        return grid.interpolation_matrix(
            points,
            row_weights=np.tile(self.weights, grid.size),
            rows=np.repeat(np.arange(grid.size), len(self.weights)),
        )


class GridValueFunction:
    """Values tabulated on a grid, interpolated multilinearly in between.

    Queries outside the grid are clamped to its edges.
    """

    def __init__(
        self,
        grid: GridSpec,
        values,
        residuals: Optional[Sequence[float]] = None,
        actions: Optional[np.ndarray] = None,
    ):
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size != grid.size:
            raise ValueError(f"Expected {grid.size} values, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("Grid values must be finite")
        self.grid = grid
        self.values = values
        self.residuals: List[float] = list(residuals or [])
        """Sup-norm change of each value-iteration sweep."""
        self.actions = actions
        """Greedy action at each node, when computed by a minimizing solver."""
        self._smoothed: Dict[int, Tuple[NoiseQuadrature, "GridValueFunction"]] = {}

    def __call__(self, states) -> Union[float, np.ndarray]:
        batch, single = as_batch(states)
        flat, weights = self.grid.interpolation_weights(batch)
        result = (self.values[flat] * weights).sum(axis=1)
        return float(result[0]) if single else result

    @property
    def min(self) -> float:
        return float(self.values.min())

    @property
    def max(self) -> float:
        return float(self.values.max())

    def smoothed(self, quadrature: NoiseQuadrature) -> "GridValueFunction":
        """Node values replaced by their expectation over the noise."""
        if quadrature.is_trivial:
            return self
        key = id(quadrature)
        if key not in self._smoothed:
            operator = quadrature.smoothing_operator(self.grid)
            self._smoothed[key] = (
                quadrature,
                GridValueFunction(self.grid, operator @ self.values),
            )
        return self._smoothed[key][1]

    def to_dataframe(self):
        import pandas as pd

        nodes = self.grid.nodes()
        data = {f"x_{i}": nodes[:, i] for i in range(nodes.shape[1])}
        data["value"] = self.values
        return pd.DataFrame(data)

    def to_document(self) -> Mapping:
        result = dict(
            grid=self.grid.to_document(),
            values=self.values,
            sweeps=len(self.residuals),
            residual=float(self.residuals[-1]) if self.residuals else None,
        )
        if self.actions is not None:
            result["actions"] = self.actions
        return result

    @classmethod
    def from_document(cls, document: Mapping) -> "GridValueFunction":
        grid = GridSpec(**document["grid"])
        return cls(grid, document["values"], actions=document.get("actions"))


def _axis_candidates(
    mean: np.ndarray, spread: np.ndarray, coordinates: np.ndarray, mode: Text
) -> np.ndarray:
    """Hallucinating inputs worth evaluating along one axis, shape ``(n, count)``."""
    if mode == "vertex":
        return np.tile([-1.0, 0.0, 1.0], (len(mean), 1))
    low, high = mean - spread, mean + spread
    row = coordinates[None, :]
    inside = (row > low[:, None]) & (row < high[:, None])
    count = int(inside.sum(axis=1).max()) if inside.size else 0
    interior = np.sort(np.where(inside, coordinates[None, :], high[:, None]), axis=1)
    points = np.concatenate((low[:, None], interior[:, :count], high[:, None]), axis=1)
    result = np.divide(
        points - mean[:, None],
        spread[:, None],
        out=np.zeros_like(points),
        where=spread[:, None] > 0,
    )
    # ends of the plausible interval are exactly -1 and +1
    result[spread > 0, 0] = -1.0
    result[spread > 0, -1] = 1.0
    return result


def hallucination_candidates(
    mean: np.ndarray,
    spread: np.ndarray,
    grid: GridSpec,
    eta_search: Text = "breakpoints",
) -> np.ndarray:
    """Candidate hallucinating inputs for each row, shape ``(n, count, dimension)``.

    With ``"breakpoints"``, the candidates along each axis are the ends of the
    plausible interval and the grid coordinates strictly inside it. The maximum of a
    multilinear interpolant over the plausible box is attained at one of their
    combinations. With ``"vertex"``, the candidates are ``{-1, 0, 1}`` along each axis.
    """
    if eta_search not in ETA_SEARCHES:
        raise ValueError(
            f"Unknown eta search {eta_search}, expected one of {ETA_SEARCHES}"
        )
    per_axis = [
        _axis_candidates(mean[:, k], spread[:, k], coordinates, eta_search)
        for k, coordinates in enumerate(grid.coordinates)
    ]
    sizes = [u.shape[1] for u in per_axis]
    combinations = np.indices(sizes).reshape(len(sizes), -1)
    return np.stack(
        [axis[:, combinations[k]] for k, axis in enumerate(per_axis)], axis=-1
    )


def hallucinated_operator(
    model, grid: GridSpec, states: np.ndarray, actions: np.ndarray, eta_search: Text
):
    """Interpolation of every candidate plausible next state.

    Returns:
        A sparse matrix with ``len(states) * count`` rows, and ``count``, the number of
        candidates per state-action pair, and the candidates themselves.
    """
    mean, sigma = model.predict(states, actions)
    mean, sigma = np.atleast_2d(mean), np.atleast_2d(sigma)
    spread = model.beta * sigma
    etas = hallucination_candidates(mean, spread, grid, eta_search)
    count = etas.shape[1]
    entries = len(states) * count * 2 ** grid.dimension
    if entries > MAX_OPERATOR_ENTRIES:
        raise ValueError(
            f"Bellman operator would need {entries} entries. Use a coarser grid, fewer"
            " actions, or the vertex eta search."
        )
    points = mean[:, None, :] + spread[:, None, :] * etas
    operator = grid.interpolation_matrix(points.reshape(-1, grid.dimension))
    return operator, count, etas


def value_iteration(
    costs: np.ndarray,
    operator,
    shape: Tuple[int, int, int],
    gamma: float,
    smoothing=None,
    tolerance: float = 1e-8,
    max_iterations: int = 20000,
) -> Tuple[np.ndarray, List[float]]:
    """Iterates ``V <- c + γ min_a max_n (operator @ smoothing @ V)`` to a fixed point.

    Args:
        costs: cost at each node.
        operator: rows ordered by node, then action, then candidate.
        shape: number of nodes, actions and candidates.
        gamma: discount factor.
        smoothing: expectation over the noise, identity if ``None``.
        tolerance: stops once ``γ / (1 - γ)`` times the sup-norm change is below it,
            which bounds the distance to the fixed point.
        max_iterations: sweeps before raising :py:class:`ConvergenceError`.

    Returns:
        The values and the residual of each sweep.
    """
    check_gamma(gamma)
    nodes, actions, candidates = shape
    values = costs.copy()
    residuals: List[float] = []
    factor = gamma / (1 - gamma)
    for sweep in range(max_iterations):
        expected = values if smoothing is None else smoothing @ values
        backup = (operator @ expected).reshape(nodes, actions, candidates)
        updated = costs + gamma * backup.max(axis=2).min(axis=1)
        residual = float(np.abs(updated - values).max())
        residuals.append(residual)
        values = updated
        if sweep % 500 == 0:
            logger.debug("value iteration sweep %i: residual %.3g", sweep, residual)
        if factor * residual <= tolerance:
            logger.info(
                "value iteration converged in %i sweeps, residual %.3g",
                sweep + 1,
                residual,
            )
            return values, residuals
    raise ConvergenceError(residuals[-1], max_iterations)


def _policy_actions(policy: Optional[Policy], nodes: np.ndarray, action_dim: int):
    if policy is None:
        return np.zeros((len(nodes), action_dim))
    actions = np.asarray(policy(nodes), dtype=float)
    return actions.reshape(len(nodes), -1)


def default_quadrature(dynamics, dimension: int) -> NoiseQuadrature:
    noise = getattr(dynamics, "noise", None)
    if noise is None:
        return NoiseQuadrature.zero(dimension)
    return NoiseQuadrature.from_noise(noise)


def solve_value_grid(
    dynamics,
    policy: Optional[Policy],
    cost: Callable,
    gamma: float,
    grid: Optional[GridSpec] = None,
    quadrature: Optional[NoiseQuadrature] = None,
    tolerance: float = 1e-8,
    max_iterations: int = 20000,
) -> GridValueFunction:
    """Cost-value of a policy tabulated on a grid.

    Args:
        dynamics: an environment, a model set (whose mean is used), a deterministic
            transition ``(states, actions) -> next states``, or a
            :py:class:`~confsafe.envs.DiscreteChainMDP`, solved exactly on its states.
        policy: batched policy. ``None`` means zero actions.
        cost: immediate cost.
        gamma: discount factor.
        grid: grid of the state space. Defaults to the chain's states for chains.
        quadrature: expectation over the noise. Defaults to a rule for the noise of
            ``dynamics``.
        tolerance: accuracy of the fixed point in the sup-norm.
        max_iterations: sweeps before raising :py:class:`ConvergenceError`.
    """
    from confsafe.envs import DiscreteChainMDP, Environment
    from confsafe.models import CalibratedModelSet

    check_gamma(gamma)
    if isinstance(dynamics, DiscreteChainMDP):
        grid = dynamics.grid() if grid is None else grid
        operator = dynamics.transition_operator(policy)
        values, residuals = value_iteration(
            grid.costs(cost), operator, (grid.size, 1, 1), gamma, None, tolerance,
            max_iterations,
        )
        return GridValueFunction(grid, values, residuals)
    if grid is None:
        raise ValueError("A grid is required for continuous dynamics")
    if grid.dimension > 3:
        raise ValueError(
            f"Grid solvers handle at most 3 dimensions, got {grid.dimension}"
        )
    if isinstance(dynamics, Environment):
        transition = dynamics.transition
    elif isinstance(dynamics, CalibratedModelSet):
        transition = dynamics.mean
    else:
        transition = dynamics
    if quadrature is None:
        quadrature = default_quadrature(dynamics, grid.dimension)

    nodes = grid.nodes()
    action_dim = getattr(dynamics, "action_dim", 1)
    actions = _policy_actions(policy, nodes, action_dim)
    next_states = np.asarray(transition(nodes, actions), dtype=float)
    operator = grid.interpolation_matrix(next_states.reshape(len(nodes), -1))
    values, residuals = value_iteration(
        grid.costs(cost),
        operator,
        (grid.size, 1, 1),
        gamma,
        quadrature.smoothing_operator(grid),
        tolerance,
        max_iterations,
    )
    return GridValueFunction(grid, values, residuals)


def pessimistic_value_grid(
    model,
    policy: Optional[Policy],
    cost: Callable,
    gamma: float,
    grid: GridSpec,
    quadrature: Optional[NoiseQuadrature] = None,
    eta_search: Text = "breakpoints",
    tolerance: float = 1e-8,
    max_iterations: int = 20000,
) -> GridValueFunction:
    """Worst-case cost-value of a policy over every plausible dynamics.

    Each sweep evaluates ``V(x) = c(x) + γ max_η E_ω[V(μ + β diag(σ) η + ω)]`` with the
    inner maximum over the unit box found by :py:func:`hallucination_candidates`.
    """
    check_gamma(gamma)
    if grid.dimension > 3:
        raise ValueError(
            f"Grid solvers handle at most 3 dimensions, got {grid.dimension}"
        )
    if quadrature is None:
        quadrature = default_quadrature(model, grid.dimension)
    nodes = grid.nodes()
    actions = _policy_actions(policy, nodes, model.action_dim)
    operator, count, _ = hallucinated_operator(model, grid, nodes, actions, eta_search)
    values, residuals = value_iteration(
        grid.costs(cost),
        operator,
        (grid.size, 1, count),
        gamma,
        quadrature.smoothing_operator(grid),
        tolerance,
        max_iterations,
    )
    return GridValueFunction(grid, values, residuals)


def worst_case_expectation(
    model,
    value: GridValueFunction,
    states,
    actions,
    quadrature: NoiseQuadrature,
    eta_search: Text = "breakpoints",
    return_eta: bool = False,
):
    """Largest expected next value over the plausible dynamics.

    Args:
        model: calibrated model set.
        value: value function of the next state.
        states: batched states.
        actions: batched actions, or a single action for every state.
        quadrature: expectation over the noise.
        eta_search: candidate hallucinating inputs, see
            :py:func:`hallucination_candidates`.
        return_eta: also return the maximizing hallucinating inputs.
    """
    batch, single = as_batch(states)
    controls, _ = as_batch(actions)
    if len(controls) == 1 and len(batch) > 1:
        controls = np.repeat(controls, len(batch), axis=0)
    mean, sigma = model.predict(batch, controls)
    mean, sigma = np.atleast_2d(mean), np.atleast_2d(sigma)
    spread = model.beta * sigma
    etas = hallucination_candidates(mean, spread, value.grid, eta_search)
    points = mean[:, None, :] + spread[:, None, :] * etas
    expected = value.smoothed(quadrature)(points.reshape(-1, value.grid.dimension))
    expected = np.asarray(expected).reshape(len(batch), -1)
    best = expected.argmax(axis=1)
    result = expected[np.arange(len(batch)), best]
    if return_eta:
        eta = etas[np.arange(len(batch)), best]
        return (result[0], eta[0]) if single else (result, eta)
    return float(result[0]) if single else result


class GridEtaPolicy:
    """Hallucinating policy choosing the worst plausible next state for a value."""

    def __init__(
        self,
        model,
        value: GridValueFunction,
        quadrature: NoiseQuadrature,
        eta_search: Text = "breakpoints",
    ):
        self.model = model
        self.value = value
        self.quadrature = quadrature
        self.eta_search = eta_search

    def __call__(self, states, actions) -> np.ndarray:
        _, eta = worst_case_expectation(
            self.model,
            self.value,
            states,
            actions,
            self.quadrature,
            self.eta_search,
            return_eta=True,
        )
        return eta


def mc_pessimistic_value(
    model,
    policy: Policy,
    eta_policy: Callable,
    cost: Callable,
    gamma: float,
    x0,
    n: int,
    rng=None,
    horizon: Optional[int] = None,
) -> Tuple[float, float]:
    """Monte-Carlo cost-value under a fixed hallucinating policy.

    Any fixed hallucinating policy yields a lower estimate of the pessimistic value.

    Returns:
        The estimate and its standard error.
    """
    from confsafe.models import hallucinated_transition
    from confsafe.objectives import cumulative_cost_mc

    dynamics = hallucinated_transition(model, eta_policy)
    return cumulative_cost_mc(dynamics, policy, cost, gamma, x0, n, rng, horizon)


@dataclass
class DriftResult:
    """Outcome of a drift check on grid nodes."""

    holds: bool
    lambda_max: float
    """Largest linear drift rate. ``nan`` when no node constrains it."""
    worst_state: Optional[np.ndarray]
    """Node achieving the smallest rate, or violating the drift at the floor."""
    degenerate_count: int = 0
    """Checked nodes whose value equals the cost floor."""
    checked_count: int = 0


def check_drift(
    value: GridValueFunction,
    model,
    policy: Optional[Policy],
    c_min_bound: float,
    quadrature: Optional[NoiseQuadrature] = None,
    safe: Optional[Union[Callable, np.ndarray]] = None,
    eta_search: Text = "breakpoints",
    tolerance: float = 1e-9,
) -> DriftResult:
    """Checks ``max_η E[V(x')] <= V(x) - λ (V(x) - C_min)`` on grid nodes.

    Args:
        value: candidate value function.
        model: calibrated model set.
        policy: batched policy.
        c_min_bound: cost floor ``C_min``.
        quadrature: expectation over the noise. Defaults to the model's noise.
        safe: nodes to check, as a boolean mask over the nodes or a batched indicator.
            Defaults to every node.
        eta_search: see :py:func:`hallucination_candidates`.
        tolerance: nodes with ``V(x) - C_min`` below it are degenerate. The drift then
            only requires ``max_η E[V(x')] <= V(x) + tolerance``.
    """
    nodes = value.grid.nodes()
    if safe is None:
        mask = np.ones(len(nodes), dtype=bool)
    elif callable(safe):
        mask = np.asarray(safe(nodes), dtype=bool).reshape(-1)
    else:
        mask = np.asarray(safe, dtype=bool).reshape(-1)
    if not mask.any():
        raise ValueError("No grid node to check the drift condition on")
    if quadrature is None:
        quadrature = default_quadrature(model, value.grid.dimension)

    checked = nodes[mask]
    actions = _policy_actions(policy, checked, model.action_dim)
    worst = worst_case_expectation(
        model, value, checked, actions, quadrature, eta_search
    )
    current = value.values[mask]
    denominators = current - c_min_bound
    degenerate = denominators <= tolerance
    violated = degenerate & (worst > current + tolerance)
    if violated.any():
        index = int(np.flatnonzero(violated)[0])
        return DriftResult(
            False, -np.inf, checked[index], int(degenerate.sum()), int(mask.sum())
        )
    if degenerate.all():
        return DriftResult(True, np.nan, None, int(degenerate.sum()), int(mask.sum()))
    ratios = np.where(
        degenerate, np.inf, (current - worst) / np.where(degenerate, 1, denominators)
    )
    index = int(ratios.argmin())
    lambda_max = float(ratios[index])
    return DriftResult(
        lambda_max > 0,
        lambda_max,
        checked[index],
        int(degenerate.sum()),
        int(mask.sum()),
    )


@dataclass
class CertInput:
    """Quantities certified on a grid, as needed to build a certificate."""

    alpha_lambda: float
    """Linear drift rate, at most one."""
    xi: float
    xi_bar: float
    v_min: float
    """Lower bound on the value function."""
    v_max: float
    """Upper bound on the value function."""
    c_min_bound: float
    entry: Optional[np.ndarray] = None
    """Checked states satisfying ``max_η E[V(x')] <= ξ``."""
    worst_case: Optional[np.ndarray] = None
    """Worst-case expected next value at the checked states."""
    states: Optional[np.ndarray] = field(default=None, repr=False)


def certify_policy(
    value: GridValueFunction,
    model,
    policy: Optional[Policy],
    objective,
    drift: DriftResult,
    quadrature: Optional[NoiseQuadrature] = None,
    states=None,
    eta_search: Text = "breakpoints",
    xi: Optional[float] = None,
) -> CertInput:
    """Packages the inputs of a certificate after a successful drift check.

    Args:
        value: pessimistic value function of the policy.
        model: calibrated model set.
        policy: batched policy.
        objective: :py:class:`~confsafe.objectives.SafetyObjective` providing the
            thresholds and the cost floor.
        drift: result of :py:func:`check_drift`.
        quadrature: expectation over the noise.
        states: states at which the entry condition is checked. Defaults to the nodes.
        eta_search: see :py:func:`hallucination_candidates`.
        xi: overrides the objective's threshold.
    """
    xi = objective.xi if xi is None else float(xi)
    if not xi < objective.xi_bar:
        raise ValueError(f"xi ({xi}) must be smaller than xi_bar ({objective.xi_bar})")
    if not drift.holds:
        raise ValueError("Cannot certify a policy whose drift condition fails")
    if value.min < objective.c_min_bound - 1e-9:
        raise ValueError(
            f"Smallest value {value.min} is below the cost floor"
            f" {objective.c_min_bound}"
        )
    if quadrature is None:
        quadrature = default_quadrature(model, value.grid.dimension)
    states = value.grid.nodes() if states is None else np.atleast_2d(states)
    actions = _policy_actions(policy, states, model.action_dim)
    worst = np.atleast_1d(
        worst_case_expectation(model, value, states, actions, quadrature, eta_search)
    )
    alpha_lambda = 1.0 if np.isnan(drift.lambda_max) else min(drift.lambda_max, 1.0)
    return CertInput(
        alpha_lambda=alpha_lambda,
        xi=xi,
        xi_bar=objective.xi_bar,
        v_min=min(objective.c_min_bound, value.min),
        v_max=max(value.max, objective.xi_bar),
        c_min_bound=objective.c_min_bound,
        entry=worst <= xi,
        worst_case=worst,
        states=states,
    )
