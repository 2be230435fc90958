from logging import getLogger
from pathlib import Path
from typing import Callable, Mapping, Optional, Text, Tuple

import numpy as np

from confsafe.autoconf import Registry
from confsafe.core import Box, Seed, as_batch, as_generator, check_gamma
from confsafe.values import GridSpec, GridValueFunction, NoiseQuadrature

__doc__ = Path(__file__).with_suffix(".rst").read_text()

logger = getLogger(__name__)

register_backup = Registry("backup")
"""Registry of methods learning a backup policy."""

TIE_TOLERANCE = 1e-12
"""Actions whose backed-up values differ by less than this are tied."""


def action_grid(box: Box, per_dimension: int = 17) -> np.ndarray:
    """Uniform grid of actions over a box, sorted by increasing Euclidean norm.

    Ties in norm keep the lexicographic order of the grid.
    """
    if per_dimension < 2:
        raise ValueError(f"Need at least 2 actions per dimension, got {per_dimension}")
    axes = [
        np.linspace(low, high, per_dimension) for low, high in zip(box.lower, box.upper)
    ]
    actions = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    actions = actions.reshape(-1, box.dimension)
    order = np.argsort(np.linalg.norm(actions, axis=1), kind="stable")
    return actions[order]


class TabularPolicy:
    """Action per grid node, applied at the nearest node."""

    def __init__(self, grid: GridSpec, actions, action_box: Box):
        actions = np.asarray(actions, dtype=float).reshape(grid.size, -1)
        if not np.all(action_box.contains(actions, tolerance=1e-12)):
            raise ValueError("Tabular policy actions must lie in the action box")
        self.grid = grid
        self.actions = actions
        self.action_box = action_box

    def __call__(self, states) -> np.ndarray:
        batch, single = as_batch(states)
        result = self.actions[self.grid.nearest(batch)]
        return result[0] if single else result

    def to_document(self) -> Mapping:
        return dict(
            type="tabular",
            grid=self.grid.to_document(),
            actions=self.actions,
            action_box=dict(lower=self.action_box.lower, upper=self.action_box.upper),
        )


class ParametricPolicy:
    """Linear function of fixed features, squashed into an output box by ``tanh``.

    Inputs are first scaled so that ``input_box`` maps to ``[-1, 1]``. With
    ``features="rbf"``, features are Gaussian bumps centred on a lattice with
    ``resolution`` points per input dimension, plus a constant. With
    ``features="affine"``, they are the scaled inputs and a constant.

    Called with states and actions, the policy acts on their concatenation. This is how
    hallucinating policies are represented.
    """

    FEATURES = ("rbf", "affine")

    def __init__(
        self,
        input_box: Box,
        output_box: Box,
        features: Text = "rbf",
        resolution: int = 3,
        parameters=None,
    ):
        if features not in self.FEATURES:
            raise ValueError(
                f"Unknown features {features}, expected one of {self.FEATURES}"
            )
        if features == "rbf" and resolution < 2:
            raise ValueError(
                f"RBF features need a resolution of at least 2, got {resolution}"
            )
        self.input_box = input_box
        self.output_box = output_box
        self.features = features
        self.resolution = int(resolution)
        if features == "rbf":
            axis = np.linspace(-1, 1, self.resolution)
            mesh = np.meshgrid(*([axis] * input_box.dimension), indexing="ij")
            self.centers = np.stack(mesh, axis=-1).reshape(-1, input_box.dimension)
            self.bandwidth = 2.0 / (self.resolution - 1)
        else:
            self.centers = np.zeros((0, input_box.dimension))
            self.bandwidth = 1.0
        if parameters is None:
            parameters = np.zeros(self.n_parameters)
        self.parameters = np.asarray(parameters, dtype=float).reshape(-1)
        if self.parameters.size != self.n_parameters:
            raise ValueError(
                f"Expected {self.n_parameters} parameters, got {self.parameters.size}"
            )
        self.adversarial_value: Optional[float] = None
        """Worst-case cost estimate found during training, if any."""

    @property
    def n_features(self) -> int:
        if self.features == "rbf":
            return len(self.centers) + 1
        return self.input_box.dimension + 1

    @property
    def n_parameters(self) -> int:
        return self.n_features * self.output_box.dimension

    def with_parameters(self, parameters) -> "ParametricPolicy":
        return ParametricPolicy(
            self.input_box, self.output_box, self.features, self.resolution, parameters
        )

    def feature_matrix(self, inputs: np.ndarray) -> np.ndarray:
        scaled = 2 * (inputs - self.input_box.center) / self.input_box.width
        ones = np.ones(scaled.shape[:-1] + (1,))
        if self.features == "affine":
            return np.concatenate((scaled, ones), axis=-1)
        distances = scaled[..., None, :] - self.centers
        bumps = np.exp(-0.5 * (distances ** 2).sum(axis=-1) / self.bandwidth ** 2)
        return np.concatenate((bumps, ones), axis=-1)

    def evaluate(self, parameters: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        """Outputs for a population of parameter vectors.

        Args:
            parameters: shape ``(population, n_parameters)``.
            inputs: shape ``(population, n, input dimension)``.

        Returns:
            Outputs of shape ``(population, n, output dimension)``.
        """
        weights = parameters.reshape(len(parameters), self.n_features, -1)
        linear = np.einsum("pnf,pfo->pno", self.feature_matrix(inputs), weights)
        half_width = self.output_box.width / 2
        return self.output_box.center + half_width * np.tanh(linear)

    def __call__(self, states, actions=None) -> np.ndarray:
        batch, single = as_batch(states)
        if actions is not None:
            controls, _ = as_batch(actions)
            if len(controls) == 1 and len(batch) > 1:
                controls = np.repeat(controls, len(batch), axis=0)
            batch = np.concatenate((batch, controls), axis=1)
        result = self.evaluate(self.parameters[None], batch[None])[0]
        return result[0] if single else result

    def to_document(self) -> Mapping:
        return dict(
            type="parametric",
            input_box=dict(lower=self.input_box.lower, upper=self.input_box.upper),
            output_box=dict(lower=self.output_box.lower, upper=self.output_box.upper),
            features=self.features,
            resolution=self.resolution,
            parameters=self.parameters,
            adversarial_value=self.adversarial_value,
        )


def policy_from_document(document: Mapping):
    """Recreates a policy saved with ``to_document``."""
    if document.get("type") == "tabular":
        box = Box(**document["action_box"])
        return TabularPolicy(GridSpec(**document["grid"]), document["actions"], box)
    if document.get("type") == "parametric":
        result = ParametricPolicy(
            Box(**document["input_box"]),
            Box(**document["output_box"]),
            document["features"],
            document["resolution"],
            document["parameters"],
        )
        result.adversarial_value = document.get("adversarial_value")
        return result
    raise ValueError(f"Unknown policy type {document.get('type')}")


def robust_value_iteration(
    model,
    cost: Callable,
    gamma: float,
    grid: GridSpec,
    action_candidates: Optional[np.ndarray] = None,
    eta_search: Text = "breakpoints",
    quadrature: Optional[NoiseQuadrature] = None,
    tolerance: float = 1e-8,
    max_iterations: int = 20000,
) -> Tuple[GridValueFunction, TabularPolicy]:
    """Backup policy minimizing the pessimistic cost-value on a grid.

    Iterates ``V(x) = c(x) + γ min_u max_η E_ω[V(μ + β diag(σ) η + ω)]`` over a finite
    set of actions. The greedy action at each node is the first of the candidates,
    sorted by norm, within :py:data:`TIE_TOLERANCE` of the minimum.

    Args:
        model: calibrated model set.
        cost: immediate cost.
        gamma: discount factor.
        grid: state grid, at most 3 dimensions.
        action_candidates: finite set of actions. Defaults to 17 per dimension of the
            model's action box.
        eta_search: see :py:func:`~confsafe.values.hallucination_candidates`.
        quadrature: expectation over the noise. Defaults to the model's noise.
        tolerance: accuracy of the fixed point.
        max_iterations: sweeps before raising
            :py:class:`~confsafe.values.ConvergenceError`.

    Returns:
        The pessimistic value of the backup policy and the policy itself.
    """
    from confsafe.values import (
        default_quadrature,
        hallucinated_operator,
        value_iteration,
    )

    check_gamma(gamma)
    if grid.dimension > 3:
        raise ValueError(
            f"Grid solvers handle at most 3 dimensions, got {grid.dimension}"
        )
    if action_candidates is None:
        actions = action_grid(model.action_box)
    else:
        actions = np.atleast_2d(np.asarray(action_candidates, dtype=float))
        actions = actions[np.argsort(np.linalg.norm(actions, axis=1), kind="stable")]
    if not np.all(model.action_box.contains(actions, tolerance=1e-12)):
        raise ValueError("Action candidates must lie in the action box")
    if quadrature is None:
        quadrature = default_quadrature(model, grid.dimension)

    nodes = grid.nodes()
    states = np.repeat(nodes, len(actions), axis=0)
    controls = np.tile(actions, (len(nodes), 1))
    operator, count, _ = hallucinated_operator(
        model, grid, states, controls, eta_search
    )
    smoothing = quadrature.smoothing_operator(grid)
    logger.info(
        "robust value iteration over %i nodes, %i actions, %i candidates",
        grid.size,
        len(actions),
        count,
    )
    values, residuals = value_iteration(
        grid.costs(cost),
        operator,
        (grid.size, len(actions), count),
        gamma,
        smoothing,
        tolerance,
        max_iterations,
    )
    backup = (operator @ (smoothing @ values)).reshape(grid.size, len(actions), count)
    worst = backup.max(axis=2)
    best = worst.min(axis=1, keepdims=True)
    choice = np.argmax(worst <= best + TIE_TOLERANCE, axis=1)
    greedy = actions[choice]
    value = GridValueFunction(grid, values, residuals, actions=greedy)
    return value, TabularPolicy(grid, greedy, model.action_box)


def _minimax_rollouts(
    model,
    cost: Callable,
    gamma: float,
    policy: ParametricPolicy,
    policy_parameters: np.ndarray,
    adversary: ParametricPolicy,
    adversary_parameters: np.ndarray,
    initial_states: np.ndarray,
    horizon: int,
    noise: np.ndarray,
) -> np.ndarray:
    """Discounted cost of every pair of policy and adversary parameters.

    One of the parameter arrays holds a population, the other a single vector.
    Returns one mean discounted cost per member of the population.
    """
    population = max(len(policy_parameters), len(adversary_parameters))
    policy_parameters = np.broadcast_to(
        policy_parameters, (population, policy_parameters.shape[1])
    )
    adversary_parameters = np.broadcast_to(
        adversary_parameters, (population, adversary_parameters.shape[1])
    )
    starts, dimension = initial_states.shape
    states = np.broadcast_to(initial_states, (population, starts, dimension)).copy()
    totals = np.zeros((population, starts))
    with np.errstate(all="ignore"):
        for step in range(horizon + 1):
            flat = states.reshape(-1, dimension)
            totals += gamma ** step * np.asarray(cost(flat), dtype=float).reshape(
                population, starts
            )
            if step == horizon:
                break
            actions = policy.evaluate(policy_parameters, states)
            etas = adversary.evaluate(
                adversary_parameters, np.concatenate((states, actions), axis=2)
            )
            mean, sigma = model.predict(flat, actions.reshape(population * starts, -1))
            plausible = mean + model.beta * sigma * etas.reshape(mean.shape)
            states = plausible.reshape(states.shape) + noise[step][None]
            diverged = ~np.all(np.isfinite(states), axis=(1, 2))
            if diverged.any():
                totals[diverged] = np.inf
                states[diverged] = initial_states
    return totals.mean(axis=1)


def cem_minimax_policy(
    model,
    cost: Callable,
    gamma: float,
    initial_states,
    state_box: Box,
    policy: Optional[ParametricPolicy] = None,
    adversary: Optional[ParametricPolicy] = None,
    iterations: int = 30,
    population: int = 64,
    elite_fraction: float = 0.125,
    policy_steps: int = 5,
    adversary_steps: int = 1,
    horizon: int = 100,
    initial_std: float = 1.0,
    std_floor: float = 1e-6,
    rng: Seed = None,
) -> ParametricPolicy:
    """Parametric backup policy from an alternating cross-entropy minimax search.

    Blocks of ``policy_steps`` iterations minimizing the discounted cost over the
    policy's parameters alternate with ``adversary_steps`` iterations maximizing it over
    the parameters of a hallucinating policy. Costs are averaged over roll-outs from
    ``initial_states`` through the plausible dynamics, and candidates of one iteration
    share their noise.

    Args:
        model: calibrated model set.
        cost: immediate cost.
        gamma: discount factor.
        initial_states: start states of the roll-outs, shape ``(n, d_x)``.
        state_box: box of states mapped to the policy's unit input range.
        policy: template of the policy. Defaults to RBF features with 3 points per
            state dimension.
        adversary: template of the hallucinating policy. Defaults to affine features of
            states and actions.
        iterations: total policy iterations.
        population: candidates per iteration, at least 16.
        elite_fraction: fraction of candidates defining the next distribution.
        policy_steps: policy iterations per block.
        adversary_steps: adversary iterations per block.
        horizon: roll-out length.
        initial_std: initial standard deviation of the parameter distributions.
        std_floor: smallest standard deviation of the parameter distributions.
        rng: source of randomness.

    Returns:
        The best policy found. Its ``adversarial_value`` attribute holds its cost
        against the final adversary.
    """
    from confsafe.optimizers import cross_entropy_search

    check_gamma(gamma)
    if population < 16:
        raise ValueError(f"Population must be at least 16, got {population}")
    if not 0 < elite_fraction <= 1:
        raise ValueError(f"Elite fraction must lie in (0, 1], got {elite_fraction}")
    generator = as_generator(rng)
    starts = np.atleast_2d(np.asarray(initial_states, dtype=float))
    if policy is None:
        policy = ParametricPolicy(state_box, model.action_box, "rbf", 3)
    if adversary is None:
        inputs = Box(
            np.concatenate((state_box.lower, model.action_box.lower)),
            np.concatenate((state_box.upper, model.action_box.upper)),
        )
        adversary = ParametricPolicy(
            inputs, Box.symmetric(1.0, model.state_dim), "affine"
        )
    elite_count = max(1, int(np.floor(elite_fraction * population)))

    policy_mean, policy_std = policy.parameters.copy(), initial_std
    adversary_mean, adversary_std = adversary.parameters.copy(), initial_std
    best_policy, best_adversary = policy_mean.copy(), adversary_mean.copy()

    def noise_draws():
        draws = model.noise.sample(generator, (horizon + 1) * len(starts))
        return draws.reshape(horizon + 1, len(starts), -1)

    def evaluate(policies, adversaries, noise):
        return _minimax_rollouts(
            model, cost, gamma, policy, policies, adversary, adversaries, starts,
            horizon, noise,
        )

    done = 0
    while done < iterations:
        steps = min(policy_steps, iterations - done)
        noise = noise_draws()
        result = cross_entropy_search(
            lambda candidates: evaluate(candidates, best_adversary[None], noise),
            policy_mean,
            policy_std,
            population=population,
            elite_count=elite_count,
            iterations=steps,
            rng=generator,
            std_floor=std_floor,
            initial=best_policy,
        )
        if not np.isfinite(result.score):
            raise RuntimeError("Every candidate backup policy diverged")
        best_policy, policy_mean, policy_std = result.best, result.mean, result.std
        done += steps
        noise = noise_draws()
        result = cross_entropy_search(
            lambda candidates: -evaluate(best_policy[None], candidates, noise),
            adversary_mean,
            adversary_std,
            population=population,
            elite_count=elite_count,
            iterations=adversary_steps,
            rng=generator,
            std_floor=std_floor,
            initial=best_adversary,
        )
        best_adversary, adversary_mean, adversary_std = (
            result.best,
            result.mean,
            result.std,
        )
        logger.debug(
            "minimax search after %i policy iterations: adversarial cost %g",
            done,
            -result.score,
        )

    trained = policy.with_parameters(best_policy)
    trained.adversarial_value = float(
        evaluate(best_policy[None], best_adversary[None], noise_draws())[0]
    )
    logger.info("minimax backup policy: adversarial cost %g", trained.adversarial_value)
    return trained


@register_backup(name="robust_value_iteration")
def robust_value_iteration_backup(
    model,
    objective,
    grid,
    quadrature,
    initial_state,
    rng,
    per_dimension: int = 17,
    eta_search: Text = "breakpoints",
    tolerance: float = 1e-8,
    max_iterations: int = 20000,
):
    """Tabular backup policy from robust value iteration on the grid.

    Args:
        per_dimension: number of candidate actions per action dimension.
        eta_search: inner maximisation over hallucinating inputs, breakpoints or vertex.
        tolerance: accuracy of the fixed point.
        max_iterations: largest number of value-iteration sweeps.
    """
    value, policy = robust_value_iteration(
        model,
        objective.cost,
        objective.gamma,
        grid,
        action_grid(model.action_box, per_dimension),
        eta_search,
        quadrature,
        tolerance,
        max_iterations,
    )
    return policy, value


@register_backup(name="cem_minimax")
def cem_minimax(
    model,
    objective,
    grid,
    quadrature,
    initial_state,
    rng,
    iterations: int = 30,
    population: int = 64,
    elite_fraction: float = 0.125,
    policy_steps: int = 5,
    adversary_steps: int = 1,
    horizon: int = 100,
    starts: int = 16,
    start_spread: float = 0.0,
    features: Text = "rbf",
    resolution: int = 3,
):
    """Parametric backup policy from an alternating cross-entropy minimax search.

    Args:
        iterations: total policy iterations.
        population: candidates per iteration.
        elite_fraction: fraction of candidates defining the next distribution.
        policy_steps: policy iterations between adversary updates.
        adversary_steps: adversary iterations per update.
        horizon: roll-out length.
        starts: number of roll-outs per candidate.
        start_spread: spread of the start states around the initial state, as a fraction
            of the grid's extent.
        features: policy features, rbf or affine.
        resolution: points per state dimension of the RBF lattice.
    """
    generator = as_generator(rng)
    box = grid.box
    offsets = generator.uniform(-0.5, 0.5, (starts, box.dimension)) * box.width
    initial_states = box.clip(np.asarray(initial_state) + start_spread * offsets)
    template = ParametricPolicy(box, model.action_box, features, resolution)
    policy = cem_minimax_policy(
        model,
        objective.cost,
        objective.gamma,
        initial_states,
        box,
        policy=template,
        iterations=iterations,
        population=population,
        elite_fraction=elite_fraction,
        policy_steps=policy_steps,
        adversary_steps=adversary_steps,
        horizon=horizon,
        rng=generator,
    )
    return policy, None
