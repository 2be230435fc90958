from dataclasses import dataclass, replace
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Text, Tuple

import numpy as np
import pandas as pd

from confsafe.core import (
    Policy,
    RandomSource,
    Seed,
    Trajectory,
    as_generator,
    as_vector,
)
from confsafe.values import ETA_SEARCHES, GridValueFunction, NoiseQuadrature

__doc__ = Path(__file__).with_suffix(".rst").read_text()

logger = getLogger(__name__)

INFEASIBLE_PENALTY = 1e6
"""Score offset ranking every infeasible action below every feasible one."""

BRANCHES = ("nominal", "filtered", "fallback", "backup", "unfiltered")


@dataclass(frozen=True)
class FilterConfig:
    """Parameters of the safety filter."""

    xi: Optional[float] = None
    """Threshold on the worst-case expected next value. Defaults to the objective's."""
    enabled: bool = True
    """If false, nominal actions are applied unchanged."""
    cem_particles: int = 1000
    cem_iterations: int = 5
    cem_elite_fraction: float = 0.1
    inner_eta_mode: Text = "breakpoints"
    """Maximisation over hallucinating inputs, ``breakpoints`` or ``vertex``."""
    std_fraction: float = 0.25
    """Initial standard deviation of the action search, relative to the action range."""
    std_floor: float = 1e-6

    def __post_init__(self):
        if self.inner_eta_mode not in ETA_SEARCHES:
            raise ValueError(
                f"Unknown inner_eta_mode {self.inner_eta_mode}, expected one of"
                f" {ETA_SEARCHES}"
            )
        if self.cem_iterations < 1:
            raise ValueError(
                f"cem_iterations must be positive, got {self.cem_iterations}"
            )
        if not 0 < self.cem_elite_fraction <= 1:
            raise ValueError(
                f"cem_elite_fraction must lie in (0, 1], got {self.cem_elite_fraction}"
            )
        if self.cem_particles < 10 * self.elite_count:
            raise ValueError(
                f"cem_particles ({self.cem_particles}) must be at least 10 times the"
                f" elite count ({self.elite_count})"
            )

    @property
    def elite_count(self) -> int:
        return max(1, int(np.floor(self.cem_elite_fraction * self.cem_particles)))

    def resolve(self, objective) -> "FilterConfig":
        """Copy with the threshold set, checked against the objective's ``xi_bar``."""
        xi = objective.xi if self.xi is None else float(self.xi)
        if not xi < objective.xi_bar:
            raise ValueError(
                f"Filter xi ({xi}) must be smaller than xi_bar ({objective.xi_bar})"
            )
        return replace(self, xi=xi)


@dataclass
class FilterDiagnostics:
    """Outcome of one call to :py:func:`filter_action`."""

    worst_case: float
    """Worst-case expected next value of the returned action."""
    nominal_worst_case: float
    distance: float
    """Distance between the returned and the nominal action."""
    binding: bool
    """Whether the nominal action violated the constraint."""
    feasible: bool


class InfeasibleActionError(RuntimeError):
    """No sampled action satisfies the filter's constraint."""

    def __init__(self, diagnostics: FilterDiagnostics):
        super().__init__(
            f"No feasible action found: smallest worst-case value"
            f" {diagnostics.worst_case:.6g}"
        )
        self.diagnostics = diagnostics


def _threshold(config: FilterConfig) -> float:
    if config.xi is None:
        raise ValueError("The filter threshold is not set, see FilterConfig.resolve")
    return float(config.xi)


def filter_action(
    x,
    u_nominal,
    model,
    value: GridValueFunction,
    config: FilterConfig,
    quadrature: NoiseQuadrature,
    rng: Seed = None,
) -> Tuple[np.ndarray, FilterDiagnostics]:
    """Closest action to the nominal one keeping the worst-case next value below ξ.

    The nominal action is checked first and returned unchanged when it satisfies the
    constraint. Otherwise, a cross-entropy search starting at the nominal action
    minimizes the distance to it, ranking infeasible actions last by their violation.

    Args:
        x: current state.
        u_nominal: nominal action.
        model: calibrated model set.
        value: pessimistic value of the backup policy.
        config: filter parameters, with the threshold set.
        quadrature: expectation over the noise.
        rng: source of randomness of the action search.

    Raises:
        InfeasibleActionError: if no sampled action satisfies the constraint.
    """
    from confsafe.optimizers import cross_entropy_search
    from confsafe.values import worst_case_expectation

    xi = _threshold(config)
    state = as_vector(x, "x")
    nominal = as_vector(u_nominal, "u_nominal")
    box = model.action_box

    def worst_case(actions: np.ndarray) -> np.ndarray:
        states = np.repeat(state[None], len(actions), axis=0)
        return np.atleast_1d(
            worst_case_expectation(
                model, value, states, actions, quadrature, config.inner_eta_mode
            )
        )

    nominal_worst = float(worst_case(nominal[None])[0])
    if nominal_worst <= xi and box.contains(nominal):
        diagnostics = FilterDiagnostics(nominal_worst, nominal_worst, 0.0, False, True)
        return nominal, diagnostics

    def score(actions: np.ndarray) -> np.ndarray:
        worst = worst_case(actions)
        distance = np.linalg.norm(actions - nominal, axis=1)
        return np.where(worst <= xi, distance, INFEASIBLE_PENALTY + worst - xi)

    start = box.clip(nominal)
    result = cross_entropy_search(
        score,
        start,
        config.std_fraction * box.width,
        lower=box.lower,
        upper=box.upper,
        population=config.cem_particles,
        elite_count=config.elite_count,
        iterations=config.cem_iterations,
        rng=rng,
        std_floor=config.std_floor,
        initial=start,
    )
    action = result.best
    worst = float(worst_case(action[None])[0])
    diagnostics = FilterDiagnostics(
        worst,
        nominal_worst,
        float(np.linalg.norm(action - nominal)),
        True,
        worst <= xi,
    )
    if not diagnostics.feasible:
        raise InfeasibleActionError(diagnostics)
    return action, diagnostics


def combined_step(
    x,
    u_nominal,
    backup_policy: Policy,
    value: GridValueFunction,
    model,
    config: FilterConfig,
    quadrature: NoiseQuadrature,
    rng: Seed = None,
) -> Tuple[np.ndarray, Dict[Text, Any]]:
    """Action of the filtered policy and the diagnostics of the step.

    States whose value exceeds ξ get the backup action. Otherwise, the nominal action is
    filtered, falling back to the backup action when no feasible action is found.

    Returns:
        The action and a dictionary with the ``branch`` taken, the ``value`` of the
        state, the ``worst_case`` expected next value of the action, its ``distance``
        to the nominal action, and for fallbacks whether the backup action satisfied
        the constraint (``backup_feasible``).
    """
    from confsafe.values import worst_case_expectation

    state = as_vector(x, "x")
    nominal = as_vector(u_nominal, "u_nominal")
    current = float(value(state))
    diagnostics: Dict[Text, Any] = dict(value=current, backup_feasible=None)

    def backup_action():
        action = np.asarray(backup_policy(state[None]), dtype=float).reshape(-1)
        worst = float(
            worst_case_expectation(
                model, value, state, action, quadrature, config.inner_eta_mode
            )
        )
        return action, worst

    if not config.enabled:
        action = nominal
        worst = float(
            worst_case_expectation(
                model, value, state, action, quadrature, config.inner_eta_mode
            )
        )
        branch = "unfiltered"
    elif current > _threshold(config):
        action, worst = backup_action()
        branch = "backup"
    else:
        try:
            action, details = filter_action(
                state, nominal, model, value, config, quadrature, rng
            )
            worst = details.worst_case
            branch = "filtered" if details.binding else "nominal"
        except InfeasibleActionError as error:
            action, worst = backup_action()
            branch = "fallback"
            diagnostics["backup_feasible"] = worst <= _threshold(config)
            logger.debug(
                "filter fell back to the backup policy: %s, backup worst case %g",
                error,
                worst,
            )
    diagnostics.update(
        branch=branch,
        worst_case=worst,
        distance=float(np.linalg.norm(action - nominal)),
    )
    return action, diagnostics


def combined_policy(
    x,
    nominal_policy: Policy,
    backup_policy: Policy,
    value: GridValueFunction,
    model,
    config: FilterConfig,
    quadrature: NoiseQuadrature,
    rng: Seed = None,
) -> np.ndarray:
    """Action of the filtered policy at a state."""
    state = as_vector(x, "x")
    nominal = np.asarray(nominal_policy(state[None]), dtype=float).reshape(-1)
    action, _ = combined_step(
        state, nominal, backup_policy, value, model, config, quadrature, rng
    )
    return action


def rollout_filtered(
    env,
    nominal_policy: Policy,
    backup_policy: Policy,
    value: GridValueFunction,
    model,
    config: FilterConfig,
    horizon: int,
    rng: Seed = None,
    quadrature: Optional[NoiseQuadrature] = None,
    cost: Optional[Callable] = None,
    x0=None,
) -> Tuple[Trajectory, Dict[Text, Any], pd.DataFrame]:
    """Episode on the true environment under the filtered policy.

    Args:
        env: environment providing the true dynamics, rewards and safe set.
        nominal_policy: reward-seeking policy.
        backup_policy: safe backup policy.
        value: pessimistic value of the backup policy.
        model: calibrated model set.
        config: filter parameters, with the threshold set. With ``enabled=False``,
            nominal actions are applied unchanged but diagnostics are still recorded.
        horizon: number of steps.
        rng: source of randomness. A :py:class:`~confsafe.core.RandomSource` yields
            separate streams for the environment and the filter.
        quadrature: expectation over the noise. Defaults to the model's noise.
        cost: immediate cost accumulated in the metrics. Defaults to the indicator of
            unsafe states.
        x0: initial state. Defaults to the environment's.

    Returns:
        The trajectory, the episode's metrics, and one row of diagnostics per step.
    """
    from confsafe.core import NonFiniteStateError
    from confsafe.values import default_quadrature

    if horizon < 0:
        raise ValueError(f"Horizon must be non-negative, got {horizon}")
    if isinstance(rng, RandomSource):
        env_rng, filter_rng = rng.child(0).generator(), rng.child(1).generator()
    else:
        env_rng = filter_rng = as_generator(rng)
    if quadrature is None:
        quadrature = default_quadrature(model, value.grid.dimension)
    if cost is None:

        def cost(states):
            return 1.0 - np.asarray(env.safe_indicator(states), dtype=float)

    state = env.initial_state() if x0 is None else as_vector(x0, "x0")
    states, actions, rows, rewards = [state], [], [], []
    for step in range(horizon):
        nominal = np.asarray(nominal_policy(state[None]), dtype=float).reshape(-1)
        action, diagnostics = combined_step(
            state, nominal, backup_policy, value, model, config, quadrature, filter_rng
        )
        row: Dict[Text, Any] = dict(k=step)
        row.update({f"x_{i}": u for i, u in enumerate(state)})
        row.update({f"u_nominal_{i}": u for i, u in enumerate(nominal)})
        row.update({f"u_{i}": u for i, u in enumerate(action)})
        row.update(diagnostics)
        rows.append(row)
        reward = np.asarray(env.reward(state[None], action[None])).ravel()[0]
        rewards.append(float(reward))
        state = np.asarray(env.step(state[None], action[None], env_rng)).reshape(-1)
        if not np.all(np.isfinite(state)):
            raise NonFiniteStateError(step + 1, state)
        states.append(state)
        actions.append(action)

    trajectory = Trajectory(
        np.array(states), np.array(actions).reshape(horizon, env.action_dim)
    )
    steps = pd.DataFrame(rows, columns=_step_columns(env))
    safe = np.asarray(env.safe_indicator(trajectory.states), dtype=bool).reshape(-1)
    distances = steps["distance"].to_numpy() if horizon else np.zeros(0)
    branches = steps["branch"].to_numpy() if horizon else np.zeros(0, dtype=object)
    metrics = dict(
        filtered=bool(config.enabled),
        **{"return": float(np.sum(rewards))},
        cost=float(np.sum(np.asarray(cost(trajectory.states), dtype=float))),
        violations=int((~safe).sum()),
        interventions=int((distances > 0).sum()),
        fallbacks=int((branches == "fallback").sum()),
        backups=int((branches == "backup").sum()),
        mean_distance=float(distances.mean()) if horizon else 0.0,
        max_distance=float(distances.max()) if horizon else 0.0,
        steps=int(horizon),
    )
    logger.debug(
        "episode of %i steps: %i violations, %i interventions",
        horizon,
        metrics["violations"],
        metrics["interventions"],
    )
    return trajectory, metrics, steps


def _step_columns(env):
    columns = ["k"]
    columns += [f"x_{i}" for i in range(env.state_dim)]
    columns += [f"u_nominal_{i}" for i in range(env.action_dim)]
    columns += [f"u_{i}" for i in range(env.action_dim)]
    columns += ["branch", "value", "worst_case", "distance", "backup_feasible"]
    return columns
