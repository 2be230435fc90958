from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, List, Mapping, Optional, Sequence, Text, Tuple

import numpy as np

from confsafe.core import Seed, as_generator

__doc__ = Path(__file__).with_suffix(".rst").read_text()

logger = getLogger(__name__)

VARIANTS = ("derived", "printed")
OFFSETS = ("minus", "plus")
MAX_LEVELS = 100_000


class VacuousBoundWarning(UserWarning):
    """A certificate relies on heavily clamped probabilities or bounds nothing."""


def _check_variant(variant: Text):
    if variant not in VARIANTS:
        raise ValueError(f"Unknown variant {variant}, expected one of {VARIANTS}")


def _offset(alpha_offset: Text, v_min: float) -> float:
    if alpha_offset not in OFFSETS:
        raise ValueError(
            f"Unknown alpha_offset {alpha_offset}, expected one of {OFFSETS}"
        )
    return -v_min if alpha_offset == "minus" else v_min


def level_transition_bounds(
    v_min: float,
    v_max: float,
    theta1: float,
    theta2: float,
    variant: Text = "derived",
) -> Tuple[float, float]:
    """Bounds on the probability that the next value lies below ``theta2``.

    If the value is bounded by ``v_min`` and ``v_max``, and its expectation is at most
    ``theta1``, the probability is at least ``(theta2 - theta1) / (theta2 - v_min)``. If
    the expectation is at least ``theta1``, it is at most
    ``(v_max - theta1) / (v_max - theta2)``. The ``"printed"`` variant returns
    ``(theta2 - theta1) / (v_max - theta2)`` as upper bound instead, which does not
    bound the probability in general.

    Returns:
        Lower and upper bounds, clamped to ``[0, 1]``.
    """
    _check_variant(variant)
    if not v_min <= theta1 < theta2 < v_max:
        raise ValueError(
            f"Expected v_min <= theta1 < theta2 < v_max, got {v_min}, {theta1},"
            f" {theta2}, {v_max}"
        )
    lower = (theta2 - theta1) / (theta2 - v_min)
    if variant == "derived":
        upper = (v_max - theta1) / (v_max - theta2)
    else:
        upper = (theta2 - theta1) / (v_max - theta2)
    return float(np.clip(lower, 0, 1)), float(np.clip(upper, 0, 1))


@dataclass(frozen=True, eq=False)
class LevelLadder:
    """Nested thresholds ``θ^1 > θ^2 > ... > θ^{M+1}`` between ``ξ`` and ``ξ̄``."""

    thresholds: np.ndarray
    """Thresholds in decreasing order, ``M + 1`` of them."""
    vartheta: float
    alpha_lambda: float
    xi: float
    xi_bar: float
    v_min: float
    alpha_offset: Text = "minus"

    @property
    def levels(self) -> int:
        """Number of levels ``M``."""
        return len(self.thresholds) - 1

    def to_document(self) -> Mapping[Text, Any]:
        return dict(
            thresholds=self.thresholds,
            vartheta=self.vartheta,
            alpha_lambda=self.alpha_lambda,
            xi=self.xi,
            xi_bar=self.xi_bar,
            v_min=self.v_min,
            alpha_offset=self.alpha_offset,
        )


def build_level_ladder(
    alpha_lambda: float,
    xi: float,
    xi_bar: float,
    v_min: float,
    vartheta: float,
    alpha_offset: Text = "minus",
) -> LevelLadder:
    """Ladder of thresholds for a linear drift rate ``α(s) = λ s``.

    The innermost threshold solves ``θ + (ϑ - 1) α(θ - v_min) = ξ``, found by
    bisection to ``1e-10``. Thresholds then grow as ``θ <- θ + ϑ α(θ - v_min)`` for as
    long as they stay below ``ξ̄``. With ``alpha_offset="plus"``, ``θ + v_min`` replaces
    ``θ - v_min``.

    Raises:
        ValueError: if no level fits between ``ξ`` and ``ξ̄``. A smaller ``ϑ`` or
            ``ξ`` helps.
    """
    from scipy.optimize import bisect

    if not 0 < vartheta < 1:
        raise ValueError(f"vartheta must lie in (0, 1), got {vartheta}")
    if not 0 < alpha_lambda <= 1:
        raise ValueError(f"The drift rate must lie in (0, 1], got {alpha_lambda}")
    if not xi < xi_bar:
        raise ValueError(f"xi ({xi}) must be smaller than xi_bar ({xi_bar})")
    if not v_min < xi:
        raise ValueError(f"xi ({xi}) must exceed the value's lower bound ({v_min})")
    offset = _offset(alpha_offset, v_min)

    def implicit(theta: float) -> float:
        return theta + (vartheta - 1) * alpha_lambda * (theta + offset) - xi

    low, high = xi - abs(xi) - 1.0, xi_bar + abs(xi_bar) + 1.0
    while implicit(low) > 0:
        low -= 2 * (high - low)
    while implicit(high) < 0:
        high += 2 * (high - low)
    innermost = bisect(implicit, low, high, xtol=1e-10)

    ascending = [innermost]
    while True:
        theta = ascending[-1]
        step = vartheta * alpha_lambda * (theta + offset)
        if step <= 0:
            raise ValueError(
                f"Thresholds do not increase from {theta}: check alpha_offset and v_min"
            )
        if theta + step > xi_bar:
            break
        ascending.append(theta + step)
        if len(ascending) > MAX_LEVELS:
            raise ValueError(f"More than {MAX_LEVELS} levels, increase vartheta")
    if len(ascending) < 2:
        raise ValueError(
            f"No level fits between xi={xi} and xi_bar={xi_bar}"
            f" with vartheta={vartheta} and a drift rate of {alpha_lambda}:"
            " use a smaller vartheta or xi"
        )
    return LevelLadder(
        np.array(ascending[::-1]),
        vartheta,
        alpha_lambda,
        xi,
        xi_bar,
        v_min,
        alpha_offset,
    )


def _derived_matrix(ladder: LevelLadder) -> Tuple[np.ndarray, float]:
    """Transition bounds of the monotone abstract chain, and the largest clamp."""
    theta, levels = ladder.thresholds, ladder.levels
    offset = _offset(ladder.alpha_offset, ladder.v_min)
    matrix = np.zeros((levels + 1, levels + 1))
    matrix[0, 0] = 1
    for j in range(1, levels + 1):
        mean = theta[j - 1] - ladder.alpha_lambda * (theta[j - 1] + offset)
        cumulative = np.zeros(levels + 2)
        for i in range(1, min(j + 1, levels) + 1):
            cumulative[i] = (theta[i - 1] - mean) / (theta[i - 1] - ladder.v_min)
        cumulative = np.clip(cumulative, 0, 1)
        cumulative[levels + 1] = 0
        upper, lower = cumulative[1 : levels + 1], cumulative[2 : levels + 2]
        matrix[1 : levels + 1, j] = upper - lower
        matrix[0, j] = 1 - cumulative[1]
    return matrix, 0.0


def _printed_matrix(ladder: LevelLadder, v_max: float) -> Tuple[np.ndarray, float]:
    """Transition bounds as printed, clamped, with the deficit sent to the escape."""
    theta, levels = ladder.thresholds, ladder.levels
    offset = _offset(ladder.alpha_offset, ladder.v_min)
    vartheta, v_min = ladder.vartheta, ladder.v_min
    raw = np.zeros((levels, levels))
    for j in range(1, levels + 1):
        drift = ladder.alpha_lambda * (theta[j] + offset)
        for i in range(1, levels + 1):
            if i <= j:
                raw[i - 1, j - 1] = (theta[i - 1] - theta[j - 1] + drift) / (
                    theta[i - 1] - v_min
                ) - (theta[i] - theta[j - 1] + drift) / (v_max - theta[j - 1] + drift)
            elif i == j + 1:
                raw[i - 1, j - 1] = (
                    (1 - vartheta) * drift / (theta[j - 1] - drift - v_min)
                )
    clamped = np.clip(np.nan_to_num(raw, nan=0.0, posinf=1.0, neginf=0.0), 0, 1)
    totals = clamped.sum(axis=0)
    clamped = np.where(totals > 1, clamped / np.maximum(totals, 1), clamped)
    change = float(np.abs(np.nan_to_num(raw) - clamped).max()) if raw.size else 0.0
    matrix = np.zeros((levels + 1, levels + 1))
    matrix[0, 0] = 1
    matrix[1:, 1:] = clamped
    matrix[0, 1:] = 1 - clamped.sum(axis=0)
    return matrix, change


def transition_bound_matrix(
    ladder: LevelLadder, v_max: float, variant: Text = "derived"
) -> Tuple[np.ndarray, float]:
    """Left-stochastic matrix bounding the transitions between levels.

    Index 0 is the absorbing escape state, index ``i`` the sub-level set of ``θ^i``.
    Column ``j`` holds the transition probabilities out of level ``j``.

    Returns:
        The matrix and the largest change made by clamping.
    """
    _check_variant(variant)
    if variant == "derived":
        return _derived_matrix(ladder)
    return _printed_matrix(ladder, v_max)


def entry_distribution(ladder: LevelLadder, xi: Optional[float] = None) -> np.ndarray:
    """Lower bounds on the level after one step from a state with ``E[V(x')] <= ξ``."""
    xi = ladder.xi if xi is None else float(xi)
    theta, levels = ladder.thresholds, ladder.levels
    cumulative = np.zeros(levels + 2)
    cumulative[1 : levels + 1] = (theta[:levels] - xi) / (theta[:levels] - ladder.v_min)
    cumulative = np.clip(cumulative, 0, 1)
    cumulative[levels + 1] = 0
    result = np.zeros(levels + 1)
    result[1:] = cumulative[1 : levels + 1] - cumulative[2 : levels + 2]
    result[0] = 1 - cumulative[1]
    return result


def escape_probability(matrix: np.ndarray, initial: np.ndarray, steps: int) -> float:
    """Probability mass in the absorbing state 0 after ``steps`` transitions."""
    if steps < 0:
        raise ValueError(f"Steps must be non-negative, got {steps}")
    columns = matrix.sum(axis=0)
    if not np.allclose(columns, 1, atol=1e-12):
        raise ValueError(f"Matrix is not left-stochastic: column sums {columns}")
    final = np.linalg.matrix_power(matrix, steps) @ initial
    return float(np.clip(final[0], 0, 1))


@dataclass
class CertificateReport:
    """Bound on the probability of leaving ``{V < ξ̄}`` within ``K`` steps."""

    delta_fl: float
    K: int
    ladder: Optional[LevelLadder]
    matrix: Optional[np.ndarray]
    delta_f: float = 0.0
    """Probability that the model set does not contain the true dynamics."""
    variant: Text = "derived"
    clamping: float = 0.0
    """Largest change made to a transition bound by clamping."""
    candidates: List[Mapping[Text, Any]] = field(default_factory=list)
    """Every combination of parameters tried, with its bound."""
    mc_crosscheck: Optional[Mapping[Text, Any]] = None
    warnings: List[Text] = field(default_factory=list)
    certified: bool = True

    @property
    def delta(self) -> float:
        """Overall failure probability, including the model's."""
        return self.delta_fl + self.delta_f - self.delta_fl * self.delta_f

    def to_document(self) -> Mapping[Text, Any]:
        return dict(
            certified=self.certified,
            delta_fl=self.delta_fl,
            delta_f=self.delta_f,
            delta=self.delta,
            K=self.K,
            variant=self.variant,
            clamping=self.clamping,
            ladder=None if self.ladder is None else self.ladder.to_document(),
            matrix=self.matrix,
            candidates=list(self.candidates),
            mc_crosscheck=self.mc_crosscheck,
            warnings=list(self.warnings),
        )


def delta_fl(
    ladder: LevelLadder,
    v_min: float,
    v_max: float,
    alpha_lambda: float,
    K: int,
    xi: Optional[float] = None,
    variant: Text = "derived",
) -> CertificateReport:
    """Bound on the probability of leaving the outermost level within ``K`` steps.

    With the ``"derived"`` variant, the first step goes from the entry condition
    ``E[V(x_1)] <= ξ`` to the distribution of :py:func:`entry_distribution`, and the
    remaining ``K - 1`` steps follow the transition bounds. The ``"printed"`` variant
    starts in the innermost level and takes ``K`` steps.

    Args:
        ladder: thresholds.
        v_min: lower bound on the value, must match the ladder's.
        v_max: upper bound on the value.
        alpha_lambda: drift rate, must match the ladder's.
        K: number of steps.
        xi: entry threshold, at most the ladder's. Defaults to the ladder's.
        variant: ``"derived"`` or ``"printed"``.
    """
    from warnings import warn

    if K < 0:
        raise ValueError(f"K must be non-negative, got {K}")
    if (
        abs(v_min - ladder.v_min) > 1e-12
        or abs(alpha_lambda - ladder.alpha_lambda) > 1e-12
    ):
        raise ValueError("The ladder was built for a different v_min or drift rate")
    if xi is not None and xi > ladder.xi + 1e-12:
        raise ValueError(f"Entry threshold {xi} exceeds the ladder's xi {ladder.xi}")
    matrix, clamping = transition_bound_matrix(ladder, v_max, variant)
    if K == 0:
        value = 0.0
    elif variant == "derived":
        value = escape_probability(matrix, entry_distribution(ladder, xi), K - 1)
    else:
        initial = np.zeros(ladder.levels + 1)
        initial[-1] = 1
        value = escape_probability(matrix, initial, K)
    report = CertificateReport(
        value, K, ladder, matrix, variant=variant, clamping=clamping
    )
    if clamping > 0.5:
        report.warnings.append(
            f"Clamping changed a transition bound by {clamping:.3g}:"
            " the bound is likely vacuous"
        )
    if K > 0 and value >= 1 - 1e-12:
        report.warnings.append("The bound is vacuous")
    for message in report.warnings:
        warn(message, VacuousBoundWarning)
    return report


def certify(
    cert_input,
    K: int,
    varthetas: Sequence[float] = (0.5, 0.2, 0.1, 0.05, 0.02),
    lambda_fractions: Sequence[float] = (1.0, 0.5, 0.2, 0.1),
    delta_f: float = 0.0,
    variant: Text = "derived",
    alpha_offset: Text = "minus",
) -> CertificateReport:
    """Smallest bound over several ladders built from certified grid quantities.

    A drift rate ``λ`` implies every smaller rate, so each fraction of the certified
    rate yields a valid bound, as does each ``ϑ``. Combinations for which no ladder
    fits are skipped.

    Args:
        cert_input: :py:class:`~confsafe.values.CertInput`.
        K: number of steps.
        varthetas: ladder spacings to try.
        lambda_fractions: fractions of the certified drift rate to try.
        delta_f: probability that the model set does not contain the true dynamics.
        variant: ``"derived"`` or ``"printed"`` transition bounds.
        alpha_offset: ``"minus"`` or ``"plus"``.

    Raises:
        ValueError: if no combination yields a ladder.
    """
    from warnings import catch_warnings, simplefilter

    if not 0 <= delta_f <= 1:
        raise ValueError(f"delta_f must lie in [0, 1], got {delta_f}")
    best: Optional[CertificateReport] = None
    candidates: List[Mapping[Text, Any]] = []
    for vartheta in varthetas:
        for fraction in lambda_fractions:
            rate = fraction * cert_input.alpha_lambda
            try:
                ladder = build_level_ladder(
                    rate,
                    cert_input.xi,
                    cert_input.xi_bar,
                    cert_input.v_min,
                    vartheta,
                    alpha_offset,
                )
            except ValueError as error:
                logger.debug(
                    "no ladder for vartheta %g, rate %g: %s", vartheta, rate, error
                )
                candidates.append(
                    dict(vartheta=vartheta, alpha_lambda=rate, delta_fl=None)
                )
                continue
            with catch_warnings():
                simplefilter("ignore", VacuousBoundWarning)
                report = delta_fl(
                    ladder, cert_input.v_min, cert_input.v_max, rate, K, variant=variant
                )
            candidates.append(
                dict(
                    vartheta=vartheta,
                    alpha_lambda=rate,
                    levels=ladder.levels,
                    delta_fl=report.delta_fl,
                )
            )
            if best is None or report.delta_fl < best.delta_fl:
                best = report
    if best is None:
        raise ValueError("No level ladder fits between xi and xi_bar for any parameter")
    best.delta_f = float(delta_f)
    best.candidates = candidates
    logger.info(
        "certificate over %i steps: delta_fl %.4g with vartheta %g and %i levels",
        K,
        best.delta_fl,
        best.ladder.vartheta,
        best.ladder.levels,
    )
    return best


def wilson_interval(
    successes: int, trials: int, confidence: float = 0.95
) -> Tuple[float, float]:
    """Wilson score interval of a binomial proportion."""
    from scipy.stats import norm

    if trials < 1:
        raise ValueError(f"Need at least one trial, got {trials}")
    z = norm.ppf(0.5 + confidence / 2)
    rate = successes / trials
    denominator = 1 + z ** 2 / trials
    center = (rate + z ** 2 / (2 * trials)) / denominator
    half = z * np.sqrt(rate * (1 - rate) / trials + z ** 2 / (4 * trials ** 2))
    half /= denominator
    return float(max(center - half, 0.0)), float(min(center + half, 1.0))


def mc_delta_estimate(
    dynamics: Callable,
    policy: Callable,
    value: Callable,
    xi_bar: float,
    x0_set,
    K: int,
    n_rollouts: int,
    rng: Seed = None,
) -> Tuple[float, Tuple[float, float]]:
    """Fraction of roll-outs whose value exceeds ``ξ̄`` within ``K`` steps.

    Roll-outs start from the states of ``x0_set`` in turn and are simulated as one
    batch.

    Returns:
        The violation rate and its 95% Wilson interval.
    """
    if n_rollouts < 1000:
        raise ValueError(f"Need at least 1000 roll-outs, got {n_rollouts}")
    generator = as_generator(rng)
    starts = np.atleast_2d(np.asarray(x0_set, dtype=float))
    states = starts[np.arange(n_rollouts) % len(starts)]
    violated = np.zeros(n_rollouts, dtype=bool)
    for _ in range(K):
        states = np.asarray(dynamics(states, policy(states), generator), dtype=float)
        violated |= np.asarray(value(states), dtype=float).reshape(-1) > xi_bar
    count = int(violated.sum())
    return count / n_rollouts, wilson_interval(count, n_rollouts)
