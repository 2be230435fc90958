import numpy as np
from pytest import approx, mark, raises, warns


def test_level_transition_bounds_example():
    from confsafe.certificates import level_transition_bounds

    assert level_transition_bounds(0, 1, 0.1, 0.5) == approx((0.8, 1.0))
    assert level_transition_bounds(0, 1, 0.1, 0.5, "printed") == approx((0.8, 0.8))


@mark.parametrize("thetas", [(0.5, 0.5), (0.6, 0.5), (-0.1, 0.5), (0.1, 1.0)])
def test_level_transition_bounds_rejects_unordered(thetas):
    from confsafe.certificates import level_transition_bounds

    with raises(ValueError):
        level_transition_bounds(0, 1, *thetas)


def test_level_transition_bounds_hold_on_two_point_distributions():
    from confsafe.certificates import level_transition_bounds

    theta1, theta2 = 0.3, 0.6
    lower, upper = level_transition_bounds(0, 1, theta1, theta2)
    support = np.linspace(0, 1, 11)
    for a in support:
        for b in support:
            for weight in np.linspace(0, 1, 21):
                mean = weight * a + (1 - weight) * b
                below = weight * (a < theta2) + (1 - weight) * (b < theta2)
                if mean <= theta1:
                    assert below >= lower - 1e-12
                if mean >= theta1:
                    assert below <= upper + 1e-12


def test_printed_upper_bound_is_not_a_bound():
    from confsafe.certificates import level_transition_bounds

    _, printed = level_transition_bounds(0, 1, 0.1, 0.5, "printed")
    # V = 0 with probability 0.9 and V = 1 otherwise: the mean is 0.1
    assert 0.9 > printed


def test_build_level_ladder_closed_form():
    from confsafe.certificates import build_level_ladder

    ladder = build_level_ladder(0.5, xi=0.3, xi_bar=1.0, v_min=0.0, vartheta=0.2)
    thresholds = ladder.thresholds
    assert thresholds[-1] == approx(0.3 / (1 + (0.2 - 1) * 0.5))
    assert thresholds[:-1] / thresholds[1:] == approx(np.full(ladder.levels, 1.1))
    assert np.all(np.diff(thresholds) < 0)
    assert thresholds[0] <= 1.0 < thresholds[0] * 1.1
    assert ladder.levels == 7


def test_build_level_ladder_offsets_coincide_without_floor():
    from confsafe.certificates import build_level_ladder

    minus = build_level_ladder(0.5, 0.3, 1.0, 0.0, 0.2, alpha_offset="minus")
    plus = build_level_ladder(0.5, 0.3, 1.0, 0.0, 0.2, alpha_offset="plus")
    assert minus.thresholds == approx(plus.thresholds)


def test_build_level_ladder_with_floor():
    from confsafe.certificates import build_level_ladder

    ladder = build_level_ladder(0.5, xi=1.3, xi_bar=2.0, v_min=1.0, vartheta=0.5)
    innermost = ladder.thresholds[-1]
    assert innermost + (0.5 - 1) * 0.5 * (innermost - 1.0) == approx(1.3)
    assert np.all(ladder.thresholds > 1.3)
    assert np.all(ladder.thresholds <= 2.0)


def test_build_level_ladder_without_room():
    from confsafe.certificates import build_level_ladder

    with raises(ValueError, match="smaller vartheta"):
        build_level_ladder(1.0, xi=0.5, xi_bar=1.0, v_min=0.0, vartheta=0.5)


@mark.parametrize(
    "arguments",
    [
        (0.5, 0.3, 1.0, 0.0, 1.0),
        (0.5, 0.3, 1.0, 0.0, 0.0),
        (0.0, 0.3, 1.0, 0.0, 0.5),
        (1.5, 0.3, 1.0, 0.0, 0.5),
        (0.5, 1.0, 1.0, 0.0, 0.5),
        (0.5, 0.3, 1.0, 0.3, 0.5),
    ],
)
def test_build_level_ladder_rejects_parameters(arguments):
    from confsafe.certificates import build_level_ladder

    with raises(ValueError):
        build_level_ladder(*arguments)


def test_escape_probability_without_escape():
    from confsafe.certificates import escape_probability

    matrix = np.eye(2)
    assert escape_probability(matrix, np.array([0.0, 1.0]), 10) == 0


@mark.parametrize("steps", [0, 1, 5, 20])
def test_escape_probability_geometric(steps):
    from confsafe.certificates import escape_probability

    matrix = np.array([[1.0, 0.1], [0.0, 0.9]])
    expected = 1 - 0.9 ** steps
    assert escape_probability(matrix, np.array([0.0, 1.0]), steps) == approx(expected)


def test_escape_probability_rejects_non_stochastic():
    from confsafe.certificates import escape_probability

    with raises(ValueError):
        escape_probability(np.array([[1.0, 0.2], [0.0, 0.9]]), np.array([0, 1.0]), 2)


def test_derived_single_level():
    from confsafe.certificates import build_level_ladder, delta_fl

    ladder = build_level_ladder(0.5, xi=0.3, xi_bar=0.6, v_min=0.0, vartheta=0.5)
    assert ladder.levels == 1
    report = delta_fl(ladder, 0.0, 1.0, 0.5, 3)
    assert report.matrix == approx(np.array([[1.0, 0.5], [0.0, 0.5]]))
    assert report.delta_fl == approx(1 - 0.4 * 0.5 ** 2)
    assert delta_fl(ladder, 0.0, 1.0, 0.5, 0).delta_fl == 0


def test_derived_matrix_is_stochastic():
    from confsafe.certificates import build_level_ladder, transition_bound_matrix

    ladder = build_level_ladder(0.3, xi=0.2, xi_bar=1.0, v_min=0.0, vartheta=0.1)
    matrix, clamping = transition_bound_matrix(ladder, 2.0)
    assert matrix.shape == (ladder.levels + 1, ladder.levels + 1)
    assert np.all(matrix >= 0)
    assert matrix.sum(axis=0) == approx(np.ones(ladder.levels + 1))
    assert matrix[:, 0] == approx(np.eye(ladder.levels + 1)[0])
    assert clamping == 0


def test_delta_fl_monotone():
    from confsafe.certificates import build_level_ladder, delta_fl

    ladder = build_level_ladder(0.3, xi=0.2, xi_bar=1.0, v_min=0.0, vartheta=0.1)
    deltas = [delta_fl(ladder, 0.0, 1.0, 0.3, k).delta_fl for k in range(0, 60, 5)]
    assert np.all(np.diff(deltas) >= -1e-12)
    tighter = [delta_fl(ladder, 0.0, 1.0, 0.3, 30, xi=u).delta_fl for u in (0.05, 0.2)]
    assert tighter[0] <= tighter[1] + 1e-12


def test_delta_fl_rejects_mismatched_ladder():
    from confsafe.certificates import build_level_ladder, delta_fl

    ladder = build_level_ladder(0.3, xi=0.2, xi_bar=1.0, v_min=0.0, vartheta=0.1)
    with raises(ValueError):
        delta_fl(ladder, 0.0, 1.0, 0.2, 10)
    with raises(ValueError):
        delta_fl(ladder, 0.0, 1.0, 0.3, 10, xi=0.5)


def test_delta_fl_bounds_birth_death_chain():
    from confsafe.certificates import build_level_ladder, delta_fl

    count, up, down, start, horizon = 21, 0.3, 0.4, 10, 200
    values = np.arange(count, dtype=float)
    transitions = np.zeros((count, count))
    transitions[0, 0] = 1
    for state in range(1, count):
        transitions[state, min(state + 1, count - 1)] += up
        transitions[state, state - 1] += down
        transitions[state, state] += 1 - up - down
    # E[V(x')] <= V(x) - rate * V(x) on every state
    rate = (down - up) / (count - 1)
    assert np.all(transitions @ values <= (1 - rate) * values + 1e-12)

    xi = float(transitions[start] @ values)
    ladder = build_level_ladder(rate, xi=xi, xi_bar=count - 1, v_min=0.0, vartheta=0.5)
    report = delta_fl(ladder, 0.0, count - 1, rate, horizon)

    escaped = values >= ladder.thresholds[0]
    absorbing = transitions.copy()
    absorbing[escaped] = np.eye(count)[escaped]
    distribution = np.eye(count)[start]
    for _ in range(horizon):
        distribution = distribution @ absorbing
    exact = distribution[escaped].sum()
    assert 0 < exact <= report.delta_fl + 1e-12


def test_printed_variant_warns_when_vacuous():
    from confsafe.certificates import VacuousBoundWarning, build_level_ladder, delta_fl

    ladder = build_level_ladder(0.5, xi=0.3, xi_bar=0.6, v_min=0.0, vartheta=0.5)
    with warns(VacuousBoundWarning):
        report = delta_fl(ladder, 0.0, 1.0, 0.5, 200, variant="printed")
    assert report.matrix[1, 1] == approx(0.4 - 0.1 / 0.7)
    assert report.delta_fl == approx(1.0)
    assert len(report.warnings) > 0


def test_certify_keeps_smallest_bound():
    from confsafe.certificates import certify
    from confsafe.values import CertInput

    cert_input = CertInput(
        alpha_lambda=0.5, xi=0.3, xi_bar=0.6, v_min=0.0, v_max=1.0, c_min_bound=0.0
    )
    report = certify(
        cert_input, 10, varthetas=(0.5, 0.9), lambda_fractions=(1.0, 0.5), delta_f=0.1
    )
    assert len(report.candidates) == 4
    found = [u["delta_fl"] for u in report.candidates if u["delta_fl"] is not None]
    assert report.delta_fl == approx(min(found))
    assert report.delta == approx(report.delta_fl + 0.1 - 0.1 * report.delta_fl)
    document = report.to_document()
    assert document["certified"]
    assert document["delta"] == approx(report.delta)


def test_certify_without_any_ladder():
    from confsafe.certificates import certify
    from confsafe.values import CertInput

    cert_input = CertInput(
        alpha_lambda=1.0, xi=0.59, xi_bar=0.6, v_min=0.0, v_max=1.0, c_min_bound=0.0
    )
    with raises(ValueError):
        certify(cert_input, 10, varthetas=(0.5,), lambda_fractions=(1.0,))


def test_wilson_interval():
    from confsafe.certificates import wilson_interval

    low, high = wilson_interval(0, 1000)
    assert low == approx(0, abs=1e-12)
    assert high == approx(0.0038, abs=1e-4)
    low, high = wilson_interval(50, 100)
    assert low < 0.5 < high
    assert 0.5 - low == approx(high - 0.5)


def test_mc_delta_estimate_counts_exits():
    from confsafe.certificates import mc_delta_estimate

    def dynamics(states, actions, generator):
        return states + 1

    def policy(states):
        return np.zeros((len(states), 1))

    def value(states):
        return states[:, 0]

    rate, (low, high) = mc_delta_estimate(
        dynamics, policy, value, 2.5, [[0.0]], 3, 1000
    )
    assert rate == 1
    assert low < 1 <= high
    rate, _ = mc_delta_estimate(dynamics, policy, value, 2.5, [[0.0]], 2, 1000)
    assert rate == 0
    with raises(ValueError):
        mc_delta_estimate(dynamics, policy, value, 2.5, [[0.0]], 2, 10)


def drift_chain(seed: int, count: int = 12, rate: float = 0.2):
    """Random chain whose value drops by ``rate`` in expectation, state 0 absorbing."""
    from confsafe.envs import DiscreteChainMDP

    generator = np.random.default_rng(seed)
    values = np.concatenate(([0.0], np.sort(generator.uniform(0.05, 1, count - 1))))
    values[-1] = 1.0
    rows = generator.dirichlet(np.full(count, 0.5), size=count)
    expected = rows @ values
    # move mass to state 0 until E[V(x')] <= (1 - rate) V(x)
    mix = np.clip(1 - (1 - rate) * values / np.maximum(expected, 1e-300), 0, 1)
    rows *= 1 - mix[:, None]
    rows[:, 0] += mix
    return DiscreteChainMDP(rows), values


@mark.parametrize("seed", range(24))
def test_delta_fl_bounds_random_drift_chains(seed):
    from confsafe.certificates import build_level_ladder, delta_fl

    rate = 0.2
    chain, values = drift_chain(seed, rate=rate)
    matrix = chain.transition_operator().toarray()
    expected = matrix @ values
    assert np.all(expected <= (1 - rate) * values + 1e-12)

    start = int(np.argmax(np.where((expected > 0) & (expected <= 0.5), expected, -1)))
    xi = float(expected[start])
    assert 0 < xi <= 0.5
    ladder = build_level_ladder(rate, xi=xi, xi_bar=1.0, v_min=0.0, vartheta=0.5)
    escaped = values >= ladder.thresholds[0]
    absorbing = matrix.copy()
    absorbing[escaped] = np.eye(len(values))[escaped]
    for horizon in (10, 50, 100):
        report = delta_fl(ladder, 0.0, 1.0, rate, horizon)
        # x_1 follows the chain from the start, x_2..x_K the absorbing one
        distribution = matrix[start]
        for _ in range(horizon - 1):
            distribution = distribution @ absorbing
        exact = distribution[escaped].sum()
        assert exact <= report.delta_fl + 1e-12


def test_certified_policy_against_monte_carlo():
    from confsafe.certificates import certify, mc_delta_estimate
    from confsafe.core import Box, NoiseKind, NoiseModel
    from confsafe.models import FunctionModel
    from confsafe.objectives import ImmediateCost, SafetyObjective
    from confsafe.values import (
        GridSpec,
        GridValueFunction,
        NoiseQuadrature,
        certify_policy,
        check_drift,
    )

    def dead_zone(states):
        return np.maximum(np.abs(states[:, 0]) - 0.2, 0) / 0.8

    noise = NoiseModel(NoiseKind.UNIFORM, [0.1])
    model = FunctionModel(
        lambda s, a: 0.5 * s,
        lambda s, a: np.zeros_like(s),
        beta=1.0,
        noise=noise,
        action_box=Box.symmetric(1.0),
    )
    grid = GridSpec([(-1.0, 1.0, 41)])
    value = GridValueFunction(grid, dead_zone(grid.nodes()))
    quadrature = NoiseQuadrature.from_noise(noise)
    cost = ImmediateCost(lambda s: np.minimum(dead_zone(s), 1), 0, 1, 1)
    objective = SafetyObjective.create(cost, gamma=0.5)

    drift = check_drift(
        value, model, None, 0.0, quadrature, safe=value.values < objective.xi_bar
    )
    assert drift.holds
    assert drift.lambda_max >= 0.5 - 1e-9
    cert_input = certify_policy(value, model, None, objective, drift, quadrature)
    report = certify(cert_input, 100)
    assert report.certified
    entry = cert_input.states[cert_input.entry]
    assert len(entry) > 0

    def dynamics(states, actions, generator):
        return 0.5 * states + noise.sample(generator, len(states))

    rate, (_, high) = mc_delta_estimate(
        dynamics,
        lambda s: np.zeros((len(s), 1)),
        value,
        objective.xi_bar,
        entry,
        100,
        100_000,
        rng=0,
    )
    assert rate <= report.delta + (high - rate)
