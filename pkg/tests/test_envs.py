import numpy as np
from pytest import approx, raises, warns


def test_pitch_discretization():
    from confsafe.envs import PITCH_A_CONTINUOUS, PITCH_B_CONTINUOUS, PitchControlEnv

    env = PitchControlEnv(dt=0.02, noise_std=0.0)
    continuous = np.array(PITCH_A_CONTINUOUS).reshape(3, 3)
    assert env.A == approx(np.eye(3) + 0.02 * continuous)
    assert env.B == approx(0.02 * np.array(PITCH_B_CONTINUOUS))
    state, action = np.array([0.1, 0.01, -0.1]), np.array([0.5])
    expected = env.A @ state + env.B * 0.5
    assert env.step(state, action) == approx(expected)
    assert env.state_dim == 3 and env.action_dim == 1


def test_pitch_safe_set_and_reward():
    from confsafe.envs import PitchControlEnv

    env = PitchControlEnv()
    states = np.array([[0.0, 0.0, -0.1], [0.0, 0.0, 0.0], [0.0, 0.0, 0.1]])
    assert list(env.safe_indicator(states)) == [True, True, False]
    assert env.safe_indicator(states[0])
    rewards = env.reward(states, np.array([[1.0]] * 3))
    assert rewards == approx(-2 * states[:, 2] ** 2 - 0.02)
    flipped = PitchControlEnv(reward_u_sign=1.0).reward(states, np.array([[1.0]] * 3))
    assert flipped == approx(-2 * states[:, 2] ** 2 + 0.02)
    assert env.initial_state() == approx([0, 0, -0.2])


def test_pitch_rejects_parameters():
    from confsafe.envs import PitchControlEnv

    with raises(ValueError):
        PitchControlEnv(dt=0.0)
    unstable = [20.0, 0, 0, 0, 20.0, 0, 0, 0, 20.0]
    with raises(ValueError, match="unstable"):
        PitchControlEnv(a_continuous=unstable)


def test_step_clamps_inputs():
    from confsafe.envs import ClampingWarning, PitchControlEnv

    env = PitchControlEnv(noise_std=0.0)
    with warns(ClampingWarning):
        result = env.step([0.0, 0.0, -0.1], [5.0])
    expected = env.transition(np.array([[0.0, 0.0, -0.1]]), np.array([[1.4]]))
    assert result == approx(expected[0])
    assert env.clamp_counts["action"] == 1
    with raises(ValueError):
        env.step([np.nan, 0.0, 0.0], [0.0])


def test_step_adds_noise(rng):
    from confsafe.envs import DoubleIntegratorEnv

    env = DoubleIntegratorEnv(noise_std=0.1)
    states = np.zeros((2000, 2))
    result = env.step(states, [0.0], rng)
    assert result.shape == (2000, 2)
    assert result.std(axis=0) == approx([0.1, 0.1], rel=0.1)


def test_double_integrator():
    from confsafe.envs import DoubleIntegratorEnv

    env = DoubleIntegratorEnv(dt=0.1, noise_std=0.0, position_limit=1.0)
    assert env.step([0.5, 1.0], [1.0]) == approx([0.5 + 0.1 + 0.005, 1.1])
    assert list(env.safe_indicator([[0.9, 0.0], [-1.1, 0.0]])) == [True, False]
    assert env.reward([[0.5, 0.0]], [[0.0]]) == approx([-0.25])
    assert env.grid_axes() == [(-1.5, 1.5, 31), (-2.0, 2.0, 31)]


def test_chain_rejects_transitions():
    from confsafe.envs import DiscreteChainMDP

    with raises(ValueError):
        DiscreteChainMDP([[0.5, 0.4], [0.0, 1.0]])
    with raises(ValueError):
        DiscreteChainMDP([[1.5, -0.5], [0.0, 1.0]])
    with raises(ValueError):
        DiscreteChainMDP(np.ones((2, 3)) / 3)
    with raises(ValueError):
        DiscreteChainMDP(np.eye(2), unsafe=[2])


def test_random_chain():
    from confsafe.envs import DiscreteChainMDP

    chain = DiscreteChainMDP.random(5, n_actions=3, rng=0, unsafe=[4])
    assert chain.transitions.shape == (3, 5, 5)
    assert chain.transitions.sum(axis=2) == approx(np.ones((3, 5)))
    assert list(chain.safe_indicator(np.arange(5.0)[:, None])) == [True] * 4 + [False]
    with raises(ValueError):
        chain.transitions[0, 0, 0] = 1.0


def test_chain_step_frequencies(rng):
    from confsafe.envs import DiscreteChainMDP

    chain = DiscreteChainMDP([[[0.2, 0.8], [0.0, 1.0]], [[1.0, 0.0], [0.5, 0.5]]])
    states = np.zeros((5000, 1))
    result = chain.step(states, [0.0], rng)
    assert set(np.unique(result)) <= {0.0, 1.0}
    assert result.mean() == approx(0.8, abs=0.03)
    assert chain.step([1.0], [1.0], rng).shape == (1,)
    assert chain(np.zeros((3, 1)), np.ones((3, 1)), rng) == approx(np.zeros((3, 1)))


def test_chain_policy_value():
    from confsafe.envs import DiscreteChainMDP
    from confsafe.objectives import indicator_cost

    chain = DiscreteChainMDP([[0, 1, 0], [0, 0, 1], [0, 0, 1]], unsafe=[2])
    cost = indicator_cost(chain.safe_indicator)
    # V(2) = 1 / (1 - γ), V(1) = γ V(2), V(0) = γ V(1)
    assert chain.policy_value(cost, 0.5) == approx([0.5, 1.0, 2.0])
    assert chain.transition_operator().toarray() == approx(chain.transitions[0])
    assert chain.grid().shape == (3,)


def test_chain_policies():
    from confsafe.envs import DiscreteChainMDP

    chain = DiscreteChainMDP(np.stack([np.eye(3), np.roll(np.eye(3), 1, axis=1)]))
    assert list(chain.policy_actions([0, 1, 5])) == [0, 1, 1]
    assert list(chain.policy_actions(lambda s: np.ones((len(s), 1)))) == [1, 1, 1]
    assert list(chain.policy_actions(None)) == [0, 0, 0]
    moved = chain.transition_operator([1, 0, 0]).toarray()
    assert moved[0] == approx([0, 1, 0])
    assert moved[1] == approx([0, 1, 0])


def test_environment_registry():
    from confsafe.envs import (
        DoubleIntegratorEnv,
        PitchControlEnv,
        as_environment,
        register_environment,
    )

    env = register_environment.factory(dict(name="pitch", dt=0.01, noise_std=0.0))
    assert isinstance(env, PitchControlEnv)
    assert env.dt == 0.01
    assert env.noise.variance == approx(np.zeros(3))
    assert isinstance(as_environment("double_integrator"), DoubleIntegratorEnv)
    assert as_environment(env) is env
    assert env.grid_axes()[2] == (-0.6, 0.2, 17)
