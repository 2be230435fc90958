import numpy as np
from pytest import approx, fixture, raises, warns


@fixture
def integrator():
    from confsafe.envs import DoubleIntegratorEnv

    return DoubleIntegratorEnv(noise_std=0.0)


@fixture
def buffer(integrator):
    from confsafe.core import Box
    from confsafe.models import ReplayBuffer

    generator = np.random.default_rng(0)
    states = Box.symmetric(1.0, 2).sample(generator, 200)
    actions = integrator.action_box.sample(generator, 200)
    result = ReplayBuffer(2, 1, capacity=500)
    result.add(states, actions, integrator.transition(states, actions))
    return result


@fixture
def fitted(integrator, buffer):
    from confsafe.models import EnsembleModel, fit_ensemble

    model = EnsembleModel(
        2, 1, integrator.noise, integrator.action_box, members=3, hidden=[16], rng=0
    )
    losses = fit_ensemble(model, buffer, epochs=300, learning_rate=1e-2, rng=0)
    return model, losses


def test_replay_buffer_drops_oldest():
    from confsafe.models import ReplayBuffer

    buffer = ReplayBuffer(1, 1, capacity=3)
    for i in range(5):
        buffer.add([float(i)], [0.0], [i + 1.0])
    assert len(buffer) == 3
    states, actions, next_states = buffer.transitions()
    assert states[:, 0] == approx([2, 3, 4])
    assert next_states[:, 0] == approx([3, 4, 5])
    buffer.add(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((2, 1)))
    assert buffer.transitions()[0][:, 0] == approx([4, 0, 0])
    sampled = buffer.sample(10, rng=0)
    assert all(u.shape == (10, 1) for u in sampled)


def test_replay_buffer_rejects_inputs():
    from confsafe.models import ReplayBuffer

    with raises(ValueError):
        ReplayBuffer(1, 1, capacity=0)
    with raises(ValueError):
        ReplayBuffer(1, 1).add(np.zeros((2, 1)), np.zeros((1, 1)), np.zeros((2, 1)))


def test_replay_buffer_tables(buffer):
    from confsafe.models import ReplayBuffer

    table = buffer.to_dataframe()
    assert list(table.columns) == ["x_0", "x_1", "u_0", "xp_0", "xp_1"]
    assert len(table) == 200
    loaded = ReplayBuffer.from_dataframe(table)
    assert len(loaded) == 200
    assert loaded.transitions()[2] == approx(buffer.transitions()[2])


def test_oracle_model_is_calibrated(integrator):
    from confsafe.models import OraclePerturbedModel, check_calibration

    model = OraclePerturbedModel(integrator, sigma=0.01, beta=2.0, bias_fraction=0.5)
    assert check_calibration(model, integrator, 500, rng=0) == 1.0
    states = integrator.state_box.sample(np.random.default_rng(0), 100)
    actions = np.zeros((100, 1))
    assert np.abs(model.bias(states, actions)).max() <= 0.01 + 1e-12
    mean, sigma = model.predict(states[0], [0.0])
    assert mean.shape == (2,)
    assert sigma == approx([0.01, 0.01])


def test_oracle_model_rejects_parameters(integrator):
    from confsafe.models import OraclePerturbedModel

    with raises(ValueError):
        OraclePerturbedModel(integrator, 0.01, bias_fraction=1.5)
    with raises(ValueError):
        OraclePerturbedModel(integrator, 0.01, beta=-1.0)


def test_miscalibrated_model_is_detected(integrator):
    from confsafe.models import FunctionModel, OraclePerturbedModel, check_calibration

    def sampler(generator, count):
        return np.ones((count, 2)), np.zeros((count, 1))

    model = OraclePerturbedModel(integrator, sigma=0.01, beta=0.0)
    assert check_calibration(model, integrator.transition, 10, sampler=sampler) == 1.0
    shifted = FunctionModel(
        lambda s, a: integrator.transition(s, a) + 0.02,
        lambda s, a: np.full_like(s, 0.01),
        1.0,
        integrator.noise,
        integrator.action_box,
    )
    assert check_calibration(shifted, integrator, 200, rng=0) == 0.0


def test_function_model(linear_model):
    from confsafe.core import Box, NoiseModel
    from confsafe.models import FunctionModel

    assert linear_model([0.2], [0.1]) == approx([0.2])
    mean, sigma = linear_model.predict(np.zeros((4, 1)), [0.5])
    assert mean == approx(np.full((4, 1), 0.5))
    assert sigma == approx(np.full((4, 1), 0.01))

    negative = FunctionModel(
        lambda s, a: s,
        lambda s, a: -np.ones_like(s),
        1.0,
        NoiseModel.zero(1),
        Box.symmetric(1.0),
    )
    with raises(ValueError):
        negative.predict([0.0], [0.0])


def test_hallucinated_step(linear_model):
    from confsafe.models import hallucinated_step

    assert hallucinated_step(linear_model, [0.2], [0.1], [1.0]) == approx([0.21])
    assert hallucinated_step(linear_model, [0.2], [0.1], [-0.5]) == approx([0.195])
    result = hallucinated_step(linear_model, [0.2], [0.1], [1.0], omega=[0.05])
    assert result == approx([0.26])
    with raises(ValueError):
        hallucinated_step(linear_model, [0.2], [0.1], [1.5])


def test_hallucinated_transition(linear_model):
    from confsafe.models import hallucinated_transition

    transition = hallucinated_transition(linear_model, lambda s, a: -np.ones_like(s))
    assert transition([0.2], [0.1]) == approx([0.19])
    batch = transition(np.array([[0.0], [0.4]]), np.array([[0.0], [0.0]]), rng=0)
    assert batch[:, 0] == approx([-0.01, 0.19])


def test_ensemble_learns_dynamics(integrator, fitted):
    model, losses = fitted
    assert list(losses.columns) == ["member", "epoch", "loss"]
    assert len(losses) == 3 * 300
    for _, member in losses.groupby("member"):
        assert member["loss"].iloc[-1] < 0.1 * member["loss"].iloc[0]

    states = np.random.default_rng(5).uniform(-0.8, 0.8, (50, 2))
    actions = np.random.default_rng(6).uniform(-0.8, 0.8, (50, 1))
    mean, sigma = model.predict(states, actions)
    assert mean.shape == sigma.shape == (50, 2)
    assert np.all(sigma >= 0)
    assert np.abs(mean - integrator.transition(states, actions)).mean() < 0.02


def test_ensemble_warns_outside_training_range(fitted):
    from confsafe.models import InputRangeWarning

    model, _ = fitted
    assert model.out_of_range_count == 0
    with warns(InputRangeWarning):
        model.predict([5.0, 5.0], [0.0])
    assert model.out_of_range_count == 1
    model.predict(np.full((3, 2), 5.0), [0.0])
    assert model.out_of_range_count == 4


def test_ensemble_document(fitted):
    from confsafe.models import EnsembleModel, model_from_document

    model, _ = fitted
    document = model.to_document()
    assert document["type"] == "ensemble"
    loaded = model_from_document(document)
    assert isinstance(loaded, EnsembleModel)
    assert len(loaded.members) == 3
    states = np.array([[0.1, -0.2], [0.3, 0.4]])
    actions = np.array([[0.5], [-0.5]])
    expected = model.predict(states, actions)
    actual = loaded.predict(states, actions)
    assert actual[0] == approx(expected[0])
    assert actual[1] == approx(expected[1])


def test_unfitted_ensemble_raises(integrator, buffer):
    from confsafe.models import (
        DivergenceError,
        EnsembleModel,
        ReplayBuffer,
        fit_ensemble,
    )

    model = EnsembleModel(2, 1, integrator.noise, integrator.action_box, members=2)
    assert not model.is_fitted
    with raises(RuntimeError):
        model.predict([0.0, 0.0], [0.0])
    with raises(RuntimeError):
        model.to_document()
    with raises(ValueError):
        fit_ensemble(model, ReplayBuffer(2, 1))
    with raises(DivergenceError) as error:
        fit_ensemble(model, buffer, epochs=3, divergence_threshold=1e-12, rng=0)
    assert error.value.member == 0
    assert error.value.epoch == 0
    with raises(ValueError):
        EnsembleModel(2, 1, integrator.noise, integrator.action_box, members=0)


def test_fit_beta():
    from confsafe.core import Box, NoiseModel
    from confsafe.models import FunctionModel, fit_beta

    model = FunctionModel(
        lambda s, a: s + 0.005,
        lambda s, a: np.full_like(s, 0.01),
        1.0,
        NoiseModel.zero(2),
        Box.symmetric(1.0),
    )
    states = np.random.default_rng(0).normal(size=(100, 2))
    beta = fit_beta(model, lambda s, a: s, states, [0.0])
    assert beta == approx(0.5, rel=1e-3)


def test_model_registry(integrator):
    from confsafe.models import EnsembleModel, OraclePerturbedModel, register_model

    oracle = register_model.build(dict(name="oracle"), environment=integrator, rng=0)
    assert isinstance(oracle, OraclePerturbedModel)
    assert oracle.sigma == approx([1e-4, 1e-4])
    assert oracle.beta == 2.0

    ensemble = register_model.build(
        dict(name="ensemble", members=2, hidden=[8]), environment=integrator, rng=0
    )
    assert isinstance(ensemble, EnsembleModel)
    assert len(ensemble.members) == 2
    assert ensemble.training.fit_beta
    assert ensemble.beta == 2.0
    fixed = register_model.build(
        dict(name="ensemble", beta=3.0), environment=integrator, rng=0
    )
    assert not fixed.training.fit_beta
    assert fixed.beta == 3.0


def test_oracle_document(integrator):
    from confsafe.models import OraclePerturbedModel, model_from_document

    model = OraclePerturbedModel(integrator, [0.01, 0.02], beta=1.5)
    with raises(ValueError):
        model_from_document(model.to_document())
    loaded = model_from_document(model.to_document(), integrator)
    assert loaded.sigma == approx([0.01, 0.02])
    assert loaded.beta == 1.5
    with raises(ValueError):
        model_from_document(dict(type="gaussian_process"))


def test_ensemble_learns_pitch_dynamics():
    from confsafe.core import Box
    from confsafe.envs import PitchControlEnv
    from confsafe.models import (
        EnsembleModel,
        ReplayBuffer,
        check_calibration,
        fit_beta,
        fit_ensemble,
    )

    env = PitchControlEnv(noise_std=1e-3)
    region = Box([-2.5, -0.015, -0.6], [2.5, 0.015, 0.2])

    def sampler(generator, count, shrink=1.0):
        states = Box(shrink * region.lower, shrink * region.upper).sample(
            generator, count
        )
        return states, shrink * env.action_box.sample(generator, count)

    def held_out(generator, count):
        return sampler(generator, count, shrink=0.9)

    generator = np.random.default_rng(0)
    states, actions = sampler(generator, 2000)
    buffer = ReplayBuffer(3, 1, capacity=2000)
    buffer.add(states, actions, env.step(states, actions, generator))
    model = EnsembleModel(
        3, 1, env.noise, env.action_box, members=3, hidden=[32, 32], rng=0
    )
    fit_ensemble(model, buffer, epochs=300, learning_rate=1e-2, rng=0)

    states, actions = held_out(np.random.default_rng(1), 500)
    truth = env.transition(states, actions)
    error = np.sqrt(np.mean((model.mean(states, actions) - truth) ** 2))
    assert error <= 10 * 1e-3
    assert error < 0.5 * np.sqrt(np.mean((states - truth) ** 2))

    model.beta = fit_beta(model, env, states, actions)
    assert check_calibration(model, env, 500, rng=2, sampler=held_out) >= 0.95
