from dataclasses import asdict, dataclass
from logging import getLogger
from pathlib import Path
from typing import Callable, List, Mapping, Optional, Sequence, Tuple, Union
from warnings import warn

import numpy as np
import pandas as pd

from confsafe.autoconf import Registry
from confsafe.core import Box, NoiseModel, Seed, as_batch, as_generator

__doc__ = Path(__file__).with_suffix(".rst").read_text()

logger = getLogger(__name__)

register_model = Registry("model")
"""Registry of calibrated model sets."""

SIGMA_FLOOR = 1e-6
"""Added to standard deviations before dividing by them."""


class InputRangeWarning(UserWarning):
    """A learned model was queried outside the range of its training inputs."""


class DivergenceError(RuntimeError):
    """Training loss exploded or became non-finite."""

    def __init__(self, member: int, epoch: int, loss: float):
        super().__init__(
            f"Ensemble member {member} diverged at epoch {epoch} with loss {loss}"
        )
        self.member = member
        self.epoch = epoch
        self.loss = loss


class CalibratedModelSet:
    """Set of plausible dynamics ``{f: |f(x, u) - μ(x, u)| <= β σ(x, u)}``.

    Derived classes implement :py:meth:`predict`. Calling the model steps its nominal
    mean plus noise, so that a model can stand in for an environment in roll-outs.
    """

    beta: float
    noise: NoiseModel
    action_box: Box
    state_dim: int
    action_dim: int

    def predict(self, states, actions) -> Tuple[np.ndarray, np.ndarray]:
        """Nominal mean and per-output standard deviation."""
        raise NotImplementedError()

    def mean(self, states, actions) -> np.ndarray:
        return self.predict(states, actions)[0]

    def stddev(self, states, actions) -> np.ndarray:
        return self.predict(states, actions)[1]

    def __call__(self, states, actions, rng: Seed = None) -> np.ndarray:
        batch, single = as_batch(states)
        mean = np.atleast_2d(self.mean(batch, as_batch(actions)[0]))
        result = mean + self.noise.sample(rng, len(mean))
        return result[0] if single else result

    def to_document(self) -> Mapping:
        raise NotImplementedError()


def _broadcast_actions(batch: np.ndarray, actions) -> np.ndarray:
    controls, _ = as_batch(actions)
    if len(controls) == 1 and len(batch) > 1:
        controls = np.repeat(controls, len(batch), axis=0)
    return controls


class OraclePerturbedModel(CalibratedModelSet):
    """Model set built around known dynamics, calibrated by construction.

    The mean is the true deterministic transition plus a smooth bias whose magnitude
    never exceeds ``bias_fraction * beta * sigma``, so the truth always lies inside the
    set.

    Args:
        truth: environment whose deterministic transition is wrapped.
        sigma: standard deviation per state component.
        beta: scaling of the confidence set.
        bias_fraction: bias magnitude relative to ``beta * sigma``, in ``[0, 1]``.
        bias_frequency: spatial frequency of the bias.
        sigma_floor: smallest standard deviation.
    """

    def __init__(
        self,
        truth,
        sigma: Union[float, Sequence[float]],
        beta: float = 2.0,
        bias_fraction: float = 0.5,
        bias_frequency: float = 3.0,
        sigma_floor: float = SIGMA_FLOOR,
    ):
        if not 0 <= bias_fraction <= 1:
            raise ValueError(f"bias_fraction must lie in [0, 1], got {bias_fraction}")
        if beta < 0:
            raise ValueError(f"beta must be non-negative, got {beta}")
        self.truth = truth
        self.state_dim = truth.state_dim
        self.action_dim = truth.action_dim
        self.sigma = np.maximum(
            np.broadcast_to(np.asarray(sigma, dtype=float), self.state_dim), sigma_floor
        )
        self.beta = float(beta)
        self.bias_fraction = float(bias_fraction)
        self.bias_frequency = float(bias_frequency)
        self.noise = truth.noise
        self.action_box = truth.action_box

    def bias(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        phase = self.bias_frequency * (states.sum(axis=1) + actions.sum(axis=1))
        offsets = np.arange(self.state_dim)
        return (
            self.bias_fraction
            * self.beta
            * self.sigma
            * np.sin(phase[:, None] + offsets[None, :])
        )

    def predict(self, states, actions) -> Tuple[np.ndarray, np.ndarray]:
        batch, single = as_batch(states)
        controls = _broadcast_actions(batch, actions)
        mean = self.truth.transition(batch, controls) + self.bias(batch, controls)
        sigma = np.broadcast_to(self.sigma, mean.shape).copy()
        return (mean[0], sigma[0]) if single else (mean, sigma)

    def to_document(self) -> Mapping:
        return dict(
            type="oracle",
            sigma=self.sigma,
            beta=self.beta,
            bias_fraction=self.bias_fraction,
            bias_frequency=self.bias_frequency,
        )


class FunctionModel(CalibratedModelSet):
    """Model set defined by explicit mean and standard-deviation functions.

    Both functions take batched states and actions and return ``(n, state_dim)``
    arrays.
    """

    def __init__(
        self,
        mean: Callable[[np.ndarray, np.ndarray], np.ndarray],
        stddev: Callable[[np.ndarray, np.ndarray], np.ndarray],
        beta: float,
        noise: NoiseModel,
        action_box: Box,
    ):
        self._mean = mean
        self._stddev = stddev
        self.beta = float(beta)
        self.noise = noise
        self.action_box = action_box
        self.state_dim = noise.dimension
        self.action_dim = action_box.dimension

    def predict(self, states, actions) -> Tuple[np.ndarray, np.ndarray]:
        batch, single = as_batch(states)
        controls = _broadcast_actions(batch, actions)
        mean = np.asarray(self._mean(batch, controls), dtype=float)
        mean = mean.reshape(len(batch), -1)
        sigma = np.asarray(self._stddev(batch, controls), dtype=float)
        sigma = np.broadcast_to(sigma.reshape(len(batch), -1), mean.shape).copy()
        if np.any(sigma < 0):
            raise ValueError("Standard deviations must be non-negative")
        return (mean[0], sigma[0]) if single else (mean, sigma)


def check_eta(eta: np.ndarray, tolerance: float = 1e-12) -> np.ndarray:
    """Rejects hallucination inputs outside the unit box."""
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.abs(eta) <= 1 + tolerance):
        raise ValueError(
            f"Hallucination inputs must lie in [-1, 1], got {np.abs(eta).max()}"
        )
    return np.clip(eta, -1, 1)


def hallucinated_step(
    model: CalibratedModelSet, states, actions, eta, omega=None
) -> np.ndarray:
    """Plausible next state ``μ + β diag(σ) η + ω``."""
    batch, single = as_batch(states)
    mean, sigma = model.predict(batch, actions)
    eta = check_eta(np.broadcast_to(eta, mean.shape))
    result = mean + model.beta * sigma * eta
    if omega is not None:
        result = result + np.broadcast_to(np.asarray(omega, dtype=float), result.shape)
    return result[0] if single else result


def hallucinated_transition(model: CalibratedModelSet, eta_policy: Callable):
    """Dynamics of the model set under a fixed hallucinating policy.

    The returned function maps batched ``(states, actions)`` to the plausible mean next
    states. Given a random source as third argument, it also adds the model's noise.
    """

    def transition(states, actions, rng: Seed = None) -> np.ndarray:
        batch, single = as_batch(states)
        controls = _broadcast_actions(batch, actions)
        eta = np.asarray(eta_policy(batch, controls), dtype=float)
        result = hallucinated_step(model, batch, controls, eta.reshape(len(batch), -1))
        if rng is not None:
            result = result + model.noise.sample(rng, len(result))
        return result[0] if single else result

    return transition


class ReplayBuffer:
    """First-in first-out store of transitions ``(x, u, x')``.

    Args:
        state_dim: dimension of the states.
        action_dim: dimension of the actions.
        capacity: oldest transitions are dropped beyond this size.
    """

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 100000):
        if capacity < 1:
            raise ValueError(f"Replay buffer capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.position = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, states, actions, next_states):
        """Appends one or several transitions."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        next_states = np.atleast_2d(np.asarray(next_states, dtype=float))
        if not (len(states) == len(actions) == len(next_states)):
            raise ValueError("States, actions and next states differ in number")
        for x, u, xp in zip(states, actions, next_states):
            self.states[self.position] = x
            self.actions[self.position] = u
            self.next_states[self.position] = xp
            self.position = (self.position + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def transitions(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stored transitions, oldest first."""
        order = (np.arange(self.size) + self.position - self.size) % self.capacity
        return self.states[order], self.actions[order], self.next_states[order]

    def sample(self, count: int, rng: Seed = None):
        indices = as_generator(rng).choice(self.size, size=count, replace=True)
        return self.states[indices], self.actions[indices], self.next_states[indices]

    def to_dataframe(self) -> pd.DataFrame:
        states, actions, next_states = self.transitions()
        data = {}
        for prefix, array in (("x_", states), ("u_", actions), ("xp_", next_states)):
            data.update({f"{prefix}{i}": array[:, i] for i in range(array.shape[1])})
        return pd.DataFrame(data)

    @classmethod
    def from_dataframe(
        cls, table: pd.DataFrame, capacity: Optional[int] = None
    ) -> "ReplayBuffer":
        from confsafe.schema import TRANSITIONS, follows_schema, prefixed_columns

        follows_schema(table, TRANSITIONS, raise_exception=True)
        states = table[prefixed_columns(table, "x_")].to_numpy(dtype=float)
        actions = table[prefixed_columns(table, "u_")].to_numpy(dtype=float)
        next_states = table[prefixed_columns(table, "xp_")].to_numpy(dtype=float)
        result = cls(states.shape[1], actions.shape[1], capacity or max(len(table), 1))
        result.add(states, actions, next_states)
        return result


@dataclass
class TrainingSettings:
    """Hyperparameters of ensemble training."""

    epochs: int = 100
    """Full-batch epochs of the initial fit."""
    refit_epochs: int = 20
    """Full-batch epochs of each refit after an episode."""
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    holdout: float = 0.2
    """Fraction of the buffer held out to fit beta."""
    bootstrap: bool = True
    """Whether members train on bootstrap resamples of the buffer."""
    fit_beta: bool = False
    """Whether beta is fitted on held-out transitions after each fit."""


class EnsembleModel(CalibratedModelSet):
    """Deterministic ensemble of networks predicting state increments.

    The mean is the state plus the average member prediction. The standard deviation is
    the member disagreement (population standard deviation). Inputs and increments are
    normalized with statistics of the training data.
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        noise: NoiseModel,
        action_box: Box,
        beta: float = 2.0,
        members: int = 5,
        hidden: Sequence[int] = (32, 32),
        training: Optional[TrainingSettings] = None,
        rng: Seed = None,
    ):
        from confsafe.networks import MultilayerPerceptron

        if members < 1:
            raise ValueError(f"An ensemble needs at least one member, got {members}")
        generator = as_generator(rng)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.noise = noise
        self.action_box = action_box
        self.beta = float(beta)
        self.hidden = [int(u) for u in hidden]
        self.training = training or TrainingSettings()
        sizes = [state_dim + action_dim] + self.hidden + [state_dim]
        self.members = [MultilayerPerceptron(sizes, generator) for _ in range(members)]
        self.input_scaler = None
        self.target_scaler = None
        self.input_range: Optional[Tuple[np.ndarray, np.ndarray]] = None
        self.out_of_range_count = 0

    @property
    def is_fitted(self) -> bool:
        return self.input_scaler is not None

    def _inputs(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.concatenate((states, actions), axis=1)

    def fit_normalization(self, states, actions, next_states):
        from sklearn.preprocessing import StandardScaler

        inputs = self._inputs(states, actions)
        self.input_scaler = StandardScaler().fit(inputs)
        self.target_scaler = StandardScaler().fit(next_states - states)
        self.input_range = (inputs.min(axis=0), inputs.max(axis=0))

    def _check_range(self, inputs: np.ndarray):
        low, high = self.input_range
        outside = int(np.any((inputs < low) | (inputs > high), axis=1).sum())
        if outside:
            if self.out_of_range_count == 0:
                warn(
                    "Ensemble queried outside the range of its training inputs",
                    InputRangeWarning,
                )
            self.out_of_range_count += outside

    def member_increments(self, states, actions) -> np.ndarray:
        """Increments predicted by each member, shape ``(members, n, state_dim)``."""
        if not self.is_fitted:
            raise RuntimeError("Ensemble must be fitted before making predictions")
        inputs = self._inputs(states, actions)
        self._check_range(inputs)
        normalized = self.input_scaler.transform(inputs)
        return np.stack(
            [self.target_scaler.inverse_transform(m(normalized)) for m in self.members]
        )

    def predict(self, states, actions) -> Tuple[np.ndarray, np.ndarray]:
        batch, single = as_batch(states)
        controls = _broadcast_actions(batch, actions)
        increments = self.member_increments(batch, controls)
        mean = batch + increments.mean(axis=0)
        sigma = increments.std(axis=0)
        return (mean[0], sigma[0]) if single else (mean, sigma)

    def to_document(self) -> Mapping:
        if not self.is_fitted:
            raise RuntimeError("Only fitted ensembles can be saved")
        return dict(
            type="ensemble",
            beta=self.beta,
            hidden=self.hidden,
            training=asdict(self.training),
            noise=dict(kind=self.noise.kind.name.lower(), scale=self.noise.scale),
            action_box=dict(lower=self.action_box.lower, upper=self.action_box.upper),
            normalization=dict(
                input_mean=self.input_scaler.mean_,
                input_scale=self.input_scaler.scale_,
                target_mean=self.target_scaler.mean_,
                target_scale=self.target_scaler.scale_,
                input_low=self.input_range[0],
                input_high=self.input_range[1],
            ),
            members=[m.to_arrays() for m in self.members],
        )

    @classmethod
    def from_document(cls, document: Mapping) -> "EnsembleModel":
        from sklearn.preprocessing import StandardScaler

        from confsafe.networks import MultilayerPerceptron

        members = [MultilayerPerceptron.from_arrays(m) for m in document["members"]]
        state_dim = members[0].sizes[-1]
        action_box = Box(**document["action_box"])
        result = cls(
            state_dim,
            members[0].sizes[0] - state_dim,
            NoiseModel(**document["noise"]),
            action_box,
            beta=document["beta"],
            members=len(members),
            hidden=document["hidden"],
            training=TrainingSettings(**document["training"]),
        )
        result.members = members
        normalization = document["normalization"]
        for name, prefix in (("input_scaler", "input"), ("target_scaler", "target")):
            scaler = StandardScaler()
            scaler.mean_ = np.asarray(normalization[f"{prefix}_mean"])
            scaler.scale_ = np.asarray(normalization[f"{prefix}_scale"])
            scaler.var_ = scaler.scale_ ** 2
            scaler.n_features_in_ = scaler.mean_.size
            setattr(result, name, scaler)
        result.input_range = (normalization["input_low"], normalization["input_high"])
        return result


def fit_ensemble(
    model: EnsembleModel,
    buffer: ReplayBuffer,
    epochs: int = 100,
    learning_rate: float = 5e-4,
    weight_decay: float = 1e-4,
    rng: Seed = None,
    bootstrap: bool = True,
    divergence_threshold: float = 1e6,
) -> pd.DataFrame:
    """Trains each member on the buffer with full-batch Adam.

    Normalization statistics are refreshed from the whole buffer. Each member trains on
    its own bootstrap resample when ``bootstrap`` is true.

    Returns:
        Long table of normalized mean-squared losses with columns ``member``, ``epoch``
        and ``loss``.
    """
    from sklearn.utils import resample

    from confsafe.networks import Adam, mean_squared_error

    if len(buffer) == 0:
        raise ValueError("Cannot fit an ensemble on an empty replay buffer")
    generator = as_generator(rng)
    states, actions, next_states = buffer.transitions()
    model.fit_normalization(states, actions, next_states)
    inputs = model.input_scaler.transform(model._inputs(states, actions))
    targets = model.target_scaler.transform(next_states - states)

    rows: List[Tuple[int, int, float]] = []
    for index, member in enumerate(model.members):
        member_inputs, member_targets = inputs, targets
        if bootstrap and len(inputs) > 1:
            member_inputs, member_targets = resample(
                inputs, targets, random_state=int(generator.integers(2 ** 31))
            )
        decay = [True] * len(member.weights) + [False] * len(member.biases)
        optimizer = Adam(member.parameters, learning_rate, weight_decay, decay)
        for epoch in range(epochs):
            loss, gradients = mean_squared_error(member, member_inputs, member_targets)
            if not np.isfinite(loss) or loss > divergence_threshold:
                raise DivergenceError(index, epoch, loss)
            optimizer.step(gradients)
            rows.append((index, epoch, loss))
        logger.debug("ensemble member %i: final loss %g", index, rows[-1][-1])
    return pd.DataFrame(rows, columns=["member", "epoch", "loss"])


def _truth_transition(truth) -> Callable:
    return getattr(truth, "transition", truth)


def fit_beta(
    model: CalibratedModelSet,
    truth,
    states,
    actions,
    quantile: float = 0.99,
    sigma_floor: float = SIGMA_FLOOR,
) -> float:
    """Smallest scaling covering a quantile of the samples jointly over components.

    Args:
        model: model set whose standard deviation is rescaled.
        truth: environment or deterministic transition ``(states, actions) -> next``.
        states: sampled states.
        actions: sampled actions.
        quantile: fraction of samples which must lie within the set.
        sigma_floor: added to the standard deviation to avoid divisions by zero.
    """
    batch, _ = as_batch(states)
    controls = _broadcast_actions(batch, actions)
    mean, sigma = model.predict(batch, controls)
    errors = np.abs(_truth_transition(truth)(batch, controls) - mean)
    ratios = (errors / (sigma + sigma_floor)).max(axis=1)
    return float(np.quantile(ratios, quantile, method="higher"))


def check_calibration(
    model: CalibratedModelSet,
    truth,
    sample_count: int = 1000,
    rng: Seed = None,
    sampler: Optional[Callable] = None,
) -> float:
    """Fraction of sampled inputs where the truth lies within the model set.

    Args:
        model: model set to check.
        truth: environment or deterministic transition ``(states, actions) -> next``.
        sample_count: number of sampled state-action pairs.
        rng: source of randomness.
        sampler: ``sampler(generator, n) -> (states, actions)``. Defaults to uniform
            samples over the environment's state and action boxes.
    """
    generator = as_generator(rng)
    if sampler is None:
        states = truth.state_box.sample(generator, sample_count)
        actions = truth.action_box.sample(generator, sample_count)
    else:
        states, actions = sampler(generator, sample_count)
    mean, sigma = model.predict(states, actions)
    errors = np.abs(_truth_transition(truth)(states, actions) - mean)
    inside = np.all(errors <= model.beta * sigma + 1e-12, axis=1)
    return float(inside.mean())


@register_model(name="oracle")
def oracle(
    environment,
    rng,
    sigma: Optional[List[float]] = None,
    beta: float = 2.0,
    bias_fraction: float = 0.5,
    bias_frequency: float = 3.0,
) -> OraclePerturbedModel:
    """Model set around the true dynamics, calibrated by construction.

    Args:
        sigma: standard deviation per state component. Defaults to the environment's
            noise scale, with a floor of ``1e-4``.
        beta: scaling of the confidence set.
        bias_fraction: magnitude of the mean's bias relative to ``beta * sigma``.
        bias_frequency: spatial frequency of the mean's bias.
    """
    if sigma is None:
        sigma = np.maximum(environment.noise.scale, 1e-4)
    return OraclePerturbedModel(environment, sigma, beta, bias_fraction, bias_frequency)


@register_model(name="ensemble")
def ensemble(
    environment,
    rng,
    members: int = 5,
    hidden: List[int] = [32, 32],
    beta: Optional[float] = None,
    epochs: int = 100,
    refit_epochs: int = 20,
    learning_rate: float = 5e-4,
    weight_decay: float = 1e-4,
    holdout: float = 0.2,
) -> EnsembleModel:
    """Deterministic ensemble of networks learned from the replay buffer.

    Args:
        members: number of networks.
        hidden: width of each hidden layer.
        beta: scaling of the confidence set. If not given, it is fitted on held-out
            transitions, or defaults to 2 when the fit is not possible.
        epochs: full-batch training epochs of the initial fit.
        refit_epochs: training epochs after each episode.
        learning_rate: Adam learning rate.
        weight_decay: L2 penalty on the weights.
        holdout: fraction of the buffer held out to fit beta.
    """
    training = TrainingSettings(
        epochs=epochs,
        refit_epochs=refit_epochs,
        learning_rate=learning_rate,
        weight_decay=weight_decay,
        holdout=holdout,
        fit_beta=beta is None,
    )
    return EnsembleModel(
        environment.state_dim,
        environment.action_dim,
        environment.noise,
        environment.action_box,
        beta=2.0 if beta is None else beta,
        members=members,
        hidden=hidden,
        training=training,
        rng=rng,
    )


def model_from_document(document: Mapping, environment=None) -> CalibratedModelSet:
    """Recreates a model set saved with ``to_document``."""
    if document.get("type") == "ensemble":
        return EnsembleModel.from_document(document)
    if document.get("type") == "oracle":
        if environment is None:
            raise ValueError("Oracle models need their environment to be loaded")
        return OraclePerturbedModel(
            environment,
            document["sigma"],
            document["beta"],
            document["bias_fraction"],
            document["bias_frequency"],
        )
    raise ValueError(f"Unknown model type {document.get('type')}")
