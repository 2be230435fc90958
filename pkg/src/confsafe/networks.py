"""Small fully connected networks trained with hand-written backpropagation."""
from typing import Dict, List, Optional, Sequence, Text, Tuple

import numpy as np
from scipy.special import expit

from confsafe.core import Seed, as_generator


def swish(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def swish_gradient(x: np.ndarray) -> np.ndarray:
    sigmoid = expit(x)
    return sigmoid * (1 + x * (1 - sigmoid))


class MultilayerPerceptron:
    """Fully connected network with Swish hidden activations and a linear output.

    Args:
        sizes: number of units in each layer, inputs first and outputs last.
        rng: source of randomness for the Glorot-normal initial weights.
    """

    def __init__(self, sizes: Sequence[int], rng: Seed = None):
        if len(sizes) < 2 or any(int(u) < 1 for u in sizes):
            raise ValueError(f"Invalid layer sizes {list(sizes)}")
        generator = as_generator(rng)
        self.sizes = [int(u) for u in sizes]
        self.weights = [
            generator.normal(0, np.sqrt(2 / (n + m)), (n, m))
            for n, m in zip(self.sizes[:-1], self.sizes[1:])
        ]
        self.biases = [np.zeros(m) for m in self.sizes[1:]]

    @property
    def parameters(self) -> List[np.ndarray]:
        """Weights then biases, the arrays updated in place by optimizers."""
        return self.weights + self.biases

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(u)) for u in self.parameters)

    def forward(self, inputs: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Output and the pre-activations needed by :py:meth:`backward`."""
        activation = np.atleast_2d(inputs)
        cache = [activation]
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            preactivation = activation @ weight + bias
            cache.append(preactivation)
            last = i == len(self.weights) - 1
            activation = preactivation if last else swish(preactivation)
        return activation, cache

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return self.forward(inputs)[0]

    def backward(
        self, cache: List[np.ndarray], output_gradient: np.ndarray
    ) -> List[np.ndarray]:
        """Gradients with respect to :py:attr:`parameters`."""
        weight_gradients, bias_gradients = [], []
        gradient = output_gradient
        for i in reversed(range(len(self.weights))):
            inputs = cache[i] if i == 0 else swish(cache[i])
            weight_gradients.append(inputs.T @ gradient)
            bias_gradients.append(gradient.sum(axis=0))
            if i > 0:
                gradient = (gradient @ self.weights[i].T) * swish_gradient(cache[i])
        return weight_gradients[::-1] + bias_gradients[::-1]

    def to_arrays(self) -> Dict[Text, np.ndarray]:
        result = {f"weight_{i}": w for i, w in enumerate(self.weights)}
        result.update({f"bias_{i}": b for i, b in enumerate(self.biases)})
        return result

    @classmethod
    def from_arrays(cls, arrays: Dict[Text, np.ndarray]) -> "MultilayerPerceptron":
        count = sum(1 for k in arrays if k.startswith("weight_"))
        weights = [np.asarray(arrays[f"weight_{i}"], dtype=float) for i in range(count)]
        result = cls([weights[0].shape[0]] + [w.shape[1] for w in weights])
        result.weights = weights
        result.biases = [
            np.asarray(arrays[f"bias_{i}"], dtype=float).reshape(-1)
            for i in range(count)
        ]
        return result


class Adam:
    """Adam with L2 weight decay on the weight matrices.

    Args:
        parameters: arrays to update in place.
        learning_rate: step size.
        weight_decay: L2 penalty added to the gradient of decayed parameters.
        decay: which parameters are decayed. Defaults to all of them.
    """

    def __init__(
        self,
        parameters: List[np.ndarray],
        learning_rate: float = 5e-4,
        weight_decay: float = 1e-4,
        decay: Optional[Sequence[bool]] = None,
        betas: Tuple[float, float] = (0.9, 0.999),
        epsilon: float = 1e-8,
    ):
        self.parameters = parameters
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.decay = [True] * len(parameters) if decay is None else list(decay)
        self.betas = betas
        self.epsilon = epsilon
        self.moments = [np.zeros_like(p) for p in parameters]
        self.squares = [np.zeros_like(p) for p in parameters]
        self.steps = 0

    def step(self, gradients: Sequence[np.ndarray]):
        beta1, beta2 = self.betas
        self.steps += 1
        for parameter, gradient, moment, square, decayed in zip(
            self.parameters, gradients, self.moments, self.squares, self.decay
        ):
            if decayed and self.weight_decay:
                gradient = gradient + self.weight_decay * parameter
            moment *= beta1
            moment += (1 - beta1) * gradient
            square *= beta2
            square += (1 - beta2) * gradient ** 2
            corrected = moment / (1 - beta1 ** self.steps)
            scale = np.sqrt(square / (1 - beta2 ** self.steps)) + self.epsilon
            parameter -= self.learning_rate * corrected / scale


def mean_squared_error(
    network: MultilayerPerceptron, inputs: np.ndarray, targets: np.ndarray
) -> Tuple[float, List[np.ndarray]]:
    """Loss and its gradients with respect to the network's parameters."""
    outputs, cache = network.forward(inputs)
    residuals = outputs - targets
    loss = float(np.mean(residuals ** 2))
    gradients = network.backward(cache, 2 * residuals / residuals.size)
    return loss, gradients
