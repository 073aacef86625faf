"""Posterior energies and gradient oracles.

Every model exposes the same duck-typed surface used by the samplers:

``dim``          number of parameters
``n_data``       dataset size (0 for targets without data)
``grad_scale``   factor relating the energy gradient to a per-example gradient
``energy``       U(theta)
``grad``         exact full-data gradient of U
``stoch_grad``   minibatch estimate (N/|B|) * sum_batch grad(-log p(x|theta)) + grad(-log p(theta))
``initial_theta`` starting point

Classifiers additionally provide ``predict_proba(theta, inputs)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quant import NO_QUANT, QuantizerSpec, quantize_det

DEFAULT_PRIOR_VARIANCE = 1.0 / 6.0


def _check_dim(theta, dim: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (dim,):
        raise ValueError(f"expected parameter vector of shape ({dim},), got {theta.shape}")
    return theta


def _check_batch(batch) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("empty minibatch")
    return batch


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


class GaussianTarget:
    """Isotropic Gaussian N(mean, variance * I); U = |theta - mean|^2 / (2 variance)."""

    n_data = 0
    grad_scale = 1.0

    def __init__(self, mean, variance: float = 1.0):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        if not variance > 0:
            raise ValueError("variance must be positive")
        self.variance = float(variance)
        self.dim = self.mean.size

    @classmethod
    def standard(cls, dim: int) -> GaussianTarget:
        return cls(np.zeros(dim), 1.0)

    def energy(self, theta) -> float:
        diff = _check_dim(theta, self.dim) - self.mean
        return float(diff @ diff) / (2.0 * self.variance)

    def grad(self, theta) -> np.ndarray:
        return self.stoch_grad(_check_dim(theta, self.dim))

    def stoch_grad(self, theta, batch=None, rng=None) -> np.ndarray:
        # no likelihood term: the minibatch estimate is exact
        diff = theta - self.mean
        return diff if self.variance == 1.0 else diff / self.variance

    def initial_theta(self, rng=None) -> np.ndarray:
        return np.zeros(self.dim)


class LogisticRegressionModel:
    """Multinomial logistic regression with an isotropic Gaussian prior.

    Parameters are the ``classes x features`` weight matrix flattened row-major.
    """

    def __init__(self, features, labels, n_classes: int, prior_variance: float = DEFAULT_PRIOR_VARIANCE):
        self.x = np.ascontiguousarray(features, dtype=np.float64)
        self.y = np.asarray(labels, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError("features must be (n, d) and labels (n,)")
        self.n_classes = int(n_classes)
        self.n_features = self.x.shape[1]
        self.prior_variance = float(prior_variance)
        self.dim = self.n_classes * self.n_features
        self.n_data = self.x.shape[0]
        self.grad_scale = float(self.n_data)

    def _weights(self, theta) -> np.ndarray:
        return _check_dim(theta, self.dim).reshape(self.n_classes, self.n_features)

    def energy(self, theta) -> float:
        w = self._weights(theta)
        logp = log_softmax(self.x @ w.T)
        nll = -logp[np.arange(self.n_data), self.y].sum()
        return float(nll + (w * w).sum() / (2.0 * self.prior_variance))

    def _data_grad(self, w, x, y) -> np.ndarray:
        err = softmax(x @ w.T)
        err[np.arange(len(y)), y] -= 1.0
        return (err.T @ x).ravel()

    def grad(self, theta) -> np.ndarray:
        theta = _check_dim(theta, self.dim)
        w = theta.reshape(self.n_classes, self.n_features)
        return self._data_grad(w, self.x, self.y) + theta / self.prior_variance

    def stoch_grad(self, theta, batch, rng=None) -> np.ndarray:
        batch = _check_batch(batch)
        w = theta.reshape(self.n_classes, self.n_features)
        data = self._data_grad(w, self.x[batch], self.y[batch])
        return (self.n_data / batch.size) * data + theta / self.prior_variance

    def predict_proba(self, theta, inputs) -> np.ndarray:
        return softmax(np.asarray(inputs, dtype=np.float64) @ self._weights(theta).T)

    def initial_theta(self, rng=None) -> np.ndarray:
        return np.zeros(self.dim)


@dataclass
class ForwardCache:
    """Per-layer pre-activations and (quantized) activations of one batch.

    ``activations[0]`` is the input; ``activations[-1]`` the output logits.
    """

    activations: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)


class MlpModel:
    """Fully connected ReLU network trained through quantized forward/backward passes.

    Layer ``l`` computes ``f_l(a) = relu(a @ W_l + b_l)`` (no ReLU on the output
    layer). Activations pass through ``act_quant`` and backpropagated errors
    through ``err_quant``; gradient quantization is left to the sampler, except
    when :meth:`backward_quantized` is called with an explicit ``grad_quant``.
    The loss is the batch-mean cross entropy; the prior is N(0, prior_variance)
    on every weight and bias.
    """

    def __init__(
        self,
        features,
        labels,
        n_classes: int,
        hidden: tuple[int, ...] = (100,),
        prior_variance: float = DEFAULT_PRIOR_VARIANCE,
        act_quant: QuantizerSpec = NO_QUANT,
        err_quant: QuantizerSpec = NO_QUANT,
    ):
        self.x = np.ascontiguousarray(features, dtype=np.float64)
        self.y = np.asarray(labels, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError("features must be (n, d) and labels (n,)")
        self.n_classes = int(n_classes)
        self.sizes = (self.x.shape[1], *hidden, self.n_classes)
        self.prior_variance = float(prior_variance)
        self.act_quant = act_quant
        self.err_quant = err_quant
        self.shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.shapes += [(fan_in, fan_out), (fan_out,)]
        self._offsets = np.cumsum([0] + [int(np.prod(s)) for s in self.shapes])
        self.dim = int(self._offsets[-1])
        self.n_data = self.x.shape[0]
        self.grad_scale = float(self.n_data)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def unpack(self, theta) -> list[np.ndarray]:
        theta = _check_dim(theta, self.dim)
        return [
            theta[a:b].reshape(shape)
            for a, b, shape in zip(self._offsets[:-1], self._offsets[1:], self.shapes)
        ]

    def pack(self, params) -> np.ndarray:
        return np.concatenate([np.ravel(p) for p in params])

    def initial_theta(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        params = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params += [rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)]
        return self.pack(params)

    def _quantize_activation(self, h, rng):
        # evaluation passes carry no generator and round to nearest instead
        if rng is None and self.act_quant.mode == "stochastic":
            return quantize_det(h, self.act_quant.format)
        return self.act_quant(h, rng)

    def forward_quantized(self, theta, inputs, rng=None) -> ForwardCache:
        """Forward pass; stochastic activation rounding falls back to nearest when ``rng`` is None."""
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != self.sizes[0]:
            raise ValueError(f"inputs must have shape (n, {self.sizes[0]}), got {inputs.shape}")
        params = self.unpack(theta)
        cache = ForwardCache(activations=[inputs])
        a = inputs
        for layer in range(self.n_layers):
            w, b = params[2 * layer], params[2 * layer + 1]
            z = a @ w + b
            cache.pre_activations.append(z)
            h = np.maximum(z, 0.0) if layer < self.n_layers - 1 else z
            a = self._quantize_activation(h, rng)
            cache.activations.append(a)
        return cache

    def backward_quantized(
        self,
        theta,
        cache: ForwardCache,
        labels=None,
        rng=None,
        *,
        grad_quant: QuantizerSpec = NO_QUANT,
        top_error=None,
    ) -> list[np.ndarray]:
        """Per-parameter gradients ``[dW_1, db_1, dW_2, ...]`` of the batch-mean loss.

        ``top_error`` overrides the output error (defaults to the cross-entropy
        gradient with respect to the logits for ``labels``).
        """
        params = self.unpack(theta)
        out = cache.activations[-1]
        if top_error is None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (out.shape[0],):
                raise ValueError("labels do not match the cached batch")
            top_error = softmax(out)
            top_error[np.arange(len(labels)), labels] -= 1.0
            top_error /= len(labels)
        err = np.asarray(top_error, dtype=np.float64)
        if err.shape != out.shape:
            raise ValueError(f"top error shape {err.shape} != output shape {out.shape}")
        grads: list = [None] * (2 * self.n_layers)
        for layer in reversed(range(self.n_layers)):
            if layer < self.n_layers - 1:
                err = err * (cache.pre_activations[layer] > 0.0)
            a_prev = cache.activations[layer]
            grads[2 * layer] = grad_quant(a_prev.T @ err, rng)
            grads[2 * layer + 1] = grad_quant(err.sum(axis=0), rng)
            if layer > 0:
                err = self.err_quant(err @ params[2 * layer].T, rng)
        return grads

    def _batch_loss_grad(self, theta, x, y, rng) -> np.ndarray:
        cache = self.forward_quantized(theta, x, rng)
        return self.pack(self.backward_quantized(theta, cache, y, rng))

    def energy(self, theta) -> float:
        theta = _check_dim(theta, self.dim)
        logits = self.forward_quantized(theta, self.x).activations[-1]
        nll = -log_softmax(logits)[np.arange(self.n_data), self.y].sum()
        return float(nll + theta @ theta / (2.0 * self.prior_variance))

    def grad(self, theta) -> np.ndarray:
        theta = _check_dim(theta, self.dim)
        return self.n_data * self._batch_loss_grad(theta, self.x, self.y, None) + theta / self.prior_variance

    def stoch_grad(self, theta, batch, rng=None) -> np.ndarray:
        batch = _check_batch(batch)
        data = self._batch_loss_grad(theta, self.x[batch], self.y[batch], rng)
        return self.n_data * data + theta / self.prior_variance

    def predict_proba(self, theta, inputs) -> np.ndarray:
        return softmax(self.forward_quantized(theta, inputs).activations[-1])
