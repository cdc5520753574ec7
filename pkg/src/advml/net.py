"""
Minimal feed-forward engine: dense layers with ReLU or identity activations,
exact forward passes and exact reverse-mode gradients with respect to both
inputs and parameters.

Inputs are numpy float64 arrays. Most routines accept either a single
sample of shape ``(d,)`` or a batch of shape ``(n, d)``; batch results keep
the leading axis.

The parameter vector theta is the concatenation, layer by layer, of the
row-major weight matrix followed by the bias vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from advml.errors import DimensionError, PreconditionError, TrainingDivergedError

RELU = "relu"
IDENTITY = "id"
ACTIVATIONS = (RELU, IDENTITY)


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = RELU

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2:
            raise DimensionError(f"weights must be 2-D, got shape {w.shape}")
        if w.shape[0] != b.shape[0]:
            raise DimensionError(
                f"weights have {w.shape[0]} rows but bias has length {b.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_params(self) -> int:
        return self.weights.size + self.bias.size

    def __eq__(self, other):
        if not isinstance(other, DenseLayer):
            return NotImplemented
        return (
            self.activation == other.activation
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.bias, other.bias)
        )

    __hash__ = None


class Network:
    """An ordered stack of dense layers ending in an identity (logit) layer."""

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = tuple(layers)
        if not layers:
            raise DimensionError("a network needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise DimensionError(
                    f"expects {layers[k].in_dim} inputs but layer {k - 1} "
                    f"produces {layers[k - 1].out_dim}",
                    layer=k,
                )
        if layers[-1].activation != IDENTITY:
            raise DimensionError(
                "final layer must use the identity activation", layer=len(layers) - 1
            )
        self.layers = layers

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    @property
    def num_params(self) -> int:
        return sum(layer.num_params for layer in self.layers)

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return len(self.layers) == len(other.layers) and all(
            a == b for a, b in zip(self.layers, other.layers)
        )

    __hash__ = None

    def __repr__(self):
        dims = "-".join(str(d) for d in self.dims)
        return f"Network({dims}, acts={'/'.join(self.activations)})"

    # differentiable-model protocol used by the attacks
    def logits(self, x):
        return forward(self, x).logits

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)

    def input_vjp(self, x, dlogits):
        trace = forward(self, x)
        grad_x, _ = _backward(self, trace, np.asarray(dlogits, dtype=np.float64))
        return grad_x


@dataclass(frozen=True)
class ForwardTrace:
    inputs: np.ndarray
    preactivations: list
    activations: list

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]


@dataclass(frozen=True)
class CrossEntropy:
    pass


@dataclass(frozen=True)
class LogitMargin:
    """Targeted margin loss ``max(max_{j!=t} z_j - z_t, -kappa)``; ignores the label."""

    target: int
    kappa: float = 0.0

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.target < 0:
            raise ValueError("target must be a class index")


LossKind = CrossEntropy | LogitMargin
CROSS_ENTROPY = CrossEntropy()


def _check_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise DimensionError(
            f"expects inputs of size {net.input_dim}, got shape {x.shape}", layer=0
        )
    return x


def forward(net: Network, x) -> ForwardTrace:
    x = _check_input(net, x)
    pre, act = [], []
    a = x
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        a = np.maximum(z, 0.0) if layer.activation == RELU else z
        pre.append(z)
        act.append(a)
    return ForwardTrace(inputs=x, preactivations=pre, activations=act)


def relu_mask(trace: ForwardTrace, layer: int) -> np.ndarray:
    """1 where the layer's preactivation is strictly positive, else 0."""
    if not 0 <= layer < len(trace.preactivations):
        raise IndexError(
            f"layer {layer} out of range for {len(trace.preactivations)} layers"
        )
    return (trace.preactivations[layer] > 0).astype(np.int8)


def _backward(net, trace, grad_out, from_layer=None, need_params=False):
    """Chain ``grad_out`` (gradient w.r.t. the activation of ``from_layer``)
    back to the input. Returns (grad_input, per-layer (dW, db) or None).

    For batched traces the parameter gradients are per sample:
    dW has shape (n, out, in).
    """
    last = len(net.layers) - 1 if from_layer is None else from_layer
    g = grad_out
    grads = [None] * (last + 1)
    for k in range(last, -1, -1):
        layer = net.layers[k]
        if layer.activation == RELU:
            g = g * (trace.preactivations[k] > 0)
        if need_params:
            a_prev = trace.inputs if k == 0 else trace.activations[k - 1]
            if g.ndim == 1:
                dw = np.outer(g, a_prev)
            else:
                dw = g[:, :, None] * a_prev[:, None, :]
            grads[k] = (dw, g)
        g = g @ layer.weights
    return g, (grads if need_params else None)


def _validate_labels(net, labels, loss):
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= net.num_classes):
        raise IndexError(f"label out of range for {net.num_classes} classes")
    if isinstance(loss, LogitMargin) and loss.target >= net.num_classes:
        raise IndexError(f"target {loss.target} out of range")
    return labels


def loss_value(logits, label, loss: LossKind = CROSS_ENTROPY):
    """Loss for a logit vector (or a batch of them, giving one value per row)."""
    z = np.asarray(logits, dtype=np.float64)
    if isinstance(loss, CrossEntropy):
        m = np.max(z, axis=-1, keepdims=True)
        lse = np.log(np.sum(np.exp(z - m), axis=-1)) + m[..., 0]
        if z.ndim == 1:
            return float(lse - z[int(label)])
        return lse - z[np.arange(len(z)), np.asarray(label)]
    if isinstance(loss, LogitMargin):
        return phi_values(z, loss.target, loss.kappa)
    raise TypeError(f"unsupported loss {loss!r}")


def phi_values(z, t, kappa):
    z = np.asarray(z, dtype=np.float64)
    other = np.delete(z, t, axis=-1)
    gap = np.max(other, axis=-1) - z[..., t]
    out = np.maximum(gap, -kappa)
    return float(out) if z.ndim == 1 else out


def loss_grad_logits(logits, label, loss: LossKind = CROSS_ENTROPY) -> np.ndarray:
    """Gradient of the loss with respect to the logits."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    n, c = z2.shape
    if isinstance(loss, CrossEntropy):
        e = np.exp(z2 - np.max(z2, axis=1, keepdims=True))
        g = e / np.sum(e, axis=1, keepdims=True)
        labels = np.atleast_1d(np.asarray(label))
        g[np.arange(n), labels] -= 1.0
    elif isinstance(loss, LogitMargin):
        t = loss.target
        masked = z2.copy()
        masked[:, t] = -np.inf
        j = np.argmax(masked, axis=1)
        active = masked[np.arange(n), j] - z2[:, t] > -loss.kappa
        g = np.zeros_like(z2)
        rows = np.nonzero(active)[0]
        g[rows, j[rows]] = 1.0
        g[rows, t] = -1.0
    else:
        raise TypeError(f"unsupported loss {loss!r}")
    return g[0] if single else g


def input_gradient(net: Network, x, loss: LossKind = CROSS_ENTROPY, label=0):
    """Exact gradient of the loss with respect to the input."""
    x = _check_input(net, x)
    label = _validate_labels(net, label, loss)
    trace = forward(net, x)
    dz = loss_grad_logits(trace.logits, label, loss)
    grad_x, _ = _backward(net, trace, dz)
    return grad_x


def params_vector(net: Network) -> np.ndarray:
    parts = []
    for layer in net.layers:
        parts.append(layer.weights.ravel())
        parts.append(layer.bias)
    return np.concatenate(parts)


def with_params(net: Network, theta) -> Network:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (net.num_params,):
        raise DimensionError(
            f"parameter vector has shape {theta.shape}, expected ({net.num_params},)"
        )
    layers, pos = [], 0
    for layer in net.layers:
        nw = layer.weights.size
        w = theta[pos:pos + nw].reshape(layer.weights.shape)
        pos += nw
        b = theta[pos:pos + layer.out_dim]
        pos += layer.out_dim
        layers.append(DenseLayer(w, b, layer.activation))
    return Network(layers)


def as_arrays(data):
    """Normalise training data to ``(X, y)`` arrays.

    Accepts a sequence of ``(x, label)`` pairs or any object exposing
    ``inputs`` and ``labels`` (such as a harness Dataset).
    """
    if hasattr(data, "inputs") and hasattr(data, "labels"):
        X = np.asarray(data.inputs, dtype=np.float64)
        y = np.asarray(data.labels, dtype=np.int64)
    else:
        data = list(data)
        if not data:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in data])
        y = np.array([int(label) for _, label in data], dtype=np.int64)
    return X, y


def per_sample_parameter_gradients(net: Network, X, y, loss: LossKind = CROSS_ENTROPY):
    """Matrix of per-sample parameter gradients, shape (n, num_params)."""
    X = _check_input(net, np.atleast_2d(X))
    y = _validate_labels(net, np.atleast_1d(y), loss)
    trace = forward(net, X)
    dz = loss_grad_logits(trace.logits, y, loss)
    _, grads = _backward(net, trace, dz, need_params=True)
    n = X.shape[0]
    cols = []
    for dw, db in grads:
        cols.append(dw.reshape(n, -1))
        cols.append(db)
    return np.concatenate(cols, axis=1)


def parameter_gradient(net: Network, batch, loss: LossKind = CROSS_ENTROPY):
    """Mean gradient of the loss over ``batch`` with respect to theta."""
    X, y = as_arrays(batch)
    if len(y) == 0:
        raise PreconditionError("parameter_gradient needs a non-empty batch")
    return per_sample_parameter_gradients(net, X, y, loss).mean(axis=0)


def mean_loss(net: Network, data, loss: LossKind = CROSS_ENTROPY) -> float:
    X, y = as_arrays(data)
    return float(np.mean(loss_value(net.logits(X), y, loss)))


def accuracy(net, X, y) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return float(np.mean(np.argmax(net.logits(X), axis=1) == np.asarray(y)))


def init_network(dims: Sequence[int], seed: int, hidden_activation: str = RELU) -> Network:
    """Random network with layer sizes ``dims`` (input first, classes last).

    Weights and biases are uniform in [-1/sqrt(in_dim), 1/sqrt(in_dim)].
    """
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise DimensionError(f"invalid layer sizes {list(dims)}")
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = int(dims[k]), int(dims[k + 1])
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        act = IDENTITY if k == len(dims) - 2 else hidden_activation
        layers.append(DenseLayer(w, b, act))
    return Network(layers)


@dataclass
class TrainingLog:
    epoch_losses: list = field(default_factory=list)


def sgd_loop(net, X, y, epochs, learning_rate, seed, batch_size, batch_gradient, log=None):
    """Shared minibatch SGD driver.

    ``batch_gradient(net, Xb, yb)`` returns ``(grad, batch_losses)``. Shuffle
    order depends only on ``seed``.
    """
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    if len(y) == 0:
        raise PreconditionError("training data must be non-empty")
    if epochs <= 0:
        return net
    rng = np.random.default_rng(seed)
    theta = params_vector(net)
    n = len(y)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            grad, losses = batch_gradient(net, X[idx], y[idx])
            if not np.all(np.isfinite(losses)):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}"
                )
            theta = theta - learning_rate * grad
            if not np.all(np.isfinite(theta)):
                raise TrainingDivergedError(f"non-finite parameters at epoch {epoch}")
            net = with_params(net, theta)
            total += float(np.sum(losses))
        if log is not None:
            log.epoch_losses.append(total / n)
    return net


def train_sgd(
    net: Network,
    data,
    epochs: int,
    learning_rate: float,
    seed: int,
    batch_size: int = 16,
    loss: LossKind = CROSS_ENTROPY,
    log: TrainingLog | None = None,
) -> Network:
    """Plain minibatch SGD on the mean loss; returns a new network."""
    X, y = as_arrays(data)

    def batch_gradient(cur, Xb, yb):
        G = per_sample_parameter_gradients(cur, Xb, yb, loss)
        return G.mean(axis=0), loss_value(cur.logits(Xb), yb, loss)

    return sgd_loop(net, X, y, epochs, learning_rate, seed, batch_size, batch_gradient, log)
