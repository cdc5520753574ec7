"""
Defenses and certification: gradient quantization, adversarial training,
interval bound propagation, randomized smoothing, BPDA gradients and the
exact-verification cost formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import beta as beta_dist
from scipy.stats import binomtest, norm

from advml.net import (
    CROSS_ENTROPY,
    RELU,
    Network,
    as_arrays,
    input_gradient,
    loss_value,
    per_sample_parameter_gradients,
    sgd_loop,
)
from advml.whitebox import PerturbationBudget, pgd_adaptive_batch

ABSTAIN = -1
RADIUS_CAP_SIGMAS = 10.0


# ---------------------------------------------------------------- quantization


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError("bits must be >= 1")


def _round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_gradient(g, config: QuantConfig):
    """Round each coordinate to the grid of step ``2**-(bits-1)``."""
    scale = 2.0 ** (config.bits - 1)
    return _round_half_away(np.asarray(g, dtype=np.float64) * scale) / scale


class QuantizedGradientModel:
    """Forward passes untouched; every exposed input gradient is quantized."""

    def __init__(self, net: Network, config: QuantConfig):
        self.net = net
        self.config = config
        self.input_dim = net.input_dim
        self.num_classes = net.num_classes

    def logits(self, x):
        return self.net.logits(x)

    def predict(self, x):
        return self.net.predict(x)

    def input_vjp(self, x, dlogits):
        return quantize_gradient(self.net.input_vjp(x, dlogits), self.config)

    def input_gradient(self, x, loss=CROSS_ENTROPY, label=0):
        return quantize_gradient(input_gradient(self.net, x, loss, label), self.config)


def quantized_oracle(net: Network, config: QuantConfig) -> QuantizedGradientModel:
    return QuantizedGradientModel(net, config)


# -------------------------------------------------------- adversarial training


@dataclass(frozen=True)
class AdvTrainConfig:
    budget: PerturbationBudget
    inner_steps: int = 7
    inner_alpha0: float | None = None
    epochs: int = 50
    learning_rate: float = 0.1
    seed: int = 0
    batch_size: int = 16

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")


def adversarial_train(net: Network, data, config: AdvTrainConfig) -> Network:
    """Min-max training: every minibatch is swapped for its PGD adversarials
    before the SGD step."""
    X, y = as_arrays(data)

    def batch_gradient(cur, Xb, yb):
        if config.budget.epsilon > 0:
            Xb = pgd_adaptive_batch(cur, Xb, yb, config.budget, config.inner_steps, config.inner_alpha0)
        G = per_sample_parameter_gradients(cur, Xb, yb, CROSS_ENTROPY)
        return G.mean(axis=0), loss_value(cur.logits(Xb), yb, CROSS_ENTROPY)

    return sgd_loop(net, X, y, config.epochs, config.learning_rate, config.seed, config.batch_size, batch_gradient)


# ------------------------------------------------------------------------ IBP


@dataclass(frozen=True)
class IntervalBounds:
    lower: list
    upper: list
    input_epsilon: float
    input_lower: np.ndarray = None
    input_upper: np.ndarray = None


def propagate_intervals(net: Network, lo, hi) -> IntervalBounds:
    lower, upper = [], []
    for layer in net.layers:
        w_pos = np.maximum(layer.weights, 0.0)
        w_neg = np.minimum(layer.weights, 0.0)
        new_lo = w_pos @ lo + w_neg @ hi + layer.bias
        new_hi = w_pos @ hi + w_neg @ lo + layer.bias
        if layer.activation == RELU:
            new_lo, new_hi = np.maximum(new_lo, 0.0), np.maximum(new_hi, 0.0)
        lower.append(new_lo)
        upper.append(new_hi)
        lo, hi = new_lo, new_hi
    return IntervalBounds(lower, upper, 0.0)


def ibp_bounds(net: Network, x, epsilon: float) -> IntervalBounds:
    """Post-activation bounds for every layer over the Linf ball of radius
    ``epsilon`` around ``x`` intersected with the unit box."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    lo = np.clip(x - epsilon, 0.0, 1.0)
    hi = np.clip(x + epsilon, 0.0, 1.0)
    b = propagate_intervals(net, lo, hi)
    return IntervalBounds(b.lower, b.upper, float(epsilon), lo, hi)


def ibp_margin(net: Network, x, label: int, epsilon: float) -> float:
    b = ibp_bounds(net, x, epsilon)
    lo, hi = b.lower[-1], b.upper[-1]
    others = np.delete(hi, label)
    return float(lo[label] - np.max(others)) if others.size else math.inf


def ibp_certify(net: Network, x, label: int, epsilon: float) -> bool:
    """True when no Linf perturbation of size ``epsilon`` can change the
    prediction away from ``label``."""
    return ibp_margin(net, x, label, epsilon) > 0


# ---------------------------------------------------------- randomized smoothing


@dataclass(frozen=True)
class SmoothedClassifier:
    base: object
    sigma: float
    num_samples: int = 1000
    alpha: float = 0.001
    batch_size: int = 1000

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.num_samples < 100:
            raise ValueError("num_samples must be >= 100")
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 0.5)")


def sample_counts(sc: SmoothedClassifier, x, seed: int, num: int | None = None) -> np.ndarray:
    """Class histogram of the base classifier under Gaussian input noise."""
    x = np.asarray(x, dtype=np.float64)
    num = sc.num_samples if num is None else num
    rng = np.random.default_rng(seed)
    counts = np.zeros(sc.base.num_classes, dtype=np.int64)
    remaining = num
    while remaining > 0:
        m = min(sc.batch_size, remaining)
        noisy = x + sc.sigma * rng.normal(size=(m, x.size))
        preds = np.argmax(sc.base.logits(noisy), axis=1)
        counts += np.bincount(preds, minlength=counts.size)
        remaining -= m
    return counts


def predict_from_counts(counts, alpha: float) -> int:
    """Top class, or ABSTAIN when a two-sided binomial test between the top
    two counts is not significant at level ``alpha``."""
    counts = np.asarray(counts)
    order = np.argsort(-counts, kind="stable")
    n_a = int(counts[order[0]])
    n_b = int(counts[order[1]]) if counts.size > 1 else 0
    if binomtest(n_a, n_a + n_b, 0.5).pvalue > alpha:
        return ABSTAIN
    return int(order[0])


def smooth_predict(sc: SmoothedClassifier, x, seed: int = 0) -> int:
    return predict_from_counts(sample_counts(sc, x, seed), sc.alpha)


def clopper_pearson_lower(successes: int, trials: int, alpha: float) -> float:
    """One-sided (1 - alpha) lower confidence bound on a binomial proportion."""
    if successes <= 0:
        return 0.0
    return float(beta_dist.ppf(alpha, successes, trials - successes + 1))


def certified_radius(p_lower: float, sigma: float) -> float:
    if p_lower <= 0.5:
        return 0.0
    return float(min(sigma * norm.ppf(p_lower), RADIUS_CAP_SIGMAS * sigma))


def smooth_certify(sc: SmoothedClassifier, x, seed: int = 0):
    """``(class, radius)`` with an L2 radius ``sigma * Phi^-1(p_lower)``,
    or ``(ABSTAIN, 0.0)`` when ``p_lower <= 0.5``."""
    counts = sample_counts(sc, x, seed)
    top = int(np.argmax(counts))
    p_lower = clopper_pearson_lower(int(counts[top]), sc.num_samples, sc.alpha)
    if p_lower <= 0.5:
        return ABSTAIN, 0.0
    return top, certified_radius(p_lower, sc.sigma)


# ------------------------------------------------------------------------ BPDA


@dataclass(frozen=True)
class BPDAConfig:
    sigma: float = 0.05
    num_samples: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


def round_inputs(levels: int):
    """Input quantizer onto ``levels`` evenly spaced values in [0, 1]."""
    if levels < 2:
        raise ValueError("levels must be >= 2")

    def preprocess(x):
        return np.round(np.clip(x, 0.0, 1.0) * (levels - 1)) / (levels - 1)

    return preprocess


def bpda_gradient(net: Network, preprocess, x, loss=CROSS_ENTROPY, label=0, config=BPDAConfig()):
    """Noise-averaged straight-through gradient.

    Each draw evaluates the exact gradient at ``preprocess(x + delta)`` and
    treats the preprocess as identity on the way back. With ``loss=None``
    the averaged Jacobian of the logits (classes x inputs) is returned.
    With ``sigma == 0`` a single noiseless draw is used.
    """
    x = np.asarray(x, dtype=np.float64)
    draws = 1 if config.sigma == 0 else config.num_samples
    rng = np.random.default_rng(config.seed)
    total = None
    for _ in range(draws):
        point = x if config.sigma == 0 else x + config.sigma * rng.normal(size=x.shape)
        p = preprocess(point)
        if loss is None:
            g = np.stack([net.input_vjp(p, np.eye(net.num_classes)[c]) for c in range(net.num_classes)])
        else:
            g = input_gradient(net, p, loss, label)
        total = g if total is None else total + g
    return total / draws


class PreprocessedModel:
    """``net`` behind a non-differentiable preprocess.

    The honest gradient of a piecewise-constant preprocess is zero almost
    everywhere, which is what ``input_vjp`` reports.
    """

    def __init__(self, net: Network, preprocess):
        self.net = net
        self.preprocess = preprocess
        self.input_dim = net.input_dim
        self.num_classes = net.num_classes

    def logits(self, x):
        return self.net.logits(self.preprocess(np.asarray(x, dtype=np.float64)))

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)

    def input_vjp(self, x, dlogits):
        return np.zeros_like(np.asarray(x, dtype=np.float64))


class BPDAModel(PreprocessedModel):
    """Same forward behaviour, with a noise-averaged straight-through gradient.

    ``input_vjp`` averages the logit Jacobian over the noisy draws and then
    applies the caller's logit gradient, i.e. ``E[J(x + delta)]^T dlogits``.
    """

    def __init__(self, net: Network, preprocess, config=BPDAConfig()):
        super().__init__(net, preprocess)
        self.config = config

    def input_vjp(self, x, dlogits):
        x = np.asarray(x, dtype=np.float64)
        cfg = self.config
        draws = 1 if cfg.sigma == 0 else cfg.num_samples
        rng = np.random.default_rng(cfg.seed)
        total = np.zeros_like(x)
        for _ in range(draws):
            point = x if cfg.sigma == 0 else x + cfg.sigma * rng.normal(size=x.shape)
            total += self.net.input_vjp(self.preprocess(point), dlogits)
        return total / draws


# ---------------------------------------------------------------- verification


def verification_cost(n: int, L: int) -> int:
    """Exact operation count ``(2n)**L`` for exhaustive verification."""
    if n < 1 or L < 1:
        raise ValueError("n and L must be >= 1")
    return (2 * int(n)) ** int(L)
