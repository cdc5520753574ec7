"""
Training-time attacks and their mitigations.

* influence-function parameter shifts for up-weighted training points
* triggers, clean-label feature-collision crafting and dirty-label poisoning
* backdoor evaluation
* loss-ranking sanitization and DP-style clipped, noised SGD
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from advml.errors import (
    CapabilityError,
    CraftingFailedError,
    PreconditionError,
    TrainingDivergedError,
    TriggerVisibilityError,
)
from advml.net import (
    CROSS_ENTROPY,
    Network,
    _backward,
    as_arrays,
    forward,
    loss_value,
    params_vector,
    per_sample_parameter_gradients,
    sgd_loop,
    with_params,
)
from advml.whitebox import L2, LINF, perturbation_norm

MAX_HESSIAN_PARAMS = 2000
FD_HESSIAN_STEP = 1e-5
RIDGE = 1e-6
SINGULAR_CONDITION = 1e12
STATIONARY_TOL = 1e-5

CLEAN = "clean"
DIRTY = "dirty"
PRISTINE = "pristine"


# ------------------------------------------------------------------ influence


@dataclass(frozen=True)
class InfluenceRequest:
    z_poison: tuple
    epsilon: float

    def __post_init__(self):
        if not 0 < self.epsilon <= 0.1:
            raise ValueError("epsilon must lie in (0, 0.1]")


@dataclass(frozen=True)
class InfluenceReport:
    delta_theta: np.ndarray
    hessian_condition: float
    ridge: float = 0.0


def fd_hessian(grad_fn, theta, step: float = FD_HESSIAN_STEP) -> np.ndarray:
    """Hessian by central differences of an exact gradient, symmetrized."""
    theta = np.asarray(theta, dtype=np.float64)
    p = theta.size
    H = np.empty((p, p))
    for i in range(p):
        e = np.zeros(p)
        e[i] = step
        H[:, i] = (grad_fn(theta + e) - grad_fn(theta - e)) / (2 * step)
    return 0.5 * (H + H.T)


def hessian(net: Network, data, loss=CROSS_ENTROPY) -> np.ndarray:
    """Hessian of the mean training loss with respect to theta."""
    if net.num_params > MAX_HESSIAN_PARAMS:
        raise CapabilityError(
            f"dense Hessian limited to {MAX_HESSIAN_PARAMS} parameters, network has {net.num_params}"
        )
    X, y = as_arrays(data)

    def grad(theta):
        return per_sample_parameter_gradients(with_params(net, theta), X, y, loss).mean(axis=0)

    return fd_hessian(grad, params_vector(net))


def solve_influence(H, grad_poison, epsilon: float) -> InfluenceReport:
    """``-epsilon * H^-1 grad``; adds a 1e-6 ridge when H is near singular."""
    H = np.asarray(H, dtype=np.float64)
    g = np.asarray(grad_poison, dtype=np.float64)
    cond = float(np.linalg.cond(H))
    ridge = 0.0
    if not np.isfinite(cond) or cond > SINGULAR_CONDITION:
        ridge = RIDGE
    try:
        step = np.linalg.solve(H + ridge * np.eye(len(g)), g)
    except np.linalg.LinAlgError:
        if ridge:
            raise
        ridge = RIDGE
        step = np.linalg.solve(H + ridge * np.eye(len(g)), g)
    if not np.all(np.isfinite(step)):
        raise np.linalg.LinAlgError("influence solve produced non-finite values")
    return InfluenceReport(-epsilon * step, cond if np.isfinite(cond) else math.inf, ridge)


def influence_shift(net: Network, data, loss=CROSS_ENTROPY, request: InfluenceRequest = None,
                    reduction: str = "mean") -> InfluenceReport:
    """Predicted parameter shift from up-weighting ``request.z_poison`` by epsilon.

    ``reduction="mean"`` models the objective ``mean loss + eps * l(z)``;
    ``"sum"`` models ``sum of losses + eps * l(z)``.
    """
    X, y = as_arrays(data)
    g_train = per_sample_parameter_gradients(net, X, y, loss).mean(axis=0)
    if np.linalg.norm(g_train) > STATIONARY_TOL:
        raise PreconditionError(
            f"network is not at a minimum of the training loss (gradient norm {np.linalg.norm(g_train):.3g})"
        )
    H = hessian(net, list(zip(X, y)), loss)
    if reduction == "sum":
        H = H * len(y)
    elif reduction != "mean":
        raise ValueError("reduction must be 'mean' or 'sum'")
    zx, zy = request.z_poison
    g_poison = per_sample_parameter_gradients(net, np.atleast_2d(zx), [int(zy)], loss)[0]
    return solve_influence(H, g_poison, request.epsilon)


def minimize_full_batch(net: Network, data, loss=CROSS_ENTROPY, extra=None, tol: float = 1e-8,
                        max_iter: int = 200_000, learning_rate: float | None = None) -> Network:
    """Full-batch gradient descent on ``mean loss (+ w * l(extra))`` until the
    gradient norm drops to ``tol``.

    ``extra`` is an optional ``((x, label), weight)`` up-weighted term. The
    default step is ``1 / lambda_max`` of the Hessian at the start point.
    """
    X, y = as_arrays(data)

    def grad(theta):
        cur = with_params(net, theta)
        g = per_sample_parameter_gradients(cur, X, y, loss).mean(axis=0)
        if extra is not None:
            (zx, zy), w = extra
            g = g + w * per_sample_parameter_gradients(cur, np.atleast_2d(zx), [int(zy)], loss)[0]
        return g

    theta = params_vector(net)
    if learning_rate is None:
        H = fd_hessian(grad, theta)
        learning_rate = 1.0 / max(float(np.max(np.linalg.eigvalsh(H))), 1e-12)
    for _ in range(max_iter):
        g = grad(theta)
        if np.linalg.norm(g) <= tol:
            return with_params(net, theta)
        theta = theta - learning_rate * g
        if not np.all(np.isfinite(theta)):
            raise TrainingDivergedError("full-batch descent diverged")
    raise TrainingDivergedError(f"gradient norm still above {tol} after {max_iter} iterations")


# ------------------------------------------------------------------- triggers


@dataclass(frozen=True, eq=False)
class Trigger:
    pattern: np.ndarray
    epsilon_vis: float
    norm: str = LINF
    target: int = 0

    def __post_init__(self):
        pattern = np.array(self.pattern, dtype=np.float64)
        pattern.setflags(write=False)
        object.__setattr__(self, "pattern", pattern)
        if self.norm not in (L2, LINF):
            raise ValueError(f"unsupported trigger norm {self.norm!r}")
        check_visibility(self)


def check_visibility(trigger: Trigger):
    size = perturbation_norm(trigger.pattern, trigger.norm)
    if size > trigger.epsilon_vis:
        raise TriggerVisibilityError(
            f"trigger {trigger.norm} norm {size:.6g} exceeds visibility bound {trigger.epsilon_vis:.6g}"
        )


def corner_trigger(shape: tuple[int, int], size: int, value: float, epsilon_vis: float, target: int) -> Trigger:
    """Square patch of ``value`` in the bottom-right corner of an image grid."""
    rows, cols = shape
    img = np.zeros((rows, cols))
    img[rows - size:, cols - size:] = value
    return Trigger(img.ravel(), epsilon_vis, LINF, target)


def apply_trigger(x, trigger: Trigger):
    check_visibility(trigger)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != trigger.pattern.size:
        raise ValueError(f"trigger has {trigger.pattern.size} entries, input has {x.shape[-1]}")
    return np.clip(x + trigger.pattern, 0.0, 1.0)


# ---------------------------------------------------------------- poisoning


@dataclass(frozen=True, eq=False)
class PoisonSample:
    x_p: np.ndarray
    y_p: int
    provenance: str
    crafting_model: Network | None = None

    def label_consistent(self) -> bool:
        if self.crafting_model is None:
            return self.provenance != CLEAN
        return int(self.crafting_model.predict(self.x_p)) == self.y_p


def penultimate(net: Network, X) -> np.ndarray:
    """Input to the final (logit) layer."""
    if len(net.layers) == 1:
        return np.asarray(X, dtype=np.float64)
    return forward(net, X).activations[-2]


def feature_anchor(net: Network, inputs) -> np.ndarray:
    return penultimate(net, np.atleast_2d(inputs)).mean(axis=0)


def craft_clean_label(net: Network, base, trigger: Trigger, steps: int, step_size: float,
                      anchor_inputs=None, anchor=None) -> PoisonSample:
    """Feature-collision crafting under an Linf visibility budget.

    Signed gradient descent moves ``base`` so its penultimate representation
    approaches ``anchor`` (by default the centroid of ``anchor_inputs``, which
    should be target-class examples) while staying within
    ``trigger.epsilon_vis`` of the base in Linf and inside the unit box. The
    crafted point must still be predicted as the base label by ``net``.
    """
    bx, by = base
    bx = np.asarray(bx, dtype=np.float64)
    by = int(by)
    if int(net.predict(bx)) != by:
        raise PreconditionError("base sample must be correctly classified by the crafting model")
    if anchor is None:
        if anchor_inputs is None:
            raise ValueError("need anchor_inputs or anchor")
        anchor = feature_anchor(net, anchor_inputs)
    eps = trigger.epsilon_vis
    cur = bx.copy()
    last_layer = len(net.layers) - 2
    for _ in range(steps):
        if last_layer < 0:
            g = 2.0 * (cur - anchor)
        else:
            tr = forward(net, cur)
            g, _ = _backward(net, tr, 2.0 * (tr.activations[last_layer] - anchor), from_layer=last_layer)
        cur = np.clip(cur - step_size * np.sign(g), bx - eps, bx + eps)
        cur = np.clip(cur, 0.0, 1.0)
    pred = int(net.predict(cur))
    if pred != by:
        raise CraftingFailedError(
            f"crafted sample is predicted {pred}, not its label {by}", sample=cur, predicted=pred
        )
    return PoisonSample(cur, by, CLEAN, net)


def feature_distance(net: Network, x, anchor) -> float:
    return float(np.linalg.norm(penultimate(net, np.atleast_2d(x))[0] - anchor))


def backdoor_eval(net, test, trigger: Trigger):
    """``(clean accuracy, fraction of non-target inputs sent to the target by the trigger)``."""
    X, y = as_arrays(test)
    if len(y) == 0:
        raise ValueError("backdoor_eval needs a non-empty test set")
    clean = float(np.mean(net.predict(X) == y))
    mask = y != trigger.target
    if not np.any(mask):
        return clean, 0.0
    triggered = apply_trigger(X[mask], trigger)
    rate = float(np.mean(net.predict(triggered) == trigger.target))
    return clean, rate


def dirty_label_poison(X, y, trigger: Trigger, fraction: float, seed: int):
    """Stamp the trigger on a random ``fraction`` of non-target samples and
    relabel them to the target. Returns ``(X, y, provenance)``."""
    X = np.array(X, dtype=np.float64)
    y = np.array(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    count = int(round(fraction * len(y)))
    pool = np.nonzero(y != trigger.target)[0]
    chosen = np.sort(rng.choice(pool, size=min(count, pool.size), replace=False))
    prov = np.array([PRISTINE] * len(y), dtype=object)
    X[chosen] = apply_trigger(X[chosen], trigger)
    y[chosen] = trigger.target
    prov[chosen] = DIRTY
    return X, y, prov


# ---------------------------------------------------------------- mitigations


def sanitize_loss_outliers(net: Network, data, loss=CROSS_ENTROPY, remove_fraction: float = 0.05):
    """Drop the ceil(fraction * n) highest-loss samples; equal losses are
    removed in order of original index."""
    if not 0 <= remove_fraction < 1:
        raise ValueError("remove_fraction must lie in [0, 1)")
    X, y = as_arrays(data)
    pairs = list(zip(X, y))
    n = len(pairs)
    k = math.ceil(remove_fraction * n)
    if k == 0 or n == 0:
        return list(pairs)
    losses = loss_value(net.logits(X), y, loss)
    order = sorted(range(n), key=lambda i: (-losses[i], i))
    drop = set(order[:k])
    return [pairs[i] for i in range(n) if i not in drop]


def dp_train(net: Network, data, epochs: int, learning_rate: float, clip_norm: float,
             noise_multiplier: float, seed: int, batch_size: int = 16, loss=CROSS_ENTROPY) -> Network:
    """SGD with per-sample clipping to ``clip_norm`` and Gaussian noise of
    standard deviation ``noise_multiplier * clip_norm / batch_size`` on the
    averaged gradient."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be positive")
    if noise_multiplier < 0:
        raise ValueError("noise_multiplier must be non-negative")
    X, y = as_arrays(data)
    noise_rng = np.random.default_rng([seed, 1])

    def batch_gradient(cur, Xb, yb):
        G = clip_rows(per_sample_parameter_gradients(cur, Xb, yb, loss), clip_norm)
        g = G.mean(axis=0)
        if noise_multiplier > 0:
            g = g + noise_rng.normal(scale=noise_multiplier * clip_norm / len(yb), size=g.shape)
        return g, loss_value(cur.logits(Xb), yb, loss)

    return sgd_loop(net, X, y, epochs, learning_rate, seed, batch_size, batch_gradient)


def clip_rows(G, clip_norm: float):
    norms = np.linalg.norm(G, axis=1)
    scale = np.where(norms > clip_norm, clip_norm / np.where(norms > 0, norms, 1.0), 1.0)
    return G * scale[:, None]
