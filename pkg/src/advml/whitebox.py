"""
White-box evasion attacks: FGSM, PGD with an adaptive step size, and the
Carlini-Wagner L2 attack.

Attacks accept any differentiable model exposing ``logits(x)``,
``input_vjp(x, dlogits)``, ``input_dim`` and ``num_classes``. A plain
:class:`advml.net.Network` qualifies, as do the wrappers in
:mod:`advml.defenses` and :class:`advml.blackbox.LogitEnsemble`.

The input domain is the unit box [0, 1]^d throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from advml.net import CROSS_ENTROPY, LogitMargin, loss_grad_logits, loss_value, phi_values

LINF = "linf"
L2 = "l2"
NORMS = (LINF, L2)


@dataclass(frozen=True)
class PerturbationBudget:
    norm: str
    epsilon: float

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")


@dataclass(frozen=True)
class Untargeted:
    pass


@dataclass(frozen=True)
class Targeted:
    t: int
    kappa: float = 0.0

    def __post_init__(self):
        if self.t < 0 or self.kappa < 0:
            raise ValueError("target index and kappa must be non-negative")


UNTARGETED = Untargeted()


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: bool
    iterations: int
    perturbation_norm: float
    final_loss: float
    queries: int = 0
    trace: dict = field(default_factory=dict, repr=False)


@dataclass(frozen=True)
class AdaptiveStepState:
    alpha: float
    alpha_min: float
    alpha_max: float
    previous_loss: float = -np.inf

    def __post_init__(self):
        if not (0 < self.alpha_min <= self.alpha <= self.alpha_max):
            raise ValueError(
                f"need 0 < alpha_min <= alpha <= alpha_max, got "
                f"{self.alpha_min}, {self.alpha}, {self.alpha_max}"
            )


GROW = 1.5
SHRINK = 0.75


def adapt_step(state: AdaptiveStepState, new_loss: float) -> AdaptiveStepState:
    """Grow alpha by 1.5 when the loss went up, otherwise shrink by 0.75; clamp."""
    factor = GROW if new_loss > state.previous_loss else SHRINK
    alpha = min(max(state.alpha * factor, state.alpha_min), state.alpha_max)
    return replace(state, alpha=alpha, previous_loss=new_loss)


@dataclass(frozen=True)
class CWConfig:
    kappa: float = 0.0
    c_initial: float = 1.0
    binary_search_steps: int = 9
    inner_iterations: int = 200
    inner_learning_rate: float = 0.01

    def __post_init__(self):
        if self.kappa < 0 or self.c_initial <= 0 or self.inner_learning_rate <= 0:
            raise ValueError("kappa >= 0, c_initial > 0 and inner_learning_rate > 0 required")
        if self.binary_search_steps < 1 or self.inner_iterations < 1:
            raise ValueError("binary_search_steps and inner_iterations must be >= 1")


C_MIN, C_MAX = 1e-3, 1e6


def perturbation_norm(delta, norm: str) -> float:
    delta = np.asarray(delta, dtype=np.float64)
    if norm == LINF:
        return float(np.max(np.abs(delta))) if delta.size else 0.0
    return float(np.linalg.norm(delta))


def project(candidate, origin, budget: PerturbationBudget) -> np.ndarray:
    """Norm-ball projection around ``origin`` followed by clipping to the unit box."""
    candidate = np.asarray(candidate, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    eps = budget.epsilon
    delta = candidate - origin
    if budget.norm == LINF:
        delta = np.clip(delta, -eps, eps)
    else:
        n = np.linalg.norm(delta)
        if n > eps:
            delta = delta * (eps / n) if n > 0 else delta
    return np.clip(origin + delta, 0.0, 1.0)


def objective_and_grad(model, x, label, loss):
    """Loss value and its input gradient through the model's vjp."""
    z = model.logits(x)
    value = loss_value(z, label, loss)
    g = model.input_vjp(x, loss_grad_logits(z, label, loss))
    return value, g


def predicted(model, x) -> int:
    return int(np.argmax(model.logits(x)))


def phi_margin(logits, t: int, kappa: float) -> float:
    """``max(max_{j != t} Z_j - Z_t, -kappa)``; equals -kappa iff the margin is met."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= t < logits.shape[-1]:
        raise IndexError(f"target {t} out of range for {logits.shape[-1]} logits")
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    return phi_values(logits, t, kappa)


def is_success(model, x, label, target=UNTARGETED) -> bool:
    z = model.logits(x)
    if isinstance(target, Targeted):
        return phi_margin(z, target.t, target.kappa) == -target.kappa
    return int(np.argmax(z)) != int(label)


def _result(model, x, adv, label, target, norm, iterations, final_loss, **extra):
    return AttackResult(
        adversarial=adv,
        success=is_success(model, adv, label, target),
        iterations=iterations,
        perturbation_norm=perturbation_norm(adv - x, norm),
        final_loss=float(final_loss),
        **extra,
    )


def fgsm(model, x, label: int, budget: PerturbationBudget, loss=CROSS_ENTROPY) -> AttackResult:
    """Single signed-gradient step of size epsilon."""
    if budget.norm != LINF:
        raise ValueError("fgsm requires an Linf budget")
    x = np.asarray(x, dtype=np.float64)
    _, g = objective_and_grad(model, x, label, loss)
    adv = project(x + budget.epsilon * np.sign(g), x, budget)
    z = model.logits(adv)
    return _result(model, x, adv, label, UNTARGETED, LINF, 1, loss_value(z, label, loss))


def _step_direction(g, norm):
    if norm == LINF:
        return np.sign(g)
    n = np.linalg.norm(g)
    return g / n if n > 0 else np.zeros_like(g)


def random_start(x, budget: PerturbationBudget, rng) -> np.ndarray:
    d = x.shape[-1]
    if budget.norm == LINF:
        delta = rng.uniform(-budget.epsilon, budget.epsilon, size=d)
    else:
        v = rng.normal(size=d)
        v /= np.linalg.norm(v) or 1.0
        delta = v * budget.epsilon * rng.uniform() ** (1.0 / d)
    return project(x + delta, x, budget)


def pgd_adaptive(
    model,
    x,
    label: int,
    budget: PerturbationBudget,
    steps: int = 20,
    alpha0: float | None = None,
    target=UNTARGETED,
    restarts: int = 1,
    seed: int = 0,
    rand_init: bool = False,
    alpha_bounds: tuple[float, float] | None = None,
) -> AttackResult:
    """Projected gradient ascent whose step size follows the 1.5 / 0.75 rule.

    Untargeted runs maximise cross-entropy at ``label``; targeted runs
    maximise ``-phi_margin`` for ``target.t``. The returned point is the
    highest-objective iterate seen across all restarts. Restarts after the
    first (or all of them with ``rand_init``) begin at a uniform random point
    of the budget ball.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    eps = budget.epsilon
    if isinstance(target, Targeted):
        loss = LogitMargin(target.t, target.kappa)
        sign = -1.0
    else:
        loss = CROSS_ENTROPY
        sign = 1.0

    def objective(point):
        return sign * loss_value(model.logits(point), label, loss)

    if eps == 0:
        return _result(model, x, x.copy(), label, target, budget.norm, 0, objective(x))

    lo, hi = alpha_bounds if alpha_bounds is not None else (eps / 100.0, eps)
    alpha0 = hi if alpha0 is None else alpha0
    rng = np.random.default_rng(seed)

    best_x, best_obj = x.copy(), objective(x)
    alphas, losses = [], []
    iterations = 0
    for r in range(restarts):
        cur = random_start(x, budget, rng) if (rand_init or r > 0) else x.copy()
        cur_obj = objective(cur)
        if cur_obj > best_obj:
            best_x, best_obj = cur, cur_obj
        state = AdaptiveStepState(min(max(alpha0, lo), hi), lo, hi, cur_obj)
        for _ in range(steps):
            _, g = objective_and_grad(model, cur, label, loss)
            cur = project(cur + state.alpha * _step_direction(sign * g, budget.norm), x, budget)
            cur_obj = objective(cur)
            iterations += 1
            state = adapt_step(state, cur_obj)
            alphas.append(state.alpha)
            losses.append(cur_obj)
            if cur_obj > best_obj:
                best_x, best_obj = cur, cur_obj
    return _result(
        model, x, best_x, label, target, budget.norm, iterations, best_obj,
        trace={"alphas": alphas, "objectives": losses, "alpha_bounds": (lo, hi)},
    )


def pgd_adaptive_batch(model, X, labels, budget: PerturbationBudget, steps: int = 7,
                       alpha0: float | None = None) -> np.ndarray:
    """Row-wise untargeted :func:`pgd_adaptive` (single restart, no random
    start) for a batch; returns the best iterate of every row.

    Used as the inner maximiser of adversarial training.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    eps = budget.epsilon
    if eps == 0 or len(X) == 0:
        return X.copy()
    lo, hi = eps / 100.0, eps
    alpha = np.full(len(X), min(max(hi if alpha0 is None else alpha0, lo), hi))

    def objective(P):
        return loss_value(model.logits(P), labels, CROSS_ENTROPY)

    cur = X.copy()
    prev = objective(cur)
    best, best_obj = cur.copy(), prev.copy()
    for _ in range(steps):
        z = model.logits(cur)
        g = model.input_vjp(cur, loss_grad_logits(z, labels, CROSS_ENTROPY))
        if budget.norm == LINF:
            direction = np.sign(g)
            cand = np.clip(cur + alpha[:, None] * direction - X, -eps, eps)
        else:
            n = np.linalg.norm(g, axis=1, keepdims=True)
            direction = np.divide(g, n, out=np.zeros_like(g), where=n > 0)
            cand = cur + alpha[:, None] * direction - X
            cn = np.linalg.norm(cand, axis=1, keepdims=True)
            cand = np.where(cn > eps, cand * (eps / np.where(cn > 0, cn, 1.0)), cand)
        cur = np.clip(X + cand, 0.0, 1.0)
        obj = objective(cur)
        alpha = np.clip(np.where(obj > prev, alpha * GROW, alpha * SHRINK), lo, hi)
        prev = obj
        better = obj > best_obj
        best[better] = cur[better]
        best_obj[better] = obj[better]
    return best


def cw_l2(model, x, t: int, config: CWConfig = CWConfig(), label: int | None = None) -> AttackResult:
    """Carlini-Wagner L2 attack toward class ``t``.

    Minimises ``||eta||^2 + c * phi(x + eta)`` by projected gradient descent
    on eta (box constraint enforced by clipping). ``c`` is searched over
    ``binary_search_steps`` rounds: bisection once both a succeeding and a
    failing value are known, otherwise halve on success and multiply by ten
    on failure, clamped to [1e-3, 1e6]. Returns the smallest successful
    perturbation seen in any round.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= t < model.num_classes:
        raise IndexError(f"target {t} out of range")
    kappa = config.kappa
    loss = LogitMargin(t, kappa)
    target = Targeted(t, kappa)

    best_adv, best_norm = None, np.inf
    fallback, fallback_phi = x.copy(), phi_margin(model.logits(x), t, kappa)
    if fallback_phi == -kappa:
        best_adv, best_norm = x.copy(), 0.0

    c = min(max(config.c_initial, C_MIN), C_MAX)
    c_lo, c_hi = None, None
    iterations = 0
    for _ in range(config.binary_search_steps):
        if best_norm == 0.0:
            break
        eta = np.zeros_like(x)
        round_success = False
        for _ in range(config.inner_iterations):
            z = model.logits(x + eta)
            grad = 2.0 * eta + c * model.input_vjp(x + eta, loss_grad_logits(z, 0, loss))
            eta = np.clip(x + eta - config.inner_learning_rate * grad, 0.0, 1.0) - x
            iterations += 1
            phi = phi_margin(model.logits(x + eta), t, kappa)
            if phi == -kappa:
                round_success = True
                n = float(np.linalg.norm(eta))
                if n < best_norm:
                    best_adv, best_norm = x + eta, n
            elif best_adv is None and phi < fallback_phi:
                fallback, fallback_phi = x + eta, phi
        if round_success:
            c_hi = c
            c = (c_lo + c_hi) / 2.0 if c_lo is not None else c / 2.0
        else:
            c_lo = c
            c = (c_lo + c_hi) / 2.0 if c_hi is not None else c * 10.0
        c = min(max(c, C_MIN), C_MAX)

    adv = best_adv if best_adv is not None else fallback
    ref_label = predicted(model, x) if label is None else label
    final = loss_value(model.logits(adv), ref_label, loss)
    return _result(model, x, adv, ref_label, target, L2, iterations, final)
