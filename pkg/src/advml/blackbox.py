"""
Query-based and transfer attacks.

Black-box attacks only see a :class:`QueryOracle`; they never touch model
internals. Transfer attacks (MI-FGSM, ensembles) run white-box against
surrogates and are scored with the joint-misclassification ASR.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from advml.errors import DimensionError, PreconditionError, QueryBudgetExhausted
from advml.net import CROSS_ENTROPY, loss_value
from advml.whitebox import (
    LINF,
    UNTARGETED,
    AttackResult,
    PerturbationBudget,
    objective_and_grad,
    perturbation_norm,
    pgd_adaptive,
    project,
)

SCORE = "score"
DECISION = "decision"


class QueryOracle:
    """Counts every evaluation of a hidden model.

    ``fn`` maps an input vector to a logit vector. With ``access="decision"``
    the oracle only reveals the predicted class.
    """

    def __init__(self, fn, access=SCORE, num_classes=None):
        if access not in (SCORE, DECISION):
            raise ValueError(f"unknown access level {access!r}")
        self._fn = fn
        self.access = access
        self.num_classes = num_classes
        self.queries = 0

    @classmethod
    def from_model(cls, model, access=SCORE):
        return cls(model.logits, access, num_classes=model.num_classes)

    def _eval(self, x):
        self.queries += 1
        return np.asarray(self._fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)

    def scores(self, x) -> np.ndarray:
        if self.access != SCORE:
            raise PermissionError("oracle only grants decision access")
        return self._eval(x)

    def predict(self, x) -> int:
        return int(np.argmax(self._eval(x)))

    def __call__(self, x):
        return self.scores(x) if self.access == SCORE else self.predict(x)


@dataclass(frozen=True)
class FDConfig:
    delta: float = 1e-4
    budget: int = 10_000
    central: bool = False

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.budget < 0:
            raise ValueError("budget must be non-negative")


def _require_scores(oracle):
    if oracle.access != SCORE:
        raise PreconditionError("this attack needs score access")


def fd_gradient(oracle: QueryOracle, x, loss=CROSS_ENTROPY, label=0, config=FDConfig(), coords=None):
    """Finite-difference estimate of the input gradient of the loss.

    Forward differences share one base query (d + 1 queries in total);
    ``config.central`` switches to central differences (2d queries).
    ``coords`` restricts estimation to a subset of coordinates, the rest
    are left at zero.
    """
    _require_scores(oracle)
    x = np.asarray(x, dtype=np.float64)
    coords = np.arange(x.size) if coords is None else np.asarray(coords)
    g = np.zeros_like(x)
    used = 0

    def q(point):
        nonlocal used
        if used >= config.budget:
            raise QueryBudgetExhausted(
                f"query budget {config.budget} exhausted", partial=g.copy(), completed=done
            )
        used += 1
        return loss_value(oracle.scores(point), label, loss)

    done = 0
    d = config.delta
    if config.central:
        for i in coords:
            e = np.zeros_like(x)
            e[i] = d
            g[i] = (q(x + e) - q(x - e)) / (2 * d)
            done += 1
    else:
        base = q(x)
        for i in coords:
            e = np.zeros_like(x)
            e[i] = d
            g[i] = (q(x + e) - base) / d
            done += 1
    return g


def zoo_attack(
    oracle: QueryOracle,
    x,
    label: int,
    budget: PerturbationBudget,
    fd: FDConfig = FDConfig(),
    steps: int = 20,
    step_size: float | None = None,
    coords_per_step: int | None = None,
    seed: int = 0,
) -> AttackResult:
    """Zeroth-order projected ascent on cross-entropy.

    Each step spends ``k + 1`` queries (one base, ``k`` coordinate probes),
    then moves along the sign (Linf) or normalised direction (L2) of the
    estimate. Stops early when the next step would overrun ``fd.budget``.
    One extra query classifies the last iterate; it is counted but not
    charged to the budget.
    """
    _require_scores(oracle)
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    k = d if coords_per_step is None else min(int(coords_per_step), d)
    alpha = budget.epsilon if step_size is None else step_size
    rng = np.random.default_rng(seed)
    start = oracle.queries

    cur = x.copy()
    best = None  # (objective, point, logits)
    done = 0
    for _ in range(steps):
        if (oracle.queries - start) + k + 1 > fd.budget:
            break
        coords = np.arange(d) if k == d else np.sort(rng.choice(d, size=k, replace=False))
        base_logits = oracle.scores(cur)
        base = loss_value(base_logits, label, CROSS_ENTROPY)
        if best is None or base > best[0]:
            best = (base, cur, base_logits)
        g = np.zeros_like(cur)
        for i in coords:
            e = np.zeros_like(cur)
            e[i] = fd.delta
            g[i] = (loss_value(oracle.scores(cur + e), label, CROSS_ENTROPY) - base) / fd.delta
        if budget.norm == LINF:
            direction = np.sign(g)
        else:
            n = np.linalg.norm(g)
            direction = g / n if n > 0 else g
        cur = project(cur + alpha * direction, x, budget)
        done += 1

    final_logits = oracle.scores(cur)
    final = loss_value(final_logits, label, CROSS_ENTROPY)
    if best is None or final >= best[0]:
        best = (final, cur, final_logits)
    obj, adv, logits = best
    return AttackResult(
        adversarial=adv,
        success=int(np.argmax(logits)) != int(label),
        iterations=done,
        perturbation_norm=perturbation_norm(adv - x, budget.norm),
        final_loss=float(obj),
        queries=oracle.queries - start,
    )


# boundary-walk constants; the method leaves them open
ORTHOGONAL_STEP = 0.1
CONTRACTION_STEP = 0.01
TARGET_ACCEPT_RATE = 0.25
ADAPT_WINDOW = 20
ADAPT_FACTOR = 1.5


def boundary_attack(oracle: QueryOracle, x, label: int, init, steps: int = 1000, seed: int = 0) -> AttackResult:
    """Decision-only random walk along the boundary toward ``x``.

    A proposal is an orthogonal move on the sphere around ``x`` followed by
    a contraction toward ``x``; it is accepted iff the oracle still
    misclassifies it and it is no farther from ``x``. Step sizes adapt to
    keep the acceptance rate near 25%.
    """
    x = np.asarray(x, dtype=np.float64)
    cur = np.asarray(init, dtype=np.float64).copy()
    start = oracle.queries
    if oracle.predict(cur) == int(label):
        raise PreconditionError("boundary_attack needs an initial point that is already misclassified")
    rng = np.random.default_rng(seed)
    dist = float(np.linalg.norm(cur - x))
    distances = [dist]
    orth, contract = ORTHOGONAL_STEP, CONTRACTION_STEP
    window = []
    for _ in range(steps):
        if dist == 0:
            break
        diff = x - cur
        unit = diff / dist
        eta = rng.normal(size=x.shape)
        eta -= (eta @ unit) * unit
        en = np.linalg.norm(eta)
        if en > 0:
            eta *= orth * dist / en
        cand = cur + eta
        cand = x + (cand - x) * (dist / np.linalg.norm(cand - x))
        cand = cand + contract * dist * unit
        cand = np.clip(cand, 0.0, 1.0)
        cand_dist = float(np.linalg.norm(cand - x))
        ok = cand_dist <= dist and oracle.predict(cand) != int(label)
        if ok:
            cur, dist = cand, cand_dist
            distances.append(dist)
        window.append(ok)
        if len(window) == ADAPT_WINDOW:
            rate = sum(window) / ADAPT_WINDOW
            if rate > TARGET_ACCEPT_RATE:
                orth, contract = orth * ADAPT_FACTOR, contract * ADAPT_FACTOR
            elif rate < TARGET_ACCEPT_RATE:
                orth, contract = orth / ADAPT_FACTOR, contract / ADAPT_FACTOR
            orth, contract = min(orth, 1.0), min(contract, 0.5)
            window = []
    return AttackResult(
        adversarial=cur,
        success=True,
        iterations=steps,
        perturbation_norm=dist,
        final_loss=-dist,
        queries=oracle.queries - start,
        trace={"distances": distances},
    )


def iterative_fgsm(model, x, label: int, budget: PerturbationBudget, steps: int = 10) -> AttackResult:
    """Basic iterative method: signed steps of epsilon/steps, projected each time."""
    if budget.norm != LINF:
        raise ValueError("iterative_fgsm requires an Linf budget")
    x = np.asarray(x, dtype=np.float64)
    alpha = budget.epsilon / steps
    cur = x.copy()
    for _ in range(steps):
        _, g = objective_and_grad(model, cur, label, CROSS_ENTROPY)
        cur = project(cur + alpha * np.sign(g), x, budget)
    z = model.logits(cur)
    return AttackResult(
        adversarial=cur,
        success=int(np.argmax(z)) != int(label),
        iterations=steps,
        perturbation_norm=perturbation_norm(cur - x, LINF),
        final_loss=loss_value(z, label, CROSS_ENTROPY),
    )


def mi_fgsm(model, x, label: int, budget: PerturbationBudget, steps: int = 10, mu: float = 1.0) -> AttackResult:
    """Momentum iterative FGSM with L1-normalised gradient accumulation."""
    if budget.norm != LINF:
        raise ValueError("mi_fgsm requires an Linf budget")
    if mu < 0:
        raise ValueError("mu must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    alpha = budget.epsilon / steps
    g_acc = np.zeros_like(x)
    cur = x.copy()
    norms = []
    for _ in range(steps):
        _, g = objective_and_grad(model, cur, label, CROSS_ENTROPY)
        l1 = np.sum(np.abs(g))
        g_acc = mu * g_acc + (g / l1 if l1 > 0 else g)
        norms.append(float(np.sum(np.abs(g_acc))))
        cur = project(cur + alpha * np.sign(g_acc), x, budget)
    z = model.logits(cur)
    return AttackResult(
        adversarial=cur,
        success=int(np.argmax(z)) != int(label),
        iterations=steps,
        perturbation_norm=perturbation_norm(cur - x, LINF),
        final_loss=loss_value(z, label, CROSS_ENTROPY),
        trace={"momentum_l1": norms},
    )


class LogitEnsemble:
    """Uniform average of member logits; differentiable like a Network."""

    def __init__(self, members):
        members = list(members)
        if not members:
            raise ValueError("ensemble needs at least one member")
        d, c = members[0].input_dim, members[0].num_classes
        for k, m in enumerate(members):
            if m.input_dim != d or m.num_classes != c:
                raise DimensionError(f"member {k} has dims ({m.input_dim}, {m.num_classes}), expected ({d}, {c})")
        self.members = members
        self.input_dim = d
        self.num_classes = c

    def logits(self, x):
        return sum(m.logits(x) for m in self.members) / len(self.members)

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)

    def input_vjp(self, x, dlogits):
        k = len(self.members)
        return sum(m.input_vjp(x, dlogits) for m in self.members) / k


def ensemble_attack(nets, x, label: int, budget: PerturbationBudget, steps: int = 20, **pgd_kwargs) -> AttackResult:
    return pgd_adaptive(LogitEnsemble(nets), x, label, budget, steps, target=UNTARGETED, **pgd_kwargs)


def transfer_asr(source_adversarials, f: QueryOracle, g: QueryOracle) -> float:
    """Fraction of adversarial inputs misclassified by both ``f`` and ``g``."""
    pairs = list(source_adversarials)
    if not pairs:
        raise ValueError("transfer_asr needs at least one adversarial example")
    hits = 0
    for adv, y in pairs:
        if f.predict(adv) != int(y) and g.predict(adv) != int(y):
            hits += 1
    return hits / len(pairs)


def normalized_transfer_asr(source_adversarials, f: QueryOracle, g: QueryOracle) -> float:
    """Joint ASR divided by the source success rate (0 when the source never succeeds)."""
    pairs = list(source_adversarials)
    fooled = [(a, y) for a, y in pairs if f.predict(a) != int(y)]
    if not fooled:
        return 0.0
    return sum(g.predict(a) != int(y) for a, y in fooled) / len(fooled)
