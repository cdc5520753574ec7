"""
Experiment orchestration behind the CLI: attack suites, transfer matrices,
defense evaluation, certification reports and backdoor pipelines.

Every routine is deterministic given its seed; per-stage randomness is
drawn from :func:`advml.harness.datasets.stage_seed` substreams.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from advml import __version__
from advml.blackbox import (
    FDConfig,
    QueryOracle,
    boundary_attack,
    iterative_fgsm,
    mi_fgsm,
    normalized_transfer_asr,
    transfer_asr,
    zoo_attack,
)
from advml.defenses import (
    AdvTrainConfig,
    BPDAConfig,
    BPDAModel,
    PreprocessedModel,
    QuantConfig,
    QuantizedGradientModel,
    SmoothedClassifier,
    adversarial_train,
    ibp_certify,
    round_inputs,
    smooth_certify,
    smooth_predict,
)
from advml.errors import AdvMLError, CraftingFailedError
from advml.harness.datasets import GRID_SHAPE, Dataset, stage_seed
from advml.harness.reports import ReportTable
from advml.net import Network, init_network, train_sgd
from advml.poisoning import (
    CLEAN,
    PRISTINE,
    apply_trigger,
    backdoor_eval,
    corner_trigger,
    craft_clean_label,
    dirty_label_poison,
    feature_anchor,
)
from advml.whitebox import L2, LINF, CWConfig, PerturbationBudget, cw_l2, fgsm, pgd_adaptive

log = logging.getLogger(__name__)


class ExperimentError(AdvMLError):
    """A pipeline stage failed; the message names the stage."""


def _parse_spec(text, known, what):
    """``name`` or ``name:key=value,key=value`` -> (name, params)."""
    name, _, rest = text.strip().partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        key, eq, value = item.partition("=")
        if not eq:
            raise ValueError(f"{what} parameter {item!r} is not key=value")
        params[key.strip()] = _number(value.strip())
    if name not in known:
        raise ValueError(f"unknown {what} {name!r}; known: {', '.join(sorted(known))}")
    return name, params


def _spec_str(name, params):
    if not params:
        return name
    return name + ":" + ",".join(f"{k}={v}" for k, v in sorted(params.items()))


@dataclass(frozen=True)
class AttackSpec:
    name: str
    params: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "AttackSpec":
        return cls(*_parse_spec(text, ATTACK_NAMES, "attack"))

    def __str__(self):
        return _spec_str(self.name, self.params)


@dataclass(frozen=True)
class DefenseSpec:
    name: str
    params: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "DefenseSpec":
        return cls(*_parse_spec(text, DEFENSES, "defense"))

    def __str__(self):
        return _spec_str(self.name, self.params)


def _number(v):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


# each entry: (model, x, y, epsilon, params, seed) -> (AttackResult, norm used for the budget)


def _fgsm(model, x, y, eps, p, seed):
    return fgsm(model, x, y, PerturbationBudget(LINF, eps)), LINF


def _pgd(model, x, y, eps, p, seed):
    norm = p.get("norm", LINF)
    r = pgd_adaptive(model, x, y, PerturbationBudget(norm, eps), int(p.get("steps", 20)),
                     restarts=int(p.get("restarts", 1)), seed=seed, rand_init=bool(p.get("rand_init", 0)))
    return r, norm


def _bim(model, x, y, eps, p, seed):
    return iterative_fgsm(model, x, y, PerturbationBudget(LINF, eps), int(p.get("steps", 10))), LINF


def _mifgsm(model, x, y, eps, p, seed):
    return mi_fgsm(model, x, y, PerturbationBudget(LINF, eps), int(p.get("steps", 10)), float(p.get("mu", 0.9))), LINF


def _cw(model, x, y, eps, p, seed):
    z = model.logits(x)
    order = np.argsort(-z, kind="stable")
    t = int(order[1]) if int(order[0]) == int(y) else int(order[0])
    cfg = CWConfig(kappa=float(p.get("kappa", 0.0)), c_initial=float(p.get("c", 1.0)),
                   binary_search_steps=int(p.get("search", 6)), inner_iterations=int(p.get("steps", 100)),
                   inner_learning_rate=float(p.get("lr", 0.01)))
    return cw_l2(model, x, t, cfg, label=y), L2


def _zoo(model, x, y, eps, p, seed):
    oracle = QueryOracle.from_model(model)
    fd = FDConfig(delta=float(p.get("delta", 1e-4)), budget=int(p.get("budget", 2000)))
    k = p.get("coords")
    r = zoo_attack(oracle, x, y, PerturbationBudget(LINF, eps), fd, int(p.get("steps", 20)),
                   coords_per_step=None if k is None else int(k), seed=seed)
    return r, LINF


def _boundary(model, x, y, eps, p, seed):
    oracle = QueryOracle.from_model(model, access="decision")
    rng = np.random.default_rng(seed)
    init = None
    for _ in range(int(p.get("init_tries", 200))):
        cand = rng.uniform(size=x.shape)
        if oracle.predict(cand) != int(y):
            init = cand
            break
    if init is None:
        raise ExperimentError("boundary: no misclassified starting point found")
    r = boundary_attack(oracle, x, y, init, int(p.get("steps", 500)), seed=seed)
    r.queries = oracle.queries
    return r, L2


ATTACKS = {
    "fgsm": _fgsm,
    "pgd": _pgd,
    "bim": _bim,
    "mifgsm": _mifgsm,
    "cw": _cw,
    "zoo": _zoo,
    "boundary": _boundary,
}
ATTACK_NAMES = tuple(ATTACKS) + ("fgsm+bpda", "pgd+bpda", "bim+bpda")


def _norm(delta, norm):
    return float(np.max(np.abs(delta))) if norm == LINF else float(np.linalg.norm(delta))


def evaluate_attack(model, data: Dataset, spec: AttackSpec, epsilon: float, seed: int):
    """Run one attack on every point.

    An adversarial only counts when it respects the budget in the attack's
    own norm; otherwise the clean input stands. Returns the per-point final
    inputs plus summary statistics.
    """
    fn = ATTACKS[spec.name.removesuffix("+bpda")]
    base = stage_seed(seed, f"attack:{spec}")
    finals, norms, iters, queries = [], [], [], []
    for i, (x, y) in enumerate(zip(data.inputs, data.labels)):
        res, norm = fn(model, x, int(y), epsilon, spec.params, base + i)
        n = _norm(res.adversarial - x, norm)
        if n <= epsilon + 1e-12:
            finals.append(res.adversarial)
            norms.append(n)
        else:
            finals.append(x.copy())
            norms.append(0.0)
        iters.append(res.iterations)
        queries.append(res.queries)
    finals = np.array(finals)
    adv_acc = float(np.mean(np.argmax(model.logits(finals), axis=1) == data.labels))
    return finals, {
        "adv_acc": adv_acc,
        "mean_norm": float(np.mean(norms)),
        "mean_iters": float(np.mean(iters)),
        "mean_queries": float(np.mean(queries)),
    }


ATTACK_COLUMNS = ["attack", "clean_acc", "adv_acc", "mean_norm", "mean_iters", "mean_queries"]


def run_attack_suite(model, data: Dataset, attacks, epsilon: float, seed: int, dump=None) -> ReportTable:
    """One row per attack, preceded by a ``none`` row holding clean accuracy.

    ``dump`` (a dict) receives the per-attack adversarial inputs when given.
    """
    clean = float(np.mean(np.argmax(model.logits(data.inputs), axis=1) == data.labels))
    table = ReportTable(list(ATTACK_COLUMNS), meta={
        "report": "attack-suite", "epsilon": epsilon, "seed": seed, "points": len(data),
        "attacks": " ".join(str(a) for a in attacks) or "none", "advml": __version__,
    })
    table.add("none", clean, clean, 0.0, 0.0, 0.0)
    for spec in attacks:
        try:
            finals, stats = evaluate_attack(model, data, spec, epsilon, seed)
        except AdvMLError as exc:
            raise ExperimentError(f"attack stage {spec}: {exc}") from exc
        if dump is not None:
            dump[str(spec)] = finals
        table.add(str(spec), clean, stats["adv_acc"], stats["mean_norm"], stats["mean_iters"], stats["mean_queries"])
    return table


def craft_untargeted(model, data: Dataset, spec: AttackSpec, epsilon: float, seed: int):
    finals, _ = evaluate_attack(model, data, spec, epsilon, seed)
    return finals


def run_transfer_matrix(models, data: Dataset, spec: AttackSpec, epsilon: float, seed: int,
                        names=None) -> ReportTable:
    """Cell (i, j): joint-misclassification ASR of examples crafted on model i
    against models i and j. ``norm:`` columns divide by the source's own
    success rate."""
    models = list(models)
    if len(models) < 2:
        raise ValueError("transfer matrix needs at least two models")
    d, k = models[0].input_dim, models[0].num_classes
    for i, m in enumerate(models):
        if (m.input_dim, m.num_classes) != (d, k):
            raise ValueError(f"model {i} dimensions ({m.input_dim}, {m.num_classes}) differ from ({d}, {k})")
    names = names or [f"m{i}" for i in range(len(models))]
    cols = ["source"] + list(names) + [f"norm:{n}" for n in names]
    table = ReportTable(cols, meta={
        "report": "transfer-matrix", "attack": str(spec), "epsilon": epsilon, "seed": seed,
        "points": len(data), "advml": __version__,
    })
    for i, src in enumerate(models):
        advs = craft_untargeted(src, data, spec, epsilon, stage_seed(seed, f"source:{i}"))
        pairs = list(zip(advs, data.labels))
        f = QueryOracle.from_model(src)
        raw = [transfer_asr(pairs, f, QueryOracle.from_model(g)) for g in models]
        normed = [normalized_transfer_asr(pairs, f, QueryOracle.from_model(g)) for g in models]
        table.add(names[i], *raw, *normed)
    return table


def _defended_model(name, params, net, train_data, seed):
    if name in ("none", "ibp", "smoothing"):
        return net
    if name == "quantize":
        return QuantizedGradientModel(net, QuantConfig(int(params.get("bits", 4))))
    if name == "rounding":
        return PreprocessedModel(net, round_inputs(int(params.get("levels", 8))))
    if name == "adv-train":
        if train_data is None:
            raise ExperimentError("adv-train defense needs training data")
        arch = net.dims
        init = init_network(arch, stage_seed(seed, "adv-train:init"))
        cfg = AdvTrainConfig(
            PerturbationBudget(LINF, float(params.get("epsilon", 0.1))),
            inner_steps=int(params.get("inner_steps", 7)),
            epochs=int(params.get("epochs", 60)),
            learning_rate=float(params.get("lr", 0.1)),
            seed=stage_seed(seed, "adv-train:sgd"),
        )
        return adversarial_train(init, train_data.pairs(), cfg)
    raise ExperimentError(f"unknown defense {name!r}")


DEFENSES = ("none", "quantize", "rounding", "adv-train", "ibp", "smoothing")


def run_defense_eval(net: Network, data: Dataset, defenses, attacks, epsilon: float, seed: int,
                     train_data: Dataset | None = None) -> ReportTable:
    """Rows ``defense/attack`` with clean accuracy, robust accuracy and, for
    certifying defenses, the certified fraction at ``epsilon``.

    An attack name suffixed ``+bpda`` attacks a preprocessing defense through
    the noise-averaged straight-through gradient.
    """
    table = ReportTable(["row", "clean_acc", "robust_acc", "certified_frac"], meta={
        "report": "defense-eval", "epsilon": epsilon, "seed": seed, "points": len(data),
        "advml": __version__,
    })
    for dspec in defenses:
        dname, params = dspec.name, dspec.params
        try:
            model = _defended_model(dname, params, net, train_data, seed)
        except AdvMLError as exc:
            raise ExperimentError(f"defense stage {dspec}: {exc}") from exc
        certified = None
        if dname == "ibp":
            certified = float(np.mean([
                ibp_certify(model, x, int(y), epsilon) for x, y in zip(data.inputs, data.labels)
            ]))
        if dname == "smoothing":
            sc = SmoothedClassifier(model, float(params.get("sigma", 0.1)), int(params.get("samples", 1000)),
                                    float(params.get("alpha", 0.001)))
            hits, correct = 0, 0
            for i, (x, y) in enumerate(zip(data.inputs, data.labels)):
                s = stage_seed(seed, f"smooth:{i}")
                c, r = smooth_certify(sc, x, s)
                hits += int(c == int(y) and r >= epsilon)
                correct += int(smooth_predict(sc, x, s) == int(y))
            table.add(f"{dspec}/none", correct / len(data), None, hits / len(data))
            continue
        clean = float(np.mean(np.argmax(model.logits(data.inputs), axis=1) == data.labels))
        table.add(f"{dspec}/none", clean, clean, certified)
        for aspec in attacks:
            target = model
            name = aspec.name
            if name.endswith("+bpda"):
                name = name[: -len("+bpda")]
                if isinstance(model, PreprocessedModel):
                    target = BPDAModel(model.net, model.preprocess,
                                       BPDAConfig(float(aspec.params.get("sigma", 0.02)),
                                                  int(aspec.params.get("samples", 16)), seed))
            try:
                _, stats = evaluate_attack(target, data, AttackSpec(name, aspec.params), epsilon, seed)
            except AdvMLError as exc:
                raise ExperimentError(f"defense {dspec} attack {aspec}: {exc}") from exc
            table.add(f"{dspec}/{aspec}", clean, stats["adv_acc"], certified)
    return table


def run_certification(net: Network, data: Dataset, eps_grid, sigma: float, num_samples: int,
                      alpha: float, seed: int) -> ReportTable:
    cols = ["point", "label", "clean_pred"] + [f"ibp@{e:g}" for e in eps_grid] + ["smooth_pred", "l2_radius"]
    table = ReportTable(cols, meta={
        "report": "certification", "sigma": sigma, "num_samples": num_samples, "alpha": alpha,
        "seed": seed, "advml": __version__,
    })
    sc = SmoothedClassifier(net, sigma, num_samples, alpha)
    for i, (x, y) in enumerate(zip(data.inputs, data.labels)):
        pred = int(np.argmax(net.logits(x)))
        flags = [ibp_certify(net, x, pred, e) for e in eps_grid]
        c, r = smooth_certify(sc, x, stage_seed(seed, f"certify:{i}"))
        table.add(str(i), int(y), pred, *flags, int(c), float(r))
    return table


# ------------------------------------------------------------------ backdoors


@dataclass(frozen=True)
class BackdoorConfig:
    mode: str = "dirty"
    fraction: float = 0.05
    target: int = 0
    epsilon_vis: float = 0.5
    patch: int = 2
    hidden: tuple = (32,)
    epochs: int = 200
    learning_rate: float = 0.3
    craft_steps: int = 40
    craft_step_size: float = 0.05


def grid_trigger(cfg: BackdoorConfig):
    return corner_trigger(GRID_SHAPE, cfg.patch, cfg.epsilon_vis, cfg.epsilon_vis, cfg.target)


def _train_victim(train: Dataset, cfg: BackdoorConfig, seed: int) -> Network:
    dims = [train.dim, *cfg.hidden, train.num_classes]
    net = init_network(dims, stage_seed(seed, "victim:init"))
    return train_sgd(net, train.pairs(), cfg.epochs, cfg.learning_rate, stage_seed(seed, "victim:sgd"))


def clean_label_poison(train: Dataset, trigger, cfg: BackdoorConfig, seed: int, surrogate: Network):
    """Hidden-trigger style clean-label poisons.

    Bases are target-class training samples. Each is pushed (within the
    visibility budget) toward the mean representation of *triggered*
    non-target samples under the surrogate, keeping the surrogate's
    prediction on the target class, and then stamped with the trigger. Labels
    are untouched. Bases whose craft loses label consistency at every step
    count in the halving schedule are skipped.
    """
    X = train.inputs.copy()
    y = train.labels.copy()
    prov = np.array([PRISTINE] * len(y), dtype=object)
    rng = np.random.default_rng(stage_seed(seed, "poison:choose"))
    count = int(round(cfg.fraction * len(y)))
    pool = np.nonzero((y == cfg.target) & (surrogate.predict(X) == cfg.target))[0]
    pool = rng.permutation(pool)
    others = X[y != cfg.target]
    anchor = feature_anchor(surrogate, apply_trigger(others, trigger))
    made = 0
    for idx in pool:
        if made >= count:
            break
        steps, sample = cfg.craft_steps, None
        while steps >= 1 and sample is None:
            try:
                sample = craft_clean_label(surrogate, (X[idx], cfg.target), trigger, steps,
                                           cfg.craft_step_size, anchor=anchor)
            except CraftingFailedError:
                steps //= 2
        if sample is None:
            continue
        X[idx] = apply_trigger(sample.x_p, trigger)
        prov[idx] = CLEAN
        made += 1
    return X, y, prov


def run_backdoor(train: Dataset, test: Dataset, cfg: BackdoorConfig, seed: int):
    """Train a control and a poisoned victim; report clean accuracy and the
    triggered target rate for both. Returns ``(table, poisoned Dataset,
    provenance, trigger)``."""
    trigger = grid_trigger(cfg)
    try:
        control = _train_victim(train, cfg, seed)
    except AdvMLError as exc:
        raise ExperimentError(f"control training: {exc}") from exc
    if cfg.mode == "dirty":
        Xp, yp, prov = dirty_label_poison(train.inputs, train.labels, trigger, cfg.fraction,
                                          stage_seed(seed, "poison:choose"))
    elif cfg.mode == "clean":
        surrogate = _train_victim(train, cfg, stage_seed(seed, "surrogate"))
        Xp, yp, prov = clean_label_poison(train, trigger, cfg, seed, surrogate)
    else:
        raise ExperimentError(f"unknown poisoning mode {cfg.mode!r}")
    poisoned = Dataset(Xp, yp, train.kind, train.seed, train.num_classes)
    try:
        victim = _train_victim(poisoned, cfg, seed)
    except AdvMLError as exc:
        raise ExperimentError(f"victim training: {exc}") from exc
    c_clean, c_rate = backdoor_eval(control, test.pairs(), trigger)
    v_clean, v_rate = backdoor_eval(victim, test.pairs(), trigger)
    table = ReportTable(["model", "clean_acc", "triggered_target_rate", "poisoned_samples"], meta={
        "report": "backdoor", "mode": cfg.mode, "fraction": cfg.fraction, "target": cfg.target,
        "epsilon_vis": cfg.epsilon_vis, "seed": seed, "advml": __version__,
    })
    table.add("control", c_clean, c_rate, 0)
    table.add("poisoned", v_clean, v_rate, int(np.sum(prov != PRISTINE)))
    return table, poisoned, list(prov), trigger


def verify_dump(model, dumps: dict, labels, table: ReportTable):
    """Recompute adversarial accuracy from dumped inputs; returns mismatches."""
    mismatches = []
    for name, finals in dumps.items():
        acc = float(np.mean(np.argmax(model.logits(finals), axis=1) == labels))
        try:
            reported = table.row(name)["adv_acc"]
        except KeyError:
            mismatches.append((name, acc, None))
            continue
        if format(acc, ".6f") != format(float(reported), ".6f"):
            mismatches.append((name, acc, reported))
    return mismatches
