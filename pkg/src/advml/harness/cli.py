"""
Command line entry point.

    advml gen-data --kind two-moons --n 400 --noise 0.1 --seed 0 --out moons.txt
    advml train --data moons.txt --hidden 16,16 --out model.txt
    advml attack --model model.txt --data moons.txt --attacks fgsm,pgd --out report.tsv

Every subcommand accepts ``--seed``, ``--out`` and ``--config``. A config
file holds ``key = value`` lines whose keys are the long option names
(dashes or underscores); explicit command-line flags win over the file.
Exit status: 0 success, 1 experiment failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from advml.errors import AdvMLError
from advml.harness import experiments as ex
from advml.harness.datasets import KINDS, Dataset, gen_dataset, stage_seed
from advml.harness.formats import (
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    save_trigger,
)
from advml.harness.reports import ReportTable, read_tsv
from advml.net import init_network, train_sgd
from advml.defenses import AdvTrainConfig, adversarial_train
from advml.poisoning import dp_train
from advml.whitebox import LINF, PerturbationBudget

log = logging.getLogger("advml")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _int_list(text):
    return [int(t) for t in str(text).split(",") if t.strip()]


def _float_list(text):
    return [float(t) for t in str(text).split(",") if t.strip()]


def _spec_list(text):
    items = [t for t in _split_specs(str(text)) if t]
    return [ex.AttackSpec.parse(t) for t in items]


def _defense_list(text):
    return [ex.DefenseSpec.parse(t) for t in _split_specs(str(text)) if t]


def _split_specs(text):
    """Split ``a,b:k=1,j=2,c`` on commas that start a new spec (a bare name
    or ``name:``), keeping parameter lists together."""
    parts, cur = [], ""
    for tok in text.split(","):
        tok = tok.strip()
        if cur and "=" in tok and ":" not in tok:
            cur += "," + tok
        else:
            if cur:
                parts.append(cur)
            cur = tok
    if cur:
        parts.append(cur)
    return parts


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=False)
    p.add_argument("--config")
    p.add_argument("--format", choices=["tsv", "md"], default="tsv")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advml", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--kind", choices=KINDS, default="two-moons")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--noise", type=float, default=0.1)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--hidden", type=_int_list, default=[16, 16])
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--method", choices=["standard", "adversarial", "dp"], default="standard")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--inner-steps", type=int, default=7)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--noise-multiplier", type=float, default=0.0)

    p = sub.add_parser("attack", help="run an attack suite and report accuracies")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--attacks", type=_spec_list, default=[])
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--dump", help="directory receiving one ADVDATA file of adversarials per attack")

    p = sub.add_parser("transfer-matrix", help="cross-model transfer ASR table")
    _common(p)
    p.add_argument("--models", type=lambda s: s.split(","))
    p.add_argument("--data")
    p.add_argument("--attack", type=ex.AttackSpec.parse, default=ex.AttackSpec("pgd", {"steps": 100}))
    p.add_argument("--epsilon", type=float, default=0.15)

    p = sub.add_parser("defend", help="evaluate defenses against attacks")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--train-data")
    p.add_argument("--defenses", type=_defense_list, default=_defense_list("none"))
    p.add_argument("--attacks", type=_spec_list, default=[])
    p.add_argument("--epsilon", type=float, default=0.1)

    p = sub.add_parser("certify", help="per-point IBP and smoothing certificates")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--eps-grid", type=_float_list, default=[0.01, 0.02, 0.05])
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--num-samples", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--limit", type=int, default=0, help="certify only the first N points (0 = all)")

    p = sub.add_parser("poison", help="backdoor poisoning pipeline")
    _common(p)
    p.add_argument("--data", help="training set")
    p.add_argument("--test", help="test set")
    p.add_argument("--mode", choices=["dirty", "clean"], default="dirty")
    p.add_argument("--fraction", type=float, default=0.05)
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--epsilon-vis", type=float, default=0.5)
    p.add_argument("--hidden", type=_int_list, default=[32])
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.3)
    p.add_argument("--poisoned-out", help="write the poisoned dataset (with provenance column)")
    p.add_argument("--trigger-out", help="write the trigger sidecar")

    p = sub.add_parser("verify", help="recompute an attack report from dumped adversarials")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--dump")
    p.add_argument("--report")
    return parser


REQUIRED = {
    "gen-data": ["out"],
    "train": ["data", "out"],
    "attack": ["model", "data"],
    "transfer-matrix": ["models", "data"],
    "defend": ["model", "data"],
    "certify": ["model", "data"],
    "poison": ["data", "test"],
    "verify": ["model", "data", "dump", "report"],
}


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = read_config(args.config)
        except OSError as exc:
            parser.error(f"cannot read config: {exc}")
        except UsageError as exc:
            parser.error(str(exc))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        for key in cfg:
            if key not in known or key in ("config", "help"):
                parser.error(f"config key {key!r} is not an option of {args.command}")
        sub.set_defaults(**{k: _convert(known[k], v, parser) for k, v in cfg.items()})
        args = parser.parse_args(argv)
    missing = [f"--{m.replace('_', '-')}" for m in REQUIRED[args.command] if getattr(args, m) in (None, [])]
    if missing:
        parser.error(f"{args.command}: missing required option(s) {' '.join(missing)}")
    return args


def _convert(action, value, parser):
    if action.type is None:
        return value
    try:
        return action.type(value)
    except (TypeError, ValueError) as exc:
        parser.error(f"config value for {action.dest}: {exc}")


def _emit(table: ReportTable, args):
    text = table.render(args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_data(args):
    data = gen_dataset(args.kind, args.n, args.noise, args.seed)
    save_dataset(data, args.out)
    log.info("wrote %d samples to %s", len(data), args.out)


def cmd_train(args):
    data = load_dataset(args.data)
    dims = [data.dim, *args.hidden, data.num_classes]
    net = init_network(dims, stage_seed(args.seed, "train:init"))
    sgd_seed = stage_seed(args.seed, "train:sgd")
    if args.method == "standard":
        net = train_sgd(net, data.pairs(), args.epochs, args.lr, sgd_seed, args.batch_size)
    elif args.method == "adversarial":
        cfg = AdvTrainConfig(PerturbationBudget(LINF, args.epsilon), args.inner_steps, None, args.epochs,
                             args.lr, sgd_seed, args.batch_size)
        net = adversarial_train(net, data.pairs(), cfg)
    else:
        net = dp_train(net, data.pairs(), args.epochs, args.lr, args.clip_norm, args.noise_multiplier,
                       sgd_seed, args.batch_size)
    save_model(net, args.out)
    acc = float(np.mean(net.predict(data.inputs) == data.labels))
    log.info("train accuracy %.4f, model written to %s", acc, args.out)


def _dump_name(spec_text):
    return spec_text.replace(":", "_").replace(",", "_").replace("=", "-") + ".advdata"


def cmd_attack(args):
    net = load_model(args.model)
    data = load_dataset(args.data)
    dumps = {} if args.dump else None
    table = ex.run_attack_suite(net, data, args.attacks, args.epsilon, args.seed, dump=dumps)
    _emit(table, args)
    if dumps is not None:
        d = Path(args.dump)
        d.mkdir(parents=True, exist_ok=True)
        index = []
        for name, finals in dumps.items():
            fname = _dump_name(name)
            save_dataset(Dataset(finals, data.labels, num_classes=data.num_classes), d / fname)
            index.append(f"{name}\t{fname}")
        (d / "index.tsv").write_text("\n".join(index) + "\n")


def cmd_transfer(args):
    models = [load_model(p) for p in args.models]
    data = load_dataset(args.data)
    names = [Path(p).stem for p in args.models]
    _emit(ex.run_transfer_matrix(models, data, args.attack, args.epsilon, args.seed, names), args)


def cmd_defend(args):
    net = load_model(args.model)
    data = load_dataset(args.data)
    train = load_dataset(args.train_data) if args.train_data else None
    _emit(ex.run_defense_eval(net, data, args.defenses, args.attacks, args.epsilon, args.seed, train), args)


def cmd_certify(args):
    net = load_model(args.model)
    data = load_dataset(args.data)
    if args.limit:
        data = data.subset(slice(0, args.limit))
    table = ex.run_certification(net, data, args.eps_grid, args.sigma, args.num_samples, args.alpha, args.seed)
    _emit(table, args)


def cmd_poison(args):
    train = load_dataset(args.data)
    test = load_dataset(args.test)
    cfg = ex.BackdoorConfig(mode=args.mode, fraction=args.fraction, target=args.target,
                            epsilon_vis=args.epsilon_vis, hidden=tuple(args.hidden), epochs=args.epochs,
                            learning_rate=args.lr)
    table, poisoned, prov, trigger = ex.run_backdoor(train, test, cfg, args.seed)
    _emit(table, args)
    if args.poisoned_out:
        save_dataset(poisoned, args.poisoned_out, provenance=prov)
    if args.trigger_out:
        save_trigger(trigger, args.trigger_out)


def cmd_verify(args):
    net = load_model(args.model)
    data = load_dataset(args.data)
    table = read_tsv(args.report)
    d = Path(args.dump)
    dumps = {}
    for line in (d / "index.tsv").read_text().splitlines():
        if line.strip():
            name, fname = line.split("\t")
            dumps[name] = load_dataset(d / fname).inputs
    bad = ex.verify_dump(net, dumps, data.labels, table)
    out = ReportTable(["attack", "recomputed_adv_acc", "reported_adv_acc", "match"], meta={"report": "verify"})
    for name, finals in dumps.items():
        acc = float(np.mean(np.argmax(net.logits(finals), axis=1) == data.labels))
        rep = table.row(name)["adv_acc"] if name in table.column("attack") else None
        out.add(name, acc, rep, all(b[0] != name for b in bad))
    _emit(out, args)
    if bad:
        raise ex.ExperimentError(f"verify: {len(bad)} attack row(s) do not match the report")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "transfer-matrix": cmd_transfer,
    "defend": cmd_defend,
    "certify": cmd_certify,
    "poison": cmd_poison,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (AdvMLError, OSError, ValueError) as exc:
        print(f"advml {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
