"""
Line-oriented text formats.

Model (``ADVNET v1``)::

    ADVNET v1
    dims d0 d1 ... dL
    acts a1 ... aL            # relu | id
    <layer 1: row-major weights then biases>
    ...

Dataset (``ADVDATA v1 d k n``): one sample per line, ``d`` reals then the
label, optionally followed by a provenance token (clean / dirty / pristine).

Trigger (``ADVTRIGGER v1``)::

    ADVTRIGGER v1
    shape d
    norm linf
    epsilon_vis 0.5
    target 0
    <d reals>

Reals are written with 17 significant digits so round trips are bit-exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from advml.errors import FormatError, VersionError
from advml.harness.datasets import CUSTOM, Dataset
from advml.net import ACTIVATIONS, DenseLayer, Network
from advml.poisoning import CLEAN, DIRTY, PRISTINE, Trigger

MODEL_MAGIC = "ADVNET"
DATA_MAGIC = "ADVDATA"
TRIGGER_MAGIC = "ADVTRIGGER"
VERSION = "v1"
PROVENANCES = (CLEAN, DIRTY, PRISTINE)


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def _join(values) -> str:
    return " ".join(fmt(v) for v in np.ravel(values))


def _header(tokens, magic, path, line=1):
    if not tokens or tokens[0] != magic:
        raise FormatError(f"expected {magic} header", line=line, path=path)
    if len(tokens) < 2 or tokens[1] != VERSION:
        got = tokens[1] if len(tokens) > 1 else "<missing>"
        raise VersionError(f"unsupported {magic} version {got}, expected {VERSION}", line=line, path=path)


def _reals(tokens, path, line):
    try:
        return np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"bad number ({exc})", line=line, path=path) from None


def dump_model(net: Network) -> str:
    lines = [f"{MODEL_MAGIC} {VERSION}", "dims " + " ".join(str(d) for d in net.dims),
             "acts " + " ".join(net.activations)]
    for layer in net.layers:
        lines.append(_join(layer.weights) + " " + _join(layer.bias))
    return "\n".join(lines) + "\n"


def parse_model(text: str, path=None) -> Network:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty model file", line=1, path=path)
    _header(lines[0].split(), MODEL_MAGIC, path)
    if len(lines) < 3:
        raise FormatError("truncated header", line=len(lines) + 1, path=path)
    dims_tok = lines[1].split()
    if not dims_tok or dims_tok[0] != "dims":
        raise FormatError("expected 'dims' line", line=2, path=path)
    try:
        dims = [int(t) for t in dims_tok[1:]]
    except ValueError:
        raise FormatError("dims must be integers", line=2, path=path) from None
    if len(dims) < 2 or min(dims) < 1:
        raise FormatError("need at least two positive dims", line=2, path=path)
    acts = lines[2].split()
    if not acts or acts[0] != "acts" or len(acts) - 1 != len(dims) - 1:
        raise FormatError(f"expected 'acts' line with {len(dims) - 1} entries", line=3, path=path)
    acts = acts[1:]
    for a in acts:
        if a not in ACTIVATIONS:
            raise FormatError(f"unknown activation {a!r}", line=3, path=path)
    layers = []
    for k in range(len(dims) - 1):
        lineno = 4 + k
        if lineno > len(lines):
            raise FormatError(f"missing parameters for layer {k}", line=lineno, path=path)
        vals = _reals(lines[lineno - 1].split(), path, lineno)
        n_in, n_out = dims[k], dims[k + 1]
        if vals.size != n_out * n_in + n_out:
            raise FormatError(
                f"layer {k} expects {n_out * n_in + n_out} values, found {vals.size}", line=lineno, path=path
            )
        try:
            layers.append(DenseLayer(vals[:n_out * n_in].reshape(n_out, n_in), vals[n_out * n_in:], acts[k]))
        except ValueError as exc:
            raise FormatError(str(exc), line=lineno, path=path) from None
    extra = [i for i in range(3 + len(layers), len(lines)) if lines[i].strip()]
    if extra:
        raise FormatError("unexpected trailing content", line=extra[0] + 1, path=path)
    try:
        return Network(layers)
    except ValueError as exc:
        raise FormatError(str(exc), path=path) from None


def save_model(net: Network, path) -> None:
    Path(path).write_text(dump_model(net))


def load_model(path) -> Network:
    return parse_model(Path(path).read_text(), path=path)


def dump_dataset(data: Dataset, provenance=None) -> str:
    lines = [f"{DATA_MAGIC} {VERSION} {data.dim} {data.num_classes} {len(data)}"]
    for i, (x, y) in enumerate(zip(data.inputs, data.labels)):
        row = _join(x) + f" {int(y)}"
        if provenance is not None:
            row += f" {provenance[i]}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def parse_dataset(text: str, path=None):
    """Returns ``(Dataset, provenance or None)``."""
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty dataset file", line=1, path=path)
    head = lines[0].split()
    _header(head, DATA_MAGIC, path)
    try:
        d, k, n = (int(t) for t in head[2:5])
    except ValueError:
        raise FormatError("header needs integers d k n", line=1, path=path) from None
    body = lines[1:]
    if len(body) < n:
        raise FormatError(f"expected {n} samples, file ends after {len(body)}", line=len(lines) + 1, path=path)
    X = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    prov = []
    for i in range(n):
        lineno = i + 2
        tok = body[i].split()
        if len(tok) not in (d + 1, d + 2):
            raise FormatError(f"expected {d} values and a label", line=lineno, path=path)
        X[i] = _reals(tok[:d], path, lineno)
        try:
            y[i] = int(tok[d])
        except ValueError:
            raise FormatError("label must be an integer", line=lineno, path=path) from None
        if len(tok) == d + 2:
            if tok[d + 1] not in PROVENANCES:
                raise FormatError(f"unknown provenance {tok[d + 1]!r}", line=lineno, path=path)
            prov.append(tok[d + 1])
    if prov and len(prov) != n:
        raise FormatError("provenance column must be present on every line or none", path=path)
    try:
        data = Dataset(X, y, CUSTOM, 0, k)
    except ValueError as exc:
        raise FormatError(str(exc), path=path) from None
    return data, (prov or None)


def save_dataset(data: Dataset, path, provenance=None) -> None:
    Path(path).write_text(dump_dataset(data, provenance))


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_text(), path=path)[0]


def load_dataset_with_provenance(path):
    return parse_dataset(Path(path).read_text(), path=path)


def dump_trigger(trigger: Trigger) -> str:
    return "\n".join([
        f"{TRIGGER_MAGIC} {VERSION}",
        f"shape {trigger.pattern.size}",
        f"norm {trigger.norm}",
        f"epsilon_vis {fmt(trigger.epsilon_vis)}",
        f"target {trigger.target}",
        _join(trigger.pattern),
    ]) + "\n"


def parse_trigger(text: str, path=None) -> Trigger:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty trigger file", line=1, path=path)
    _header(lines[0].split(), TRIGGER_MAGIC, path)
    fields = {}
    for i, key in enumerate(("shape", "norm", "epsilon_vis", "target"), start=2):
        tok = lines[i - 1].split() if i <= len(lines) else []
        if len(tok) != 2 or tok[0] != key:
            raise FormatError(f"expected '{key} <value>'", line=i, path=path)
        fields[key] = tok[1]
    if len(lines) < 6:
        raise FormatError("missing pattern line", line=6, path=path)
    pattern = _reals(lines[5].split(), path, 6)
    if pattern.size != int(fields["shape"]):
        raise FormatError("pattern length does not match shape", line=6, path=path)
    return Trigger(pattern, float(fields["epsilon_vis"]), fields["norm"], int(fields["target"]))


def save_trigger(trigger: Trigger, path) -> None:
    Path(path).write_text(dump_trigger(trigger))


def load_trigger(path) -> Trigger:
    return parse_trigger(Path(path).read_text(), path=path)
