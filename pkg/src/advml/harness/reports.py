"""Report tables: TSV (machine-readable source of truth) and Markdown."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from advml.errors import FormatError

NA = "NA"


def _cell(v) -> str:
    if v is None:
        return NA
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError(f"non-finite report cell {v!r}")
        return format(v, ".6f")
    return str(v)


@dataclass
class ReportTable:
    """Header row, labelled rows, and ``#``-prefixed metadata.

    The first column holds the row label; remaining cells are numbers or
    ``None`` (rendered ``NA``) where a metric does not apply.
    """

    columns: list
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, *cells):
        if len(cells) != len(self.columns):
            raise ValueError(f"row has {len(cells)} cells, table has {len(self.columns)} columns")
        self.rows.append(list(cells))

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def row(self, label):
        for r in self.rows:
            if r[0] == label:
                return dict(zip(self.columns, r))
        raise KeyError(label)

    def to_tsv(self) -> str:
        out = [f"# {k}: {v}" for k, v in self.meta.items()]
        out.append("\t".join(self.columns))
        out += ["\t".join(_cell(c) for c in r) for r in self.rows]
        return "\n".join(out) + "\n"

    def to_markdown(self) -> str:
        out = ["| " + " | ".join(self.columns) + " |", "|" + "---|" * len(self.columns)]
        out += ["| " + " | ".join(_cell(c) for c in r) + " |" for r in self.rows]
        if self.meta:
            out.append("")
            out += [f"- {k}: {v}" for k, v in self.meta.items()]
        return "\n".join(out) + "\n"

    def render(self, fmt: str = "tsv") -> str:
        if fmt == "tsv":
            return self.to_tsv()
        if fmt in ("md", "markdown"):
            return self.to_markdown()
        raise ValueError(f"unknown report format {fmt!r}")

    def write(self, path, fmt: str = "tsv"):
        Path(path).write_text(self.render(fmt))


def parse_tsv(text: str) -> ReportTable:
    meta, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(":")
            meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line.split("\t"))
    if not body:
        raise FormatError("report has no header row")
    columns = body[0]
    table = ReportTable(columns, meta=meta)
    for i, r in enumerate(body[1:], start=2):
        if len(r) != len(columns):
            raise FormatError(f"row has {len(r)} cells, expected {len(columns)}", line=i)
        cells = [r[0]]
        for c in r[1:]:
            if c == NA:
                cells.append(None)
            else:
                try:
                    cells.append(float(c))
                except ValueError:
                    cells.append(c)
        table.rows.append(cells)
    return table


def read_tsv(path) -> ReportTable:
    return parse_tsv(Path(path).read_text())
