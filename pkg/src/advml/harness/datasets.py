"""Desk-scale synthetic datasets living in the unit box."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

TWO_MOONS = "two-moons"
GRID_DIGITS = "grid-digits"
CUSTOM = "custom"
KINDS = (TWO_MOONS, GRID_DIGITS)

GRID_SHAPE = (6, 6)

# 6x6 glyphs; the bottom-right 2x2 corner is empty in all of them so a
# corner patch is a feature no clean class uses.
_GLYPHS = [
    """
    .###..
    #...#.
    #...#.
    #...#.
    .###..
    ......
    """,
    """
    ..#...
    .##...
    ..#...
    ..#...
    ..#...
    .###..
    """,
    """
    #####.
    ....#.
    ...#..
    ..#...
    .#....
    #.....
    """,
    """
    ......
    ..#...
    #####.
    ..#...
    ..#...
    ..#...
    """,
]


def _parse_glyph(text):
    rows = [r.strip() for r in text.strip().splitlines()]
    return np.array([[1.0 if ch == "#" else 0.0 for ch in r] for r in rows])


GLYPHS = np.stack([_parse_glyph(g).ravel() for g in _GLYPHS])


def stage_seed(seed: int, stage: str) -> int:
    """Independent, reproducible seed for a named pipeline stage."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    kind: str = CUSTOM
    seed: int = 0
    num_classes: int | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError("inputs must be (n, d) with one label per row")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if np.any(self.inputs < 0) or np.any(self.inputs > 1):
            raise ValueError("inputs must lie in the unit box")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def pairs(self):
        return list(zip(self.inputs, self.labels))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.kind, self.seed, self.num_classes)

    def split(self, n_first: int):
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
        )


def _two_moons(n, noise, rng):
    n_a = n - n // 2
    n_b = n // 2
    t_a = np.linspace(0, np.pi, n_a)
    t_b = np.linspace(0, np.pi, n_b)
    a = np.column_stack([np.cos(t_a), np.sin(t_a)])
    b = np.column_stack([1 - np.cos(t_b), 0.5 - np.sin(t_b)])
    X = np.vstack([a, b])
    y = np.concatenate([np.zeros(n_a, dtype=np.int64), np.ones(n_b, dtype=np.int64)])
    X = X + noise * rng.normal(size=X.shape)
    # x in [-1, 2], y in [-0.5, 1] -> centred square of side 0.75
    X = (X - np.array([0.5, 0.25])) / 4.0 + 0.5
    return np.clip(X, 0.0, 1.0), y, 2


def _grid_digits(n, noise, rng):
    k = len(GLYPHS)
    y = np.arange(n) % k
    X = GLYPHS[y].copy()
    if noise > 0:
        flips = rng.uniform(size=X.shape) < noise
        X[flips] = 1.0 - X[flips]
    return X, y.astype(np.int64), k


def gen_dataset(kind: str, n: int, noise: float, seed: int) -> Dataset:
    if n < 2:
        raise ValueError("n must be >= 2")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    if kind == TWO_MOONS:
        X, y, k = _two_moons(n, noise, rng)
    elif kind == GRID_DIGITS:
        X, y, k = _grid_digits(n, noise, rng)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    order = rng.permutation(n)
    return Dataset(X[order], y[order], kind, seed, k)
