"""Synthetic long-term-dependency and function-fitting datasets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mathcore import make_rng


@dataclass
class SequenceDataset:
    """Symbol sequences; the class is carried only by the first symbols."""

    symbols: np.ndarray  # (N, T) int
    labels: np.ndarray  # (N,) int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.labels.size

    @property
    def alphabet(self) -> int:
        return int(self.meta["alphabet"])

    @property
    def num_classes(self) -> int:
        return int(self.meta["num_classes"])

    @property
    def inputs(self) -> np.ndarray:
        """One-hot encoding, shape ``(N, T, alphabet)``."""
        return np.eye(self.alphabet)[self.symbols]

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"label": int(lab), "symbols": row.tolist()}) + "\n"
            for lab, row in zip(self.labels, self.symbols)
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path, meta: dict | None = None) -> "SequenceDataset":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not rows:
            raise ValueError(f"{path}: no sequences")
        lengths = {len(r["symbols"]) for r in rows}
        if len(lengths) != 1:
            raise ValueError(f"{path}: sequences have differing lengths {sorted(lengths)}")
        symbols = np.array([r["symbols"] for r in rows], dtype=np.int64)
        labels = np.array([r["label"] for r in rows], dtype=np.int64)
        meta = dict(meta or {})
        meta.setdefault("T", symbols.shape[1])
        meta.setdefault("alphabet", int(symbols.max()) + 1)
        meta.setdefault("num_classes", int(labels.max()) + 1)
        return cls(symbols, labels, meta)


def prefix_label(symbols, prefix_len: int, num_classes: int) -> int:
    """Class encoded by a prefix: the repeated symbol, if it names a class."""
    head = np.asarray(symbols)[:prefix_len]
    c = int(head[0])
    if c >= num_classes or np.any(head != c):
        raise ValueError("prefix does not encode a class")
    return c


def _balanced_labels(n: int, num_classes: int, rng) -> np.ndarray:
    labels = np.arange(n) % num_classes
    return rng.permutation(labels)


def _split(n, T, prefix_len, num_classes, alphabet, rng, disjoint_noise):
    labels = _balanced_labels(n, num_classes, rng)
    if disjoint_noise:
        noise = rng.integers(num_classes, alphabet, size=(n, T - prefix_len))
    else:
        noise = rng.integers(0, alphabet, size=(n, T - prefix_len))
    prefix = np.repeat(labels[:, None], prefix_len, axis=1)
    return np.concatenate([prefix, noise], axis=1).astype(np.int64), labels.astype(np.int64)


def gen_prefix_task(T: int, prefix_len: int, num_classes: int, alphabet: int,
                    n_train: int, n_test: int, seed: int, disjoint_noise: bool = False):
    """Train/test splits where only the first ``prefix_len`` symbols carry the class.

    Class ``c`` is written as symbol ``c`` repeated over the prefix; every
    later position is drawn uniformly from the alphabet (or from the
    non-class symbols when ``disjoint_noise`` is set).
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if alphabet < num_classes:
        raise ValueError(f"alphabet size {alphabet} is smaller than num_classes {num_classes}")
    if disjoint_noise and alphabet == num_classes:
        raise ValueError("disjoint noise needs alphabet > num_classes")
    if prefix_len < 1:
        raise ValueError("prefix_len must be at least 1")
    if T <= prefix_len:
        raise ValueError(f"T={T} must exceed prefix_len={prefix_len}")
    rng = make_rng(seed)
    meta = dict(T=T, prefix_len=prefix_len, num_classes=num_classes, alphabet=alphabet,
                seed=seed, disjoint_noise=disjoint_noise)
    train = SequenceDataset(*_split(n_train, T, prefix_len, num_classes, alphabet, rng,
                                    disjoint_noise), dict(meta, split="train"))
    test = SequenceDataset(*_split(n_test, T, prefix_len, num_classes, alphabet, rng,
                                   disjoint_noise), dict(meta, split="test"))
    return train, test


def _smooth_square(x):
    return np.tanh(5.0 * np.sin(x))


FITTING_FUNCTIONS = {
    "sin": np.sin,
    "tanh": np.tanh,
    "bump": lambda x: np.exp(-x * x),
    "square-wave-smooth": _smooth_square,
}


@dataclass
class FittingDataset:
    inputs: np.ndarray
    targets: np.ndarray
    fn: str
    range: tuple[float, float]


def gen_fitting_task(fn: str, range: tuple[float, float], n: int, seed: int) -> FittingDataset:
    if fn not in FITTING_FUNCTIONS:
        raise ValueError(f"unknown function {fn!r}; expected one of {sorted(FITTING_FUNCTIONS)}")
    if n < 2:
        raise ValueError("need at least 2 points")
    lo, hi = range
    if not lo < hi:
        raise ValueError("empty range")
    x = make_rng(seed).uniform(lo, hi, size=n)
    return FittingDataset(x, FITTING_FUNCTIONS[fn](x), fn, (lo, hi))
