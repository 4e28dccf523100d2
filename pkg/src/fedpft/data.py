"""Synthetic token-classification data.

Vocabulary layout: id 0 is the ``[CLS]`` token that always opens a sequence,
ids ``1..num_classes`` are class markers, everything above is filler. A
sequence contains a handful of markers with a unique most-frequent class.

Rules map that majority class to a label:

* ``majority``: label = majority class.
* ``shifted``: label = (majority class + 1) mod num_classes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

CLS_TOKEN = 0
RULES = ("majority", "shifted")


@dataclass(frozen=True)
class DatasetSpec:
    n: int = 2000
    seq_len: int = 16
    vocab_size: int = 64
    num_classes: int = 4
    rule: str = "shifted"
    noise_rate: float = 0.0
    max_markers: int = 4

    def __post_init__(self):
        if self.vocab_size < self.num_classes + 2:
            raise ValueError(f"vocab_size must be >= num_classes + 2, got {self.vocab_size}")
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.max_markers < 1:
            raise ValueError("max_markers must be >= 1")
        # the majority class plus up to (max_markers - 1) markers of every other class
        if 1 + self.max_markers + (self.num_classes - 1) * (self.max_markers - 1) > self.seq_len:
            raise ValueError("seq_len too short for the requested marker counts")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticDataset:
    tokens: np.ndarray  # [n, seq_len] int64
    labels: np.ndarray  # [n] int64
    spec: DatasetSpec

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SyntheticDataset(self.tokens[idx], self.labels[idx], self.spec)


def marker_counts(tokens: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-sequence count of each class marker, ``[n, num_classes]``."""
    tokens = np.atleast_2d(tokens)
    return np.stack([(tokens == c + 1).sum(axis=1) for c in range(num_classes)], axis=1)


def rule_labels(tokens: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    majority = marker_counts(tokens, spec.num_classes).argmax(axis=1)
    if spec.rule == "shifted":
        return (majority + 1) % spec.num_classes
    return majority


def generate_synthetic(spec: DatasetSpec, seed: int) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    n, S, C = spec.n, spec.seq_len, spec.num_classes
    tokens = rng.integers(C + 1, spec.vocab_size, size=(n, S))
    tokens[:, 0] = CLS_TOKEN
    # balanced majority classes
    majority = rng.permutation(np.arange(n) % C)
    for j in range(n):
        top = rng.integers(2, spec.max_markers + 1)
        counts = rng.integers(0, top, size=C)
        counts[majority[j]] = top
        ids = np.repeat(np.arange(1, C + 1), counts)
        positions = rng.choice(np.arange(1, S), size=len(ids), replace=False)
        tokens[j, positions] = ids
    labels = rule_labels(tokens, spec)
    if spec.noise_rate > 0:
        flip = rng.random(n) < spec.noise_rate
        labels = np.where(flip, rng.integers(0, C, size=n), labels)
    return SyntheticDataset(tokens.astype(np.int64), labels.astype(np.int64), spec)
