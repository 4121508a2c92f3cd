"""Fixed 14-entry finding lexicon, label sets and prevalence statistics."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

CANONICAL_NAMES: tuple[str, ...] = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
)
N_LABELS = len(CANONICAL_NAMES)

NIH_NAMES: tuple[str, ...] = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Lung Lesion",
    "No Finding",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
)

_WS = re.compile(r"\s+")


@dataclass(frozen=True, order=True)
class Label:
    id: int
    name: str

    def __str__(self) -> str:
        return self.name


def normalize(text: str) -> str:
    return _WS.sub(" ", text.strip()).lower()


_LABELS: tuple[Label, ...] = tuple(Label(i, n) for i, n in enumerate(CANONICAL_NAMES))
_BY_KEY: dict[str, Label] = {normalize(l.name): l for l in _LABELS}
assert len(_BY_KEY) == N_LABELS

NO_FINDING = _BY_KEY["no finding"]
PATHOLOGIES: tuple[Label, ...] = tuple(l for l in _LABELS if l != NO_FINDING)


def canonical_labels() -> list[Label]:
    return list(_LABELS)


def parse_label(text: str) -> Label | None:
    """Exact match after lowercasing, trimming and collapsing whitespace runs.

    Returns None for anything outside the lexicon; no fuzzy matching.
    """
    return _BY_KEY.get(normalize(text))


def label(name: str) -> Label:
    """Strict lookup; raises KeyError on an unknown name."""
    found = parse_label(name)
    if found is None:
        raise KeyError(f"unknown label: {name!r}")
    return found


def nih_compatible_subset() -> list[Label]:
    return [label(n) for n in NIH_NAMES]


class LabelSet(frozenset):
    """Immutable set of canonical labels."""

    def __new__(cls, members: Iterable[Label | str | int] = ()):
        return super().__new__(cls, (_coerce(m) for m in members))

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "LabelSet":
        return cls(label(n) for n in names)

    @classmethod
    def from_mask(cls, mask: Sequence[bool] | np.ndarray) -> "LabelSet":
        return cls(_LABELS[i] for i, on in enumerate(mask) if on)

    def names(self) -> list[str]:
        """Member names in canonical order."""
        return [l.name for l in sorted(self)]

    def mask(self) -> np.ndarray:
        m = np.zeros(N_LABELS, dtype=bool)
        for l in self:
            m[l.id] = True
        return m

    def __repr__(self) -> str:
        return f"LabelSet({self.names()!r})"


def _coerce(m: Label | str | int) -> Label:
    if isinstance(m, Label):
        return m
    if isinstance(m, str):
        return label(m)
    return _LABELS[int(m)]


@dataclass(frozen=True)
class LabelStats:
    prevalence: np.ndarray  # shape (14,), fraction of pool items bearing each label

    def __getitem__(self, l: Label | str) -> float:
        return float(self.prevalence[_coerce(l).id])

    @classmethod
    def zeros(cls) -> "LabelStats":
        return cls(np.zeros(N_LABELS))

    def to_dict(self) -> dict[str, float]:
        return {n: float(p) for n, p in zip(CANONICAL_NAMES, self.prevalence)}


def label_stats(pool: Sequence[LabelSet]) -> LabelStats:
    if len(pool) == 0:
        raise ValueError("label_stats needs a non-empty pool")
    counts = np.zeros(N_LABELS)
    for ys in pool:
        counts += ys.mask()
    return LabelStats(counts / len(pool))
