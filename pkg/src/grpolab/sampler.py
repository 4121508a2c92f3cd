"""Greedy deficit/surplus sampler with a per-label minimum-coverage target."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .vocab import CANONICAL_NAMES, N_LABELS, LabelSet


@dataclass(frozen=True)
class PoolItem:
    id: str
    labels: LabelSet
    payload: dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not self.labels:
            raise ValueError(f"pool item {self.id!r} has no labels")

    def to_json(self) -> dict:
        return {"id": self.id, "labels": self.labels.names(), "payload": self.payload}

    @classmethod
    def from_json(cls, obj: dict) -> "PoolItem":
        return cls(id=str(obj["id"]), labels=LabelSet.from_names(obj["labels"]), payload=dict(obj.get("payload") or {}))


@dataclass
class SamplePlan:
    n: int
    min_fraction: float = 0.05
    overrepresentation_penalty: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0 < self.min_fraction < 1:
            raise ValueError("min_fraction must be in (0, 1)")
        if self.overrepresentation_penalty <= 0:
            raise ValueError("overrepresentation_penalty must be > 0")

    @property
    def target(self) -> int:
        """Per-label minimum count, ceil(min_fraction * n)."""
        return math.ceil(self.min_fraction * self.n - 1e-9)


class InsufficientPoolError(ValueError):
    pass


class Selection(list):
    """Selected pool items, plus the audit trail of the greedy loop.

    ``trace`` holds the score of each pick in order; ``shortfall`` maps a label
    name to the number of items the pool lacked to reach the target.
    """

    def __init__(self, items=(), trace=(), shortfall=None, target=0):
        super().__init__(items)
        self.trace: list[float] = list(trace)
        self.shortfall: dict[str, int] = dict(shortfall or {})
        self.target = target

    @property
    def coverage_warning(self) -> bool:
        return bool(self.shortfall)

    def label_counts(self) -> dict[str, int]:
        return label_counts(self)


def label_counts(items: Iterable[PoolItem]) -> dict[str, int]:
    counts = np.zeros(N_LABELS, dtype=np.int64)
    for item in items:
        counts += item.labels.mask()
    return {n: int(c) for n, c in zip(CANONICAL_NAMES, counts)}


def _label_weights(counts: np.ndarray, target: int, penalty: float) -> np.ndarray:
    deficit = target - counts
    return np.where(deficit > 0, deficit, penalty * deficit).astype(float)


def score_candidate(item: PoolItem, selected_counts: Sequence[int], n: int, plan: SamplePlan) -> float:
    """Sum of per-label deficits, minus penalty * surplus for labels already at target."""
    target = math.ceil(plan.min_fraction * n - 1e-9)
    w = _label_weights(np.asarray(selected_counts), target, plan.overrepresentation_penalty)
    return float(w[item.labels.mask()].sum())


def feasibility_shortfall(pool: Sequence[PoolItem], plan: SamplePlan) -> dict[str, int]:
    available = label_counts(pool)
    return {name: plan.target - c for name, c in available.items() if c < plan.target}


def balanced_sample(pool: Sequence[PoolItem], plan: SamplePlan) -> Selection:
    if len(pool) < plan.n:
        raise InsufficientPoolError(f"pool has {len(pool)} items but n={plan.n} were requested")
    rng = np.random.default_rng(plan.seed)
    order = rng.permutation(len(pool))
    masks = np.array([pool[i].labels.mask() for i in order], dtype=float).reshape(len(pool), N_LABELS)

    # Items sharing a label mask always score the same, so score each distinct mask once
    # and take its earliest untaken item; ties go to the earliest item overall, exactly
    # as an argmax over the shuffled pool would.
    uniq, inverse = np.unique(masks, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    by_mask = np.argsort(inverse, kind="stable")
    starts = np.searchsorted(inverse[by_mask], np.arange(len(uniq)))
    ends = np.append(starts[1:], len(by_mask))
    head = starts.copy()

    target = plan.target
    counts = np.zeros(N_LABELS)
    picks, trace = [], []
    for _ in range(plan.n):
        scores = uniq @ _label_weights(counts, target, plan.overrepresentation_penalty)
        scores[head == ends] = -np.inf
        best = np.flatnonzero(scores == scores.max())
        u = best[np.argmin(by_mask[head[best]])]
        k = by_mask[head[u]]
        head[u] += 1
        counts += uniq[u]
        picks.append(pool[order[k]])
        trace.append(float(scores[u]))
    return Selection(picks, trace, feasibility_shortfall(pool, plan), target)


def split_disjoint(
    pool: Sequence[PoolItem], n_sft: int, n_rl: int, plan: SamplePlan
) -> tuple[Selection, Selection]:
    """Balanced SFT selection, then a balanced RL selection from what is left."""
    if n_sft + n_rl > len(pool):
        raise InsufficientPoolError(
            f"pool has {len(pool)} items but n_sft + n_rl = {n_sft + n_rl} were requested"
        )
    sft = balanced_sample(pool, _with_n(plan, n_sft))
    chosen = {item.id for item in sft}
    rest = [item for item in pool if item.id not in chosen]
    rl = balanced_sample(rest, _with_n(plan, n_rl))
    return sft, rl


def _with_n(plan: SamplePlan, n: int) -> SamplePlan:
    return SamplePlan(n, plan.min_fraction, plan.overrepresentation_penalty, plan.seed)


def read_pool(path: str | Path) -> list[PoolItem]:
    items = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                items.append(PoolItem.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    ids = [item.id for item in items]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate ids in pool")
    return items


def write_pool(path: str | Path, items: Iterable[PoolItem]) -> None:
    with open(path, "w") as fh:
        for item in items:
            fh.write(json.dumps(item.to_json(), sort_keys=True) + "\n")
