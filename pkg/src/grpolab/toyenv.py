"""Synthetic multilabel task with a known threshold rule, plus a scripted teacher."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import policy as pol
from .parser import FormatSpec
from .sampler import PoolItem
from .vocab import N_LABELS, NO_FINDING, PATHOLOGIES, LabelSet

THRESHOLD = 0.7
RULE = (
    "each label except 'No Finding' is present iff features[label_id] > 0.7; "
    "'No Finding' is present iff no other label is"
)


@dataclass
class TaskInstance:
    features: np.ndarray  # (n, d), entries in [0, 1)
    labels: list[LabelSet]
    seed: int
    rule: str = RULE

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def pool_items(self, prefix: str | None = None) -> list[PoolItem]:
        prefix = f"task{self.seed}" if prefix is None else prefix
        return [
            PoolItem(f"{prefix}-{i:06d}", ys, {"features": [float(v) for v in x]})
            for i, (x, ys) in enumerate(zip(self.features, self.labels))
        ]

    def subset(self, idx) -> "TaskInstance":
        idx = np.asarray(idx)
        return TaskInstance(self.features[idx], [self.labels[i] for i in idx], self.seed, self.rule)


def labels_for(features: np.ndarray) -> LabelSet:
    on = [l for l in PATHOLOGIES if features[l.id] > THRESHOLD]
    return LabelSet(on or [NO_FINDING])


def gen_task(n: int, d: int = 16, seed: int = 0) -> TaskInstance:
    if d < N_LABELS:
        raise ValueError(f"d must be >= {N_LABELS}, got {d}")
    features = np.random.default_rng(seed).random((n, d))
    return TaskInstance(features, [labels_for(x) for x in features], seed)


def task_from_pool(items: list[PoolItem]) -> TaskInstance:
    if not items:
        raise ValueError("empty pool")
    features = np.array([item.payload["features"] for item in items], dtype=float)
    return TaskInstance(features, [item.labels for item in items], seed=-1, rule="imported")


def oracle_tokens(y: LabelSet, rng: np.random.Generator | None = None) -> list[int]:
    """Teacher token sequence: all 14 findings reviewed, then the positive ones listed.

    Canonical label order by default; with ``rng`` both lists are shuffled, which
    keeps the teacher within reach of an order-blind policy.
    """
    if not y:
        raise ValueError("oracle traces need a non-empty label set")
    reviewed = list(range(N_LABELS))
    positives = sorted(y)
    if rng is not None:
        rng.shuffle(reviewed)
        rng.shuffle(positives)
    think = [pol.label_token(i) for i in reviewed]
    solution = [pol.label_token(l.id) for l in positives]
    return [pol.THINK_OPEN, *think, pol.THINK_CLOSE, pol.SOL_OPEN, *solution, pol.SOL_CLOSE, pol.EOS]


def teacher_tokens(features: np.ndarray, y: LabelSet) -> list[int]:
    """Scripted teacher that reasons from the observation.

    Pathologies are reviewed in order of decreasing feature value with
    "No Finding" last, and the positives are listed in that same order. Every
    step is an argmax over a linear score, so the trace is reachable by the
    bag-of-tokens policy.
    """
    if not y:
        raise ValueError("oracle traces need a non-empty label set")
    x = np.asarray(features, dtype=float)
    ranked = sorted(PATHOLOGIES, key=lambda l: -x[l.id]) + [NO_FINDING]
    solution = [pol.label_token(l.id) for l in ranked if l in y]
    think = [pol.label_token(l.id) for l in ranked]
    return [pol.THINK_OPEN, *think, pol.THINK_CLOSE, pol.SOL_OPEN, *solution, pol.SOL_CLOSE, pol.EOS]


def oracle_trace(
    y: LabelSet,
    spec: FormatSpec | str = FormatSpec.THINK_SOLUTION,
    rng: np.random.Generator | None = None,
) -> str:
    spec = FormatSpec.parse(spec)
    tokens = oracle_tokens(y, rng)
    if spec is FormatSpec.THINK_SOLUTION:
        return pol.detokenize(tokens)
    close = tokens.index(pol.THINK_CLOSE)
    analysis = pol.detokenize(tokens[1:close])
    conclusion = pol.detokenize(tokens[close + 2 : -2])
    return "{analysis: " + analysis + ", conclusion: " + conclusion + "}"
