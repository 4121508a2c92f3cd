"""Multilabel evaluation: confusion counts, micro/macro P/R/F1, fail rate, EMA."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .parser import ParsedOutput
from .vocab import CANONICAL_NAMES, NIH_NAMES, LabelSet

LABEL_FILTERS = {"full14": CANONICAL_NAMES, "nih9": NIH_NAMES}


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


def _f1(p: float, r: float) -> float:
    return _div(2 * p * r, p + r)


@dataclass
class ConfusionCounts:
    labels: tuple[str, ...]
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    n_examples: int = 0
    n_failed: int = 0

    @classmethod
    def empty(cls, labels: Sequence[str]) -> "ConfusionCounts":
        k = len(labels)
        z = lambda: np.zeros(k, dtype=np.int64)  # noqa: E731
        return cls(tuple(labels), z(), z(), z())

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if self.labels != other.labels:
            raise ValueError("cannot merge counts over different label filters")
        return ConfusionCounts(
            self.labels,
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.n_examples + other.n_examples,
            self.n_failed + other.n_failed,
        )

    def per_label(self) -> dict[str, tuple[float, float, float]]:
        out = {}
        for i, name in enumerate(self.labels):
            p = _div(self.tp[i], self.tp[i] + self.fp[i])
            r = _div(self.tp[i], self.tp[i] + self.fn[i])
            out[name] = (p, r, _f1(p, r))
        return out


def confusion(
    preds: Sequence[ParsedOutput],
    golds: Sequence[LabelSet],
    label_filter: Sequence[str] = CANONICAL_NAMES,
) -> ConfusionCounts:
    """Per-label TP/FP/FN. Invalid parses count as empty predictions."""
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    counts = ConfusionCounts.empty(label_filter)
    index = {name: i for i, name in enumerate(counts.labels)}
    for parsed, gold in zip(preds, golds):
        counts.n_examples += 1
        if parsed.valid:
            predicted = set(parsed.predicted.names())
        else:
            predicted = set()
            counts.n_failed += 1
        truth = set(gold.names())
        for name, i in index.items():
            if name in predicted and name in truth:
                counts.tp[i] += 1
            elif name in predicted:
                counts.fp[i] += 1
            elif name in truth:
                counts.fn[i] += 1
    return counts


def micro_prf(c: ConfusionCounts) -> tuple[float, float, float]:
    tp, fp, fn = int(c.tp.sum()), int(c.fp.sum()), int(c.fn.sum())
    p, r = _div(tp, tp + fp), _div(tp, tp + fn)
    return p, r, _f1(p, r)


def macro_prf(c: ConfusionCounts | Mapping[str, float] | Sequence[float]) -> tuple[float, float, float]:
    """Unweighted mean of per-label P/R/F1.

    Also accepts a bare list (or map) of per-label F1 values, in which case
    precision and recall are reported as NaN since they cannot be recovered.
    """
    if isinstance(c, ConfusionCounts):
        rows = np.array(list(c.per_label().values()), dtype=float).reshape(-1, 3)
        if not len(rows):
            return 0.0, 0.0, 0.0
        p, r, f = rows.mean(axis=0)
        return float(p), float(r), float(f)
    values = list(c.values()) if isinstance(c, Mapping) else list(c)
    if not values:
        return 0.0, 0.0, 0.0
    return float("nan"), float("nan"), float(np.mean(values))


def fail_rate(preds: Sequence[ParsedOutput]) -> float:
    if not preds:
        return 0.0
    return sum(not p.valid for p in preds) / len(preds)


def ema(series: Iterable[float], alpha: float = 0.95) -> list[float]:
    """``s_0 = x_0``, ``s_t = alpha * s_{t-1} + (1 - alpha) * x_t``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    xs = [float(x) for x in series]
    if not xs:
        raise ValueError("ema needs a non-empty series")
    out = [xs[0]]
    for x in xs[1:]:
        out.append(alpha * out[-1] + (1 - alpha) * x)
    return out


@dataclass
class EvalReport:
    micro: tuple[float, float, float]
    macro: tuple[float, float, float]
    fail_rate: float
    per_category_f1: dict[str, float] = field(default_factory=dict)
    n_examples: int = 0

    @classmethod
    def from_counts(cls, c: ConfusionCounts) -> "EvalReport":
        return cls(
            micro=micro_prf(c),
            macro=macro_prf(c),
            fail_rate=_div(c.n_failed, c.n_examples),
            per_category_f1={k: v[2] for k, v in c.per_label().items()},
            n_examples=c.n_examples,
        )

    def to_dict(self) -> dict:
        keys = ("precision", "recall", "f1")
        return {
            "micro": dict(zip(keys, self.micro)),
            "macro": dict(zip(keys, self.macro)),
            "fail_rate": self.fail_rate,
            "per_category_f1": dict(self.per_category_f1),
            "n_examples": self.n_examples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def jsonl_rows(self) -> list[str]:
        """One row per category followed by an overall row."""
        rows = [json.dumps({"category": k, "f1": v}) for k, v in self.per_category_f1.items()]
        rows.append(json.dumps({"category": "overall", "micro_f1": self.micro[2], "macro_f1": self.macro[2],
                                "fail_rate": self.fail_rate, "n_examples": self.n_examples}))
        return rows

    def table(self) -> str:
        width = max([len(k) for k in self.per_category_f1] + [26])
        lines = [f"{'Category':<{width}}  F1", "-" * (width + 7)]
        lines += [f"{k:<{width}}  {v:.3f}" for k, v in self.per_category_f1.items()]
        lines.append("-" * (width + 7))
        lines.append(f"{'Overall Average (Macro F1)':<{width}}  {self.macro[2]:.3f}")
        mp, mr, mf = self.micro
        lines.append(f"micro P/R/F1 {mp:.3f}/{mr:.3f}/{mf:.3f}  fail {self.fail_rate:.3f}  n={self.n_examples}")
        return "\n".join(lines)
