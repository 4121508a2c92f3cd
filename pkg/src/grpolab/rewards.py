"""Format-gated Jaccard reward, multi-component reward and the collapse monitor."""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .parser import ParsedOutput
from .vocab import CANONICAL_NAMES, N_LABELS, LabelSet, LabelStats

COMPONENTS = ("match", "partial", "fp", "collapse", "format", "length")


@dataclass
class HardRewardConfig:
    min_length_tokens: int = 250
    length_penalty: float = 0.2

    def __post_init__(self):
        if self.min_length_tokens <= 0:
            raise ValueError("min_length_tokens must be positive")
        if self.length_penalty < 0:
            raise ValueError("length_penalty must be >= 0")


@dataclass
class NuancedRewardConfig:
    exact_match_bonus: float = 100.0
    recall_scale: float = 30.0
    precision_scale: float = 20.0
    invalid_label_penalty: float = 100.0
    duplicate_penalty: float = 25.0
    collapse_penalty: float = 50.0
    excess_repetition_penalty: float = 30.0
    dominance_threshold: float = 0.70
    window_size: int = 100
    fp_base_penalty: float = 10.0
    format_penalty: float = 100.0
    extraneous_penalty: float = 10.0

    def __post_init__(self):
        for name in (
            "exact_match_bonus",
            "recall_scale",
            "precision_scale",
            "invalid_label_penalty",
            "duplicate_penalty",
            "collapse_penalty",
            "excess_repetition_penalty",
            "fp_base_penalty",
            "format_penalty",
            "extraneous_penalty",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.dominance_threshold <= 1:
            raise ValueError("dominance_threshold must be in (0, 1]")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")


@dataclass
class RewardBreakdown:
    """Total reward and its signed components; penalties are stored as negatives."""

    total: float
    components: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_components(cls, **components: float) -> "RewardBreakdown":
        # "+ 0.0" turns negated zero penalties (-0.0) into plain 0.0
        comps = {k: float(v) + 0.0 for k, v in components.items()}
        return cls(total=float(sum(comps.values())) + 0.0, components=comps)


class CollapseMonitor:
    """Sliding window over the most recent predicted label sets.

    Single writer: observations must arrive in generation order.
    """

    def __init__(self, window_size: int = 100):
        if window_size < 1:
            raise ValueError("window_size must be >= 1")
        self.window_size = window_size
        self.window: deque[LabelSet] = deque()
        self.counts = np.zeros(N_LABELS, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.window)

    def push(self, predicted: LabelSet) -> None:
        self.window.append(predicted)
        self.counts += predicted.mask()
        if len(self.window) > self.window_size:
            self.counts -= self.window.popleft().mask()

    def recount(self) -> np.ndarray:
        out = np.zeros(N_LABELS, dtype=np.int64)
        for ys in self.window:
            out += ys.mask()
        return out

    def state(self) -> dict:
        return {"window_size": self.window_size, "window": [ys.names() for ys in self.window]}

    @classmethod
    def from_state(cls, state: dict) -> "CollapseMonitor":
        mon = cls(int(state["window_size"]))
        for names in state["window"]:
            mon.push(LabelSet.from_names(names))
        return mon


def collapse_penalty(monitor: CollapseMonitor, cfg: NuancedRewardConfig) -> float:
    """Penalty implied by the current window contents, without modifying it."""
    n = len(monitor)
    if n == 0:
        return 0.0
    top = int(monitor.counts.max())
    if top <= cfg.dominance_threshold * n + 1e-9:
        return 0.0
    allowed = math.ceil(cfg.dominance_threshold * n - 1e-9)
    return cfg.collapse_penalty + cfg.excess_repetition_penalty * (top - allowed)


def monitor_observe(monitor: CollapseMonitor, predicted: LabelSet, cfg: NuancedRewardConfig) -> float:
    """Score ``predicted`` against the window history, then append it."""
    penalty = collapse_penalty(monitor, cfg)
    monitor.push(predicted)
    return penalty


def jaccard(y: LabelSet, y_hat: LabelSet) -> float:
    union = len(y | y_hat)
    if union == 0:
        return 1.0
    return len(y & y_hat) / union


def hard_reward(parsed: ParsedOutput, y: LabelSet, cfg: HardRewardConfig | None = None) -> RewardBreakdown:
    cfg = cfg or HardRewardConfig()
    if not parsed.valid:
        return RewardBreakdown.from_components(match=0.0, length=0.0, format=0.0)
    short = parsed.token_length < cfg.min_length_tokens
    return RewardBreakdown.from_components(
        match=jaccard(y, parsed.predicted),
        length=-cfg.length_penalty if short else 0.0,
        format=0.0,
    )


def nuanced_reward(
    parsed: ParsedOutput,
    y: LabelSet,
    stats: LabelStats,
    monitor: CollapseMonitor,
    cfg: NuancedRewardConfig | None = None,
) -> RewardBreakdown:
    """Multi-component reward; appends ``parsed.predicted`` to ``monitor`` after scoring."""
    cfg = cfg or NuancedRewardConfig()
    y_hat = parsed.predicted
    hit = len(y & y_hat)

    exact = parsed.valid and y_hat == y
    match = cfg.exact_match_bonus if exact else 0.0
    partial = 0.0
    if not exact:
        if y:
            partial += cfg.recall_scale * hit / len(y)
        if y_hat:
            partial += cfg.precision_scale * hit / len(y_hat)

    fp = sum(cfg.fp_base_penalty * (1.0 + stats[l]) for l in y_hat - y)

    fmt = 0.0 if parsed.valid else cfg.format_penalty
    fmt += cfg.invalid_label_penalty * parsed.invalid_label_count
    fmt += cfg.duplicate_penalty * parsed.duplicate_count
    fmt += cfg.extraneous_penalty if parsed.extraneous_text else 0.0

    collapse = monitor_observe(monitor, y_hat, cfg)
    return RewardBreakdown.from_components(
        match=match, partial=partial, fp=-fp, collapse=-collapse, format=-fmt
    )


@dataclass
class RepetitionRewardConfig:
    """Ablation reward: the hard reward plus a bonus per repeated label mention.

    Repeats are counted over the whole completion text, reasoning included, so
    a policy that loops on one label is paid for it. Used only to reproduce
    entropy collapse; the production rewards penalize duplicates instead.
    """

    repeat_bonus: float = 0.1
    hard: HardRewardConfig = field(default_factory=HardRewardConfig)

    def __post_init__(self):
        if self.repeat_bonus < 0:
            raise ValueError("repeat_bonus must be >= 0")


_NAME_RE = re.compile(r"\b(" + "|".join(re.escape(n) for n in CANONICAL_NAMES) + r")\b", re.IGNORECASE)


def max_label_mentions(text: str) -> int:
    """Occurrences of the most frequently mentioned canonical label in ``text``."""
    counts: dict[str, int] = {}
    for m in _NAME_RE.finditer(text):
        k = m.group(1).lower()
        counts[k] = counts.get(k, 0) + 1
    return max(counts.values(), default=0)


def repetition_reward(
    parsed: ParsedOutput, text: str, y: LabelSet, cfg: RepetitionRewardConfig | None = None
) -> RewardBreakdown:
    cfg = cfg or RepetitionRewardConfig()
    base = hard_reward(parsed, y, cfg.hard)
    repeat = cfg.repeat_bonus * max(max_label_mentions(text) - 1, 0)
    return RewardBreakdown.from_components(**base.components, repeat=repeat)
