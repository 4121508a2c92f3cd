"""Group-relative policy optimization with token-level clipping and a KL anchor.

Per token of completion ``i`` the surrogate is
``min(r * A_i, clip(r, 1 - clip_low, 1 + clip_high) * A_i)`` with
``r = pi(t) / pi_old(t)``. Sequence aggregation is ``1/|t_i|`` in ``per_token``
mode and ``1/max_len`` in ``drgrpo`` mode; the exact categorical KL to the
reference policy at every visited state uses the same weights.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import policy as pol
from .policy import Completion, GenerationConfig, PolicyParams, States
from .sft import AdamW
from .rewards import COMPONENTS, RewardBreakdown, jaccard
from .vocab import LabelSet

log = logging.getLogger(__name__)

NORMALIZATIONS = ("per_token", "drgrpo")
OPTIMIZERS = ("sgd", "adam")
REWARDS = ("hard", "nuanced", "repetition")
KL_Q_FLOOR = 1e-12


@dataclass
class GrpoConfig:
    group_size: int = 4
    temperature: float = 0.8
    top_p: float = 0.95
    kl_coefficient: float = 0.15
    clip_low: float = 0.15
    clip_high: float = 0.22
    normalization: str = "drgrpo"
    advantage_std_floor: float = 1e-6
    learning_rate: float = 0.005
    steps: int = 500
    batch_size: int = 16
    updates_per_batch: int = 1
    max_len: int = 40
    reward: str = "hard"
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.clip_low <= 0 or self.clip_high <= 0:
            raise ValueError("clip bounds must be positive")
        if self.kl_coefficient < 0:
            raise ValueError("kl_coefficient must be >= 0")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.reward not in REWARDS:
            raise ValueError(f"reward must be one of {REWARDS}")
        if self.updates_per_batch < 1 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("steps, batch_size and updates_per_batch must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    @property
    def generation(self) -> GenerationConfig:
        return GenerationConfig(self.temperature, self.top_p, self.max_len)


@dataclass
class GroupRollout:
    features: np.ndarray
    completions: list[Completion]
    old_logprobs: list[np.ndarray]
    rewards: np.ndarray
    advantages: np.ndarray
    gold: LabelSet | None = None
    breakdowns: list[RewardBreakdown] = field(default_factory=list)
    _states: list[States] | None = field(default=None, repr=False, compare=False)

    @property
    def token_lists(self) -> list[np.ndarray]:
        return [c.tokens for c in self.completions]

    def completion_states(self) -> list[States]:
        """Decoding states per completion; parameter-free, so built once and cached."""
        if self._states is None:
            self._states = [pol.sequence_states(self.features, [c.tokens]) for c in self.completions]
        return self._states

    def completion_logprobs(self, params: PolicyParams) -> list[np.ndarray]:
        # same per-sequence path as pol.logprob, so ratios at the old params are exactly 1
        return [pol.token_log_probs(params, s) for s in self.completion_states()]


def compute_advantages(rewards: Sequence[float], mode: str = "drgrpo", std_floor: float = 1e-6) -> np.ndarray:
    """Group-centred rewards; ``per_token`` mode also divides by max(std, std_floor)."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    centred = r - r.mean()
    if mode == "drgrpo":
        return centred
    if mode == "per_token":
        return centred / max(float(r.std()), std_floor)
    raise ValueError(f"unknown normalization {mode!r}")


def importance_ratios(params: PolicyParams, rollout: GroupRollout) -> list[np.ndarray]:
    """Per-token pi_new / pi_old for each completion of the group."""
    return [np.exp(new - old) for new, old in zip(rollout.completion_logprobs(params), rollout.old_logprobs)]


def categorical_kl(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) from log-probabilities; q is floored at 1e-12."""
    log_q = np.maximum(log_q, math.log(KL_Q_FLOOR))
    return (np.exp(log_p) * (log_p - log_q)).sum(axis=-1)


@dataclass
class _Flat:
    states: States
    weights: np.ndarray
    advantages: np.ndarray
    old_logprobs: np.ndarray
    groups: list[tuple[GroupRollout, int]]  # (rollout, completion index) per sequence


def _flatten(rollouts: Sequence[GroupRollout], normalization: str, max_len: int) -> _Flat:
    parts, weights, advs, olds, owners = [], [], [], [], []
    n_groups = len(rollouts)
    for ro in rollouts:
        G = len(ro.completions)
        for i, (st, old) in enumerate(zip(ro.completion_states(), ro.old_logprobs)):
            L = len(st.targets)
            denom = L if normalization == "per_token" else max_len
            parts.append(st)
            weights.append(np.full(L, 1.0 / (n_groups * G * denom)))
            advs.append(np.full(L, ro.advantages[i]))
            olds.append(old)
            owners.append((ro, i))
    if parts:
        states = States(*(np.concatenate(cols) for cols in zip(*parts)))
    else:
        states = pol.sequence_states(np.zeros((0, 0)), [])
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
    return _Flat(states, cat(weights), cat(advs), cat(olds), owners)


@dataclass
class ObjectiveTerms:
    objective: float
    surrogate: float
    kl: float
    entropy: float
    clip_fraction: float
    grad: np.ndarray


def objective_terms(
    params: PolicyParams,
    ref_params: PolicyParams,
    rollouts: Sequence[GroupRollout],
    cfg: GrpoConfig,
) -> ObjectiveTerms:
    flat = _flatten(rollouts, cfg.normalization, cfg.max_len)
    states, w, adv = flat.states, flat.weights, flat.advantages
    rows = np.arange(len(states.targets))

    log_p = pol.state_log_probs(params, states)
    p = np.exp(log_p)
    new_lp = np.concatenate(
        [pol.token_log_probs(params, ro.completion_states()[i]) for ro, i in flat.groups]
    ) if flat.groups else np.zeros(0)
    ratio = np.exp(new_lp - flat.old_logprobs)

    lo, hi = 1.0 - cfg.clip_low, 1.0 + cfg.clip_high
    unclipped = ratio * adv
    clipped = np.clip(ratio, lo, hi) * adv
    surr = np.minimum(unclipped, clipped)
    active = np.where(adv > 0, ratio <= hi, np.where(adv < 0, ratio >= lo, False))

    kl_t = categorical_kl(log_p, pol.state_log_probs(ref_params, states))
    log_q = np.maximum(pol.state_log_probs(ref_params, states), math.log(KL_Q_FLOOR))

    # d(surrogate)/dz on active tokens: A * r * (onehot - p)
    g = -p * (active * adv * ratio)[:, None]
    g[rows, states.targets] += active * adv * ratio
    if cfg.kl_coefficient:
        g -= cfg.kl_coefficient * p * ((log_p - log_q) - kl_t[:, None])
    grad = pol.backprop(params, states, g * w[:, None])

    surrogate = float((w * surr).sum())
    kl = float((w * kl_t).sum())
    n = max(1, len(rows))
    return ObjectiveTerms(
        objective=surrogate - cfg.kl_coefficient * kl,
        surrogate=surrogate,
        kl=kl,
        entropy=float(pol.entropy(log_p).sum() / n),
        clip_fraction=float(((adv != 0) & ~active).sum() / n),
        grad=grad,
    )


def grpo_objective(
    params: PolicyParams,
    ref_params: PolicyParams,
    rollouts: Sequence[GroupRollout],
    cfg: GrpoConfig,
) -> tuple[float, np.ndarray]:
    terms = objective_terms(params, ref_params, rollouts, cfg)
    return terms.objective, terms.grad


def kl_divergence(
    params: PolicyParams,
    ref_params: PolicyParams,
    states: States,
    weights: np.ndarray | None = None,
) -> float:
    """Weighted sum of exact per-state KL(pi || pi_ref); uniform mean when no weights."""
    kl_t = categorical_kl(pol.state_log_probs(params, states), pol.state_log_probs(ref_params, states))
    if weights is None:
        return float(kl_t.mean()) if kl_t.size else 0.0
    return float((np.asarray(weights) * kl_t).sum())


RewardFn = Callable[[Completion, LabelSet], RewardBreakdown]


def make_rollouts(
    params: PolicyParams,
    features: np.ndarray,
    golds: Sequence[LabelSet],
    reward_fn: RewardFn,
    cfg: GrpoConfig,
    rng: np.random.Generator,
) -> list[GroupRollout]:
    """Sample ``group_size`` completions per observation and score them in generation order."""
    G = cfg.group_size
    features = np.asarray(features, dtype=float)
    comps = pol.sample_batch(params, np.repeat(features, G, axis=0), cfg.generation, rng)
    rollouts = []
    for k, (x, y) in enumerate(zip(features, golds)):
        group = comps[k * G : (k + 1) * G]
        breakdowns = [reward_fn(c, y) for c in group]
        rewards = np.array([b.total for b in breakdowns])
        ro = GroupRollout(
            features=x,
            completions=group,
            old_logprobs=[],
            rewards=rewards,
            advantages=compute_advantages(rewards, cfg.normalization, cfg.advantage_std_floor),
            gold=y,
            breakdowns=breakdowns,
        )
        ro.old_logprobs = ro.completion_logprobs(params)
        rollouts.append(ro)
    return rollouts


def evaluate_policy(
    params: PolicyParams,
    features: np.ndarray,
    golds: Sequence[LabelSet],
    gen: GenerationConfig | None = None,
    seed: int = 0,
) -> dict:
    """Mean Jaccard, fail rate and length; greedy decoding unless ``gen`` says otherwise."""
    gen = gen or GenerationConfig(temperature=0.0, top_p=1.0)
    comps = pol.sample_batch(params, features, gen, np.random.default_rng(seed))
    jac = [jaccard(y, c.parsed.predicted) for y, c in zip(golds, comps)]
    return {
        "jaccard": float(np.mean(jac)),
        "fail_rate": float(np.mean([not c.parsed.valid for c in comps])),
        "length": float(np.mean([len(c) for c in comps])),
        "completions": comps,
    }


METRIC_COLUMNS = (
    "step",
    "total_reward_mean",
    *(f"reward_{c}_mean" for c in COMPONENTS),
    "completion_length_mean",
    "entropy",
    "kl",
    "clip_fraction",
)


@dataclass
class GrpoState:
    """Everything needed to continue a run: step counter, params and RNG state."""

    params: PolicyParams
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    history: list[dict] = field(default_factory=list)
    opt: AdamW | None = None


def _ascend(state: GrpoState, grad: np.ndarray, cfg: GrpoConfig) -> None:
    if cfg.optimizer == "sgd":
        state.params.theta += cfg.learning_rate * grad
        return
    if state.opt is None:
        state.opt = AdamW(state.params.size, weight_decay=0.0)
    state.opt.step(state.params.theta, -grad, cfg.learning_rate)


def train_grpo(
    sft_params: PolicyParams,
    features: np.ndarray,
    golds: Sequence[LabelSet],
    reward_fn: RewardFn,
    cfg: GrpoConfig,
    state: GrpoState | None = None,
    on_step: Callable[[GrpoState, dict], None] | None = None,
    ref_params: PolicyParams | None = None,
) -> GrpoState:
    """Run ``cfg.steps`` GRPO steps from the SFT checkpoint (also the frozen reference).

    Each step snapshots the old policy, samples ``group_size`` completions for
    ``batch_size`` observations, scores them serially, and takes
    ``updates_per_batch`` gradient-ascent steps on the objective.
    """
    ref = (ref_params or sft_params).copy()
    features = np.asarray(features, dtype=float)
    if state is None:
        state = GrpoState(sft_params.copy(), 0, np.random.default_rng(cfg.seed))
    n = len(features)
    bs = min(cfg.batch_size, n)
    while state.step < cfg.steps:
        idx = state.rng.choice(n, size=bs, replace=False)
        old = state.params.copy()
        rollouts = make_rollouts(old, features[idx], [golds[i] for i in idx], reward_fn, cfg, state.rng)
        first = None
        for _ in range(cfg.updates_per_batch):
            terms = objective_terms(state.params, ref, rollouts, cfg)
            _ascend(state, terms.grad, cfg)
            first = first or terms
        state.step += 1
        row = _step_row(state.step, rollouts, first)
        state.history.append(row)
        if on_step is not None:
            on_step(state, row)
    return state


def _step_row(step: int, rollouts: Iterable[GroupRollout], terms: ObjectiveTerms) -> dict:
    breakdowns = [b for ro in rollouts for b in ro.breakdowns]
    comps = [c for ro in rollouts for c in ro.completions]
    row = {"step": step, "total_reward_mean": float(np.mean([b.total for b in breakdowns]))}
    for c in COMPONENTS:
        row[f"reward_{c}_mean"] = float(np.mean([b.components.get(c, 0.0) for b in breakdowns]))
    row["completion_length_mean"] = float(np.mean([len(c) for c in comps]))
    row["entropy"] = terms.entropy
    row["kl"] = terms.kl
    row["clip_fraction"] = terms.clip_fraction
    return row


def save_state(path: str | Path, state: GrpoState, **extra) -> None:
    """Write everything needed to resume into one ``.npz``, atomically.

    ``extra`` must be JSON-serializable (e.g. a collapse monitor's state).
    """
    path = Path(path)
    opt = state.opt
    meta = {
        "step": state.step,
        "d": state.params.d,
        "V": state.params.V,
        "rng": state.rng.bit_generator.state,
        "history": state.history,
        "opt_t": opt.t if opt is not None else None,
        "extra": extra,
    }
    arrays = {"theta": state.params.theta, "meta": np.array(json.dumps(meta))}
    if opt is not None:
        arrays["opt_m"], arrays["opt_v"] = opt.m, opt.v
    tmp = path.with_name(f".{path.stem}.{os.getpid()}.tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_state(path: str | Path) -> tuple[GrpoState, dict]:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        params = PolicyParams(meta["d"], meta["V"], z["theta"].copy())
        opt = None
        if meta["opt_t"] is not None:
            opt = AdamW(params.size, weight_decay=0.0)
            opt.m, opt.v, opt.t = z["opt_m"].copy(), z["opt_v"].copy(), meta["opt_t"]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return GrpoState(params, meta["step"], rng, meta["history"], opt), meta["extra"]
