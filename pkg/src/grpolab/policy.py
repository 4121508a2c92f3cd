"""Tiny autoregressive categorical policy with exact log-probs and analytic gradients.

The next-token logits given observation features ``x`` and prefix ``t_<j`` are::

    z = x @ W_f + bag(t_<j) @ W_c + b

where ``bag`` counts every prefix token (BOS included). Because the map from
parameters to logits is linear, the gradient of any loss expressed through
``dL/dz`` at a set of states is ``X.T @ G``, ``Bag.T @ G`` and ``G.sum(0)``.

Checkpoint file layout: one ASCII line of JSON header (``format``, ``version``,
``d``, ``V``, ``seed``, ``n_params`` plus free-form metadata) terminated by
``\\n``, followed by ``n_params`` little-endian float64 values in the order
``W_f`` (d x V, row-major), ``W_c`` (V x V, row-major), ``b`` (V).
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .parser import FormatSpec, ParsedOutput, parse_completion
from .vocab import CANONICAL_NAMES

BOS, EOS, THINK_OPEN, THINK_CLOSE, SOL_OPEN, SOL_CLOSE, COMMA = range(7)
LABEL_OFFSET = 7
FILLER_WORDS = ("review", "lungs", "heart", "seen")
TOKENS: tuple[str, ...] = (
    "<bos>",
    "<eos>",
    "<think>",
    "</think>",
    "<solution>",
    "</solution>",
    ",",
    *CANONICAL_NAMES,
    *FILLER_WORDS,
)
VOCAB_SIZE = len(TOKENS)
FILLER_OFFSET = LABEL_OFFSET + len(CANONICAL_NAMES)
_TAG_IDS = {THINK_OPEN, THINK_CLOSE, SOL_OPEN, SOL_CLOSE}

CHECKPOINT_FORMAT = "grpolab-policy"
CHECKPOINT_VERSION = 1


def label_token(label_id: int) -> int:
    return LABEL_OFFSET + label_id


def is_word(tok: int) -> bool:
    return tok >= LABEL_OFFSET


def is_label(tok: int) -> bool:
    return LABEL_OFFSET <= tok < FILLER_OFFSET


def detokenize(tokens: Sequence[int]) -> str:
    """Render tokens as text.

    Tags are emitted verbatim and commas attach to the previous word. Two label
    tokens in a row are separated by ", " so a run of labels reads as a list;
    other adjacent words are separated by a space.
    """
    out: list[str] = []
    prev: int | None = None
    for t in tokens:
        t = int(t)
        if t in (BOS, EOS):
            continue
        if t in _TAG_IDS or t == COMMA:
            out.append(TOKENS[t])
        elif prev is not None and is_label(prev) and is_label(t):
            out.append(", " + TOKENS[t])
        elif prev is not None and (is_word(prev) or prev == COMMA):
            out.append(" " + TOKENS[t])
        else:
            out.append(TOKENS[t])
        prev = t
    return "".join(out)


_ENCODE_RE = re.compile(
    "|".join(re.escape(s) for s in sorted(TOKENS[2:], key=len, reverse=True)) + r"|\s+|."
)


def tokenize(text: str) -> list[int]:
    """Inverse of :func:`detokenize` for text built from the policy alphabet.

    A single comma between two labels is read as the implicit list separator,
    so ``tokenize(detokenize(t)) == t`` for any ``t`` that never puts an
    explicit COMMA token directly between two labels.
    """
    lookup = {s: i for i, s in enumerate(TOKENS)}
    raw = []
    for m in _ENCODE_RE.finditer(text):
        s = m.group()
        if s.isspace():
            continue
        if s not in lookup:
            raise ValueError(f"text contains {s!r} at offset {m.start()}, outside the policy alphabet")
        raw.append(lookup[s])
    out = []
    for i, t in enumerate(raw):
        if t == COMMA and out and is_label(out[-1]) and i + 1 < len(raw) and is_label(raw[i + 1]):
            continue
        out.append(t)
    return out


class PolicyParams:
    """Flat parameter vector with ``W_f``, ``W_c`` and ``b`` exposed as views."""

    def __init__(self, d: int, V: int = VOCAB_SIZE, theta: np.ndarray | None = None):
        self.d, self.V = d, V
        n = d * V + V * V + V
        self.theta = np.zeros(n) if theta is None else np.asarray(theta, dtype=float).copy()
        if self.theta.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.theta.shape}")
        self.grad = np.zeros(n)

    @classmethod
    def init(cls, d: int, seed: int = 0, scale: float = 0.01, V: int = VOCAB_SIZE) -> "PolicyParams":
        p = cls(d, V)
        p.theta[:] = np.random.default_rng(seed).normal(0.0, scale, p.theta.size)
        return p

    @property
    def size(self) -> int:
        return self.theta.size

    @property
    def W_f(self) -> np.ndarray:
        return self.theta[: self.d * self.V].reshape(self.d, self.V)

    @property
    def W_c(self) -> np.ndarray:
        k = self.d * self.V
        return self.theta[k : k + self.V * self.V].reshape(self.V, self.V)

    @property
    def b(self) -> np.ndarray:
        return self.theta[self.d * self.V + self.V * self.V :]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.d, self.V, self.theta)

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.d, self.V, theta)


class States(NamedTuple):
    """A batch of decoding states: features, prefix bag and the token taken there."""

    features: np.ndarray  # (T, d)
    bags: np.ndarray  # (T, V)
    targets: np.ndarray  # (T,) int


def logits_at(params: PolicyParams, features: np.ndarray, bags: np.ndarray) -> np.ndarray:
    return features @ params.W_f + bags @ params.W_c + params.b


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def backprop(params: PolicyParams, states: States, dlogits: np.ndarray) -> np.ndarray:
    """Flat gradient of a loss whose derivative w.r.t. each state's logits is ``dlogits``."""
    g_f = states.features.T @ dlogits
    g_c = states.bags.T @ dlogits
    g_b = dlogits.sum(axis=0)
    return np.concatenate([g_f.ravel(), g_c.ravel(), g_b])


def _check_tokens(tokens: np.ndarray, V: int) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise ValueError(f"token id out of range [0, {V})")


def sequence_states(features: np.ndarray, sequences: Sequence[Sequence[int]], V: int = VOCAB_SIZE) -> States:
    """Decoding states for every token of every sequence (BOS is implicit).

    ``features`` is (n_seq, d) or a single (d,) vector shared by all sequences.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = np.broadcast_to(features, (len(sequences), features.size))
    rows, bags, targets = [], [], []
    for x, seq in zip(features, sequences):
        seq = np.asarray(seq, dtype=np.int64)
        _check_tokens(seq, V)
        onehot = np.zeros((len(seq), V))
        onehot[np.arange(len(seq)), seq] = 1.0
        bag = np.cumsum(onehot, axis=0) - onehot
        bag[:, BOS] += 1.0
        rows.append(np.broadcast_to(x, (len(seq), x.size)))
        bags.append(bag)
        targets.append(seq)
    if not rows:
        d = features.shape[1] if features.ndim == 2 else 0
        return States(np.zeros((0, d)), np.zeros((0, V)), np.zeros(0, dtype=np.int64))
    return States(np.concatenate(rows), np.concatenate(bags), np.concatenate(targets))


def state_log_probs(params: PolicyParams, states: States) -> np.ndarray:
    """(T, V) full-softmax log-probabilities at each state."""
    return log_softmax(logits_at(params, states.features, states.bags))


def token_log_probs(params: PolicyParams, states: States) -> np.ndarray:
    lp = state_log_probs(params, states)
    return lp[np.arange(len(states.targets)), states.targets]


def logprob(params: PolicyParams, obs: np.ndarray, tokens: Sequence[int]) -> np.ndarray:
    """Exact per-token log pi(t_j | x, t_<j) under the untruncated softmax."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("tokens must be non-empty")
    return token_log_probs(params, sequence_states(obs, [tokens], params.V))


def grad_logprob(
    params: PolicyParams, obs: np.ndarray, tokens: Sequence[int], mask: Sequence[float] | None = None
) -> np.ndarray:
    """Gradient of sum_j mask_j * log pi(t_j | x, t_<j) over the flat parameter vector."""
    tokens = np.asarray(tokens, dtype=np.int64)
    states = sequence_states(obs, [tokens], params.V)
    weights = np.ones(len(tokens)) if mask is None else np.asarray(mask, dtype=float)
    p = np.exp(state_log_probs(params, states))
    g = -p
    g[np.arange(len(tokens)), states.targets] += 1.0
    return backprop(params, states, g * weights[:, None])


def entropy(log_p: np.ndarray) -> np.ndarray:
    return -(np.exp(log_p) * log_p).sum(axis=-1)


def nucleus(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Restrict each row to its smallest top-probability set with mass >= top_p, renormalized."""
    if top_p >= 1.0:
        return probs
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    before = np.cumsum(sorted_p, axis=-1) - sorted_p
    keep_sorted = before < top_p - 1e-12
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=-1)
    out = np.where(keep, probs, 0.0)
    return out / out.sum(axis=-1, keepdims=True)


def _distribution(z: np.ndarray, temperature: float, top_p: float) -> np.ndarray:
    if temperature <= 0:
        out = np.zeros_like(z)
        out[np.arange(len(z)), np.argmax(z, axis=-1)] = 1.0
        return out
    return nucleus(np.exp(log_softmax(z / temperature)), top_p)


def token_distribution(
    params: PolicyParams,
    obs: np.ndarray,
    prefix: Sequence[int],
    temperature: float = 1.0,
    top_p: float = 1.0,
) -> np.ndarray:
    """Sampling distribution over the next token after ``prefix`` (BOS implicit)."""
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    bag = np.bincount(np.asarray(prefix, dtype=np.int64), minlength=params.V).astype(float)
    bag[BOS] += 1.0
    z = logits_at(params, np.asarray(obs, dtype=float)[None, :], bag[None, :])
    return _distribution(z, temperature, top_p)[0]


@dataclass
class GenerationConfig:
    temperature: float = 0.8
    top_p: float = 0.95
    max_len: int = 40

    def __post_init__(self):
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")


@dataclass
class Completion:
    tokens: np.ndarray
    logprobs: np.ndarray  # full-softmax log-probs under the generating policy
    text: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    @cached_property
    def parsed(self) -> ParsedOutput:
        return parse_completion(self.text, FormatSpec.THINK_SOLUTION, token_length=len(self.tokens))


def sample_batch(
    params: PolicyParams, features: np.ndarray, gen: GenerationConfig, rng: np.random.Generator
) -> list[Completion]:
    """Sample one completion per row of ``features``, all decoded in lockstep."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    n = len(features)
    base = features @ params.W_f + params.b + params.W_c[BOS]
    z = base.copy()
    tokens = np.full((n, gen.max_len), EOS, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for j in range(gen.max_len):
        probs = _distribution(z, gen.temperature, gen.top_p)
        u = rng.random(n)
        cdf = np.cumsum(probs, axis=-1)
        nxt = np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(axis=-1), params.V - 1)
        nxt[~alive] = EOS
        tokens[alive, j] = nxt[alive]
        lengths[alive] += 1
        z += params.W_c[nxt]
        alive &= nxt != EOS
        if not alive.any():
            break
    seqs = [tokens[i, : lengths[i]] for i in range(n)]
    lps = token_log_probs(params, sequence_states(features, seqs, params.V))
    out, k = [], 0
    for seq in seqs:
        out.append(Completion(seq, lps[k : k + len(seq)], detokenize(seq)))
        k += len(seq)
    return out


def sample_sequence(
    params: PolicyParams, obs: np.ndarray, gen: GenerationConfig, rng: np.random.Generator
) -> Completion:
    return sample_batch(params, np.asarray(obs, dtype=float)[None, :], gen, rng)[0]


def save_checkpoint(path: str | Path, params: PolicyParams, seed: int = 0, **meta) -> None:
    """Atomic write: the previous file stays loadable until the new one is complete."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "d": params.d,
        "V": params.V,
        "seed": seed,
        "n_params": params.size,
        **meta,
    }
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        fh.write(params.theta.astype("<f8").tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a policy checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        theta = np.frombuffer(fh.read(), dtype="<f8")
    if theta.size != header["n_params"]:
        raise ValueError(f"{path}: truncated checkpoint ({theta.size} of {header['n_params']} values)")
    return PolicyParams(header["d"], header["V"], theta), header
