"""Supervised fine-tuning on teacher traces with assistant-only loss masking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import policy as pol
from .policy import PolicyParams, States

log = logging.getLogger(__name__)


@dataclass
class SftBatch:
    """Padded teacher sequences.

    ``tokens[:, 0]`` is BOS (the prompt position); ``mask`` is 1 exactly on the
    assistant tokens and 0 on the prompt and padding.
    """

    features: np.ndarray  # (B, d)
    tokens: np.ndarray  # (B, L) int
    mask: np.ndarray  # (B, L) float

    @classmethod
    def from_sequences(cls, features: np.ndarray, sequences: Sequence[Sequence[int]]) -> "SftBatch":
        L = 1 + max(len(s) for s in sequences)
        tokens = np.full((len(sequences), L), pol.EOS, dtype=np.int64)
        mask = np.zeros((len(sequences), L))
        tokens[:, 0] = pol.BOS
        for i, s in enumerate(sequences):
            tokens[i, 1 : 1 + len(s)] = s
            mask[i, 1 : 1 + len(s)] = 1.0
        return cls(np.asarray(features, dtype=float), tokens, mask)

    def __len__(self) -> int:
        return len(self.tokens)

    def states(self) -> States:
        return pol.sequence_states(self.features, list(self.tokens[:, 1:]))


def _check(batch: SftBatch) -> np.ndarray:
    if batch.tokens.shape != batch.mask.shape:
        raise ValueError("mask and tokens must have the same shape")
    if len(batch.features) != len(batch.tokens):
        raise ValueError("one feature row per sequence required")
    if np.any(batch.mask[:, 0] != 0):
        raise ValueError("mask must exclude the BOS/prompt position")
    weights = batch.mask[:, 1:].ravel()
    if weights.sum() <= 0:
        raise ValueError("mask selects no tokens")
    return weights


def masked_nll(params: PolicyParams, states: States, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over weighted states and its flat gradient."""
    total = weights.sum()
    log_p = pol.state_log_probs(params, states)
    rows = np.arange(len(states.targets))
    loss = -float((weights * log_p[rows, states.targets]).sum() / total)
    g = np.exp(log_p)
    g[rows, states.targets] -= 1.0
    return loss, pol.backprop(params, states, g * (weights / total)[:, None])


def sft_loss(params: PolicyParams, batch: SftBatch) -> tuple[float, np.ndarray]:
    """Masked token-mean NLL of the teacher sequences, with its analytic gradient."""
    weights = _check(batch)
    return masked_nll(params, batch.states(), weights)


class EarlyStopping:
    """Stop once the monitored loss fails to improve for ``patience`` consecutive epochs."""

    def __init__(self, patience: int = 2, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad_epochs = 0

    def update(self, loss: float) -> bool:
        self.epoch += 1
        if loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = loss, self.epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.05) -> float:
    warmup = max(1, math.ceil(warmup_fraction * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


class AdamW:
    def __init__(self, n: int, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        theta -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * theta)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if max_norm > 0 and norm > max_norm:
        return grad * (max_norm / norm)
    return grad


@dataclass
class SftConfig:
    epochs: int = 60
    patience: int = 2
    lr: float = 0.05
    batch_size: int = 32
    warmup_fraction: float = 0.05
    weight_decay: float = 0.01
    grad_clip: float = 5.0
    val_fraction: float = 0.1
    init_scale: float = 0.01
    seed: int = 0


@dataclass
class SftResult:
    params: PolicyParams
    best_epoch: int
    log: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def train_sft(
    cfg: SftConfig,
    features: np.ndarray,
    sequences: Sequence[Sequence[int]],
    init: PolicyParams | None = None,
    on_epoch=None,
) -> SftResult:
    """AdamW over minibatches with warmup + cosine decay and patience-based early stopping.

    A ``val_fraction`` share of the sequences is held out; the returned params
    are those of the epoch with the lowest validation loss.
    """
    n = len(sequences)
    if n == 0:
        raise ValueError("no training traces")
    features = np.asarray(features, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n))) if n > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        raise ValueError("not enough traces to hold out a validation split")

    params = init.copy() if init is not None else PolicyParams.init(features.shape[1], cfg.seed, cfg.init_scale)
    val_states = pol.sequence_states(features[val_idx], [sequences[i] for i in val_idx])
    val_w = np.ones(len(val_states.targets))
    train_states = pol.sequence_states(features[train_idx], [sequences[i] for i in train_idx])
    offsets = np.concatenate([[0], np.cumsum([len(sequences[i]) for i in train_idx])])

    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    opt = AdamW(params.size, weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience)
    best = params.copy()
    history: list[dict] = []
    initial_val, _ = masked_nll(params, val_states, val_w) if n_val else (math.nan, None)
    history.append({"epoch": 0, "train_loss": math.nan, "val_loss": initial_val, "lr": 0.0})

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train_idx))
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            chunk = perm[start : start + cfg.batch_size]
            rows = np.concatenate([np.arange(offsets[k], offsets[k + 1]) for k in chunk])
            sub = States(train_states.features[rows], train_states.bags[rows], train_states.targets[rows])
            loss, grad = masked_nll(params, sub, np.ones(len(rows)))
            lr = cosine_lr(step, total, cfg.lr, cfg.warmup_fraction)
            opt.step(params.theta, clip_grad_norm(grad, cfg.grad_clip), lr)
            losses.append(loss)
            step += 1
        val_loss = masked_nll(params, val_states, val_w)[0] if n_val else float(np.mean(losses))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "lr": lr}
        history.append(row)
        log.info("sft epoch %d train %.4f val %.4f", epoch, row["train_loss"], val_loss)
        stop = stopper.update(val_loss)
        if stopper.best_epoch == epoch:
            best = params.copy()
        if on_epoch is not None:
            on_epoch(epoch, params, row)
        if stop:
            return SftResult(best, stopper.best_epoch, history, stopped_early=True)
    return SftResult(best, stopper.best_epoch, history)
