"""Mini-batch Adam training of a head on precomputed token stacks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .. import metrics
from .heads import HeadError, HeadParams, bce_loss, init_params, loss_and_grads, predict_batch
from .optim import Adam


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TokenSet:
    """Token stacks with per-sample metadata.

    ``tokens`` is ``(n, T, D)``, or ``(E, n, T, D)`` when every epoch sees its
    own freshly augmented views.
    """

    tokens: np.ndarray
    labels: np.ndarray
    generator_ids: np.ndarray
    groups: np.ndarray
    domains: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.generator_ids = np.asarray(self.generator_ids, dtype=object)
        self.groups = np.asarray(self.groups, dtype=object)
        self.domains = np.asarray(self.domains, dtype=object)
        n = len(self.labels)
        if self.tokens.ndim not in (3, 4) or self.tokens.shape[-3] != n:
            raise HeadError(f"token array {self.tokens.shape} does not match {n} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def per_epoch(self) -> bool:
        return self.tokens.ndim == 4

    def for_epoch(self, epoch: int) -> np.ndarray:
        if not self.per_epoch:
            return self.tokens
        return self.tokens[epoch % self.tokens.shape[0]]

    def eval_tokens(self) -> np.ndarray:
        return self.for_epoch(0)

    def score(self, probabilities) -> metrics.ScoreTable:
        return metrics.ScoreTable(probabilities, self.labels, self.generator_ids, self.groups, self.domains)

    def subset(self, idx) -> "TokenSet":
        tok = self.tokens[:, idx] if self.per_epoch else self.tokens[idx]
        return TokenSet(tok, self.labels[idx], self.generator_ids[idx], self.groups[idx], self.domains[idx])

    def select_tokens(self, rows) -> "TokenSet":
        """Keep the listed token rows, e.g. ``[0]`` for a single-branch probe."""
        return TokenSet(self.tokens[..., rows, :], self.labels, self.generator_ids, self.groups, self.domains)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    train_generators: list[str] = field(default_factory=list)
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _val_score(params: HeadParams, val: TokenSet) -> tuple[float, float]:
    p = predict_batch(params, val.eval_tokens())
    acc = metrics.mean_accuracy(val.score(p))["total_mean_acc"]
    return acc, float(bce_loss(p, val.labels).mean())


def train(head_kind: str, data: TokenSet, cfg: TrainConfig, val: TokenSet | None = None,
          on_epoch: Callable[[int, HeadParams], None] | None = None) -> tuple[HeadParams, TrainLog]:
    """Train a fresh head and return the best validation checkpoint.

    Selection maximizes validation mean accuracy, breaking ties by lower
    validation loss and then by the earlier epoch. Without validation data the
    last epoch is kept. Returned weights are rounded through float32 so they
    equal what a checkpoint round-trip yields.
    """
    n = len(data)
    if n == 0:
        raise HeadError("empty training set")
    if len(np.unique(data.labels)) < 2:
        raise HeadError("training set has a single class")
    if val is not None and len(val) == 0:
        val = None
    n_tokens, dim = data.tokens.shape[-2:]
    rng = np.random.default_rng(cfg.seed)
    params = init_params(head_kind, dim, n_tokens, rng)
    opt = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    log = TrainLog(train_generators=sorted(set(data.generator_ids.tolist())))
    best, best_key = None, None
    for epoch in range(cfg.epochs):
        x_all = data.for_epoch(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(params, x_all[idx], data.labels[idx])
            opt.step(params.weights, grads)
            total += loss * len(idx)
            log.steps += 1
        params.check_finite()
        entry = {"epoch": epoch, "train_loss": total / n}
        if val is not None:
            acc, vloss = _val_score(params, val)
            entry.update(val_mean_acc=acc, val_loss=vloss)
            key = (acc, -vloss)
            if best_key is None or key > best_key:
                best, best_key, log.best_epoch = params.copy(), key, epoch
        log.epochs.append(entry)
        if on_epoch is not None:
            on_epoch(epoch, params)
    if best is None:
        best, log.best_epoch = params, cfg.epochs - 1
    return best.as_float32_precision(), log
