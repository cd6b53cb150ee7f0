"""Seeded synthetic sequence-classification task.

Each token belongs to group ``token % num_classes``. Only the first ``window``
positions vote; position ``t`` casts ``window - t`` votes for its token's group
(or one vote each with ``decay=False``) and the label is the group with the
largest total. Later positions are distractors. Because the vote depends on
where a token sits, mean-pooled embeddings alone cannot solve it and the
encoder has to mix token and position with some precision. Sequences with a
tied maximum are resampled, so the label is always unique and the task is
symmetric across classes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class TaskConfig:
    vocab_size: int = 16
    seq_len: int = 12
    num_classes: int = 4
    n_train: int = 2048
    n_eval: int = 512
    window: int = 0  # 0 = first half of the sequence
    decay: bool = True

    def __post_init__(self):
        if self.num_classes < 2 or self.vocab_size < self.num_classes:
            raise ValueError("need num_classes >= 2 and vocab_size >= num_classes")
        if self.seq_len < 1 or self.n_train < 1 or self.n_eval < 1:
            raise ValueError("seq_len, n_train and n_eval must be positive")
        if not 0 <= self.window <= self.seq_len:
            raise ValueError(f"window must lie in [0, seq_len], got {self.window}")

    @property
    def label_window(self) -> int:
        return self.window or max(1, self.seq_len // 2)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray

    def tobytes(self) -> bytes:
        return b"".join(a.tobytes() for a in (self.x_train, self.y_train, self.x_eval, self.y_eval))


def position_weights(seq_len: int, window: int, decay: bool) -> np.ndarray:
    t = np.arange(seq_len)
    w = (window - t) if decay else np.ones(seq_len, dtype=np.int64)
    return np.where(t < window, w, 0)


def group_votes(tokens: np.ndarray, num_classes: int, weights: np.ndarray) -> np.ndarray:
    groups = np.asarray(tokens) % num_classes
    return np.stack([((groups == c) * weights).sum(axis=-1) for c in range(num_classes)], axis=-1)


def label_fn(tokens: np.ndarray, num_classes: int, window: int, decay: bool = True) -> np.ndarray:
    """Group with the largest weighted vote inside the window (first index on ties)."""
    tokens = np.asarray(tokens)
    w = position_weights(tokens.shape[-1], window, decay)
    return group_votes(tokens, num_classes, w).argmax(axis=-1)


def _has_unique_max(counts: np.ndarray) -> np.ndarray:
    top = counts.max(axis=-1, keepdims=True)
    return (counts == top).sum(axis=-1) == 1


def gen_synthetic(task: TaskConfig, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    n = task.n_train + task.n_eval
    rows = []
    have = 0
    while have < n:
        batch = rng.integers(0, task.vocab_size, size=(2 * (n - have) + 16, task.seq_len))
        votes = group_votes(batch, task.num_classes, position_weights(task.seq_len, task.label_window, task.decay))
        keep = batch[_has_unique_max(votes)]
        rows.append(keep)
        have += len(keep)
    x = np.concatenate(rows)[:n].astype(np.int64)
    y = label_fn(x, task.num_classes, task.label_window, task.decay).astype(np.int64)
    return Dataset(x[: task.n_train], y[: task.n_train], x[task.n_train :], y[task.n_train :])
