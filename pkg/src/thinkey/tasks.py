"""Algorithmic selection tasks.

* copy-back: random tokens, the target at position t is the input at t - K
  (positional selection; positions t < K are unsupervised).
* key-value retrieval: ``k1 v1 ... k8 v8 SEP q``; keys are distinct within a
  sample, the pair order is random per sample, and only the last position
  is supervised with the value paired to ``q`` (content selection).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import Rng


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (B, T) int64
    targets: np.ndarray  # (B, T) int64, 0 where unsupervised
    loss_mask: np.ndarray  # (B, T) float64 in {0, 1}


@dataclass(frozen=True)
class CopyBack:
    offset_k: int = 8
    seq_len: int = 64
    vocab: int = 16

    name = "copyback"
    # offsets a head must tell apart, as estimated for this task in the scaling summary
    effective_patterns = 10

    def __post_init__(self):
        if not 1 <= self.offset_k < self.seq_len:
            raise ValueError(f"offset_k={self.offset_k} must be in [1, seq_len={self.seq_len})")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")

    @property
    def model_vocab(self) -> int:
        return self.vocab

    @property
    def model_seq_len(self) -> int:
        return self.seq_len

    def generate(self, seed: int, batch_size: int) -> Batch:
        rng = Rng(seed)
        x = rng.integers(self.vocab, (batch_size, self.seq_len))
        y = np.zeros_like(x)
        y[:, self.offset_k :] = x[:, : -self.offset_k]
        mask = np.zeros(x.shape)
        mask[:, self.offset_k :] = 1.0
        return Batch(x, y, mask)


@dataclass(frozen=True)
class KVRetrieval:
    n_pairs: int = 8
    vocab: int = 16

    name = "kvretrieval"

    def __post_init__(self):
        if self.n_pairs < 1 or self.n_pairs > self.vocab:
            raise ValueError(f"need 1 <= n_pairs <= vocab for distinct keys, got {self.n_pairs}, {self.vocab}")

    @property
    def effective_patterns(self) -> int:
        return self.vocab

    @property
    def separator(self) -> int:
        return self.vocab

    @property
    def model_vocab(self) -> int:
        return self.vocab + 1

    @property
    def model_seq_len(self) -> int:
        return 2 * self.n_pairs + 2

    def generate(self, seed: int, batch_size: int) -> Batch:
        rng = Rng(seed)
        B, P = batch_size, self.n_pairs
        keys = rng.permutations(B, self.vocab)[:, :P]
        vals = rng.integers(self.vocab, (B, P))
        which = rng.integers(P, B)
        T = self.model_seq_len
        x = np.empty((B, T), dtype=np.int64)
        x[:, 0 : 2 * P : 2] = keys
        x[:, 1 : 2 * P : 2] = vals
        x[:, 2 * P] = self.separator
        rows = np.arange(B)
        x[:, 2 * P + 1] = keys[rows, which]
        y = np.zeros_like(x)
        y[:, -1] = vals[rows, which]
        mask = np.zeros(x.shape)
        mask[:, -1] = 1.0
        return Batch(x, y, mask)


TaskSpec = CopyBack | KVRetrieval

TASKS = {"copyback": CopyBack, "kvretrieval": KVRetrieval}


def make_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]()
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


def generate_batch(task: TaskSpec, seed: int, batch_size: int) -> Batch:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return task.generate(seed, batch_size)


def log2_patterns(task: TaskSpec) -> float:
    return math.log2(task.effective_patterns)
