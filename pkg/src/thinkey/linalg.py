"""Deterministic dense linear algebra used by every other module.

Matrices are plain 2-D ``float64`` numpy arrays. This module adds the pieces
numpy does not pin down for us: a fixed, documented PRNG, a one-sided Jacobi
truncated SVD with a reproducible sign convention, and a stabilized row
softmax with causal masking.

PRNG
----
SplitMix64 (Steele, Lea & Flood 2014). With 64-bit wrapping arithmetic::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

Uniform doubles are ``(out >> 11) * 2**-53`` in [0, 1). Normals use the
Box-Muller transform on consecutive uniform pairs ``(u1, u2)``:
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` then ``... * sin(2 pi u2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from ._backend import kernels

Matrix = np.ndarray

MASK_VALUE = -1e30
SVD_TOL = 1e-12
MAX_SWEEPS = 80
_MASK64 = (1 << 64) - 1


def as_matrix(m, name: str = "matrix") -> Matrix:
    """Validate and convert to a finite 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}")
    return a @ b


def softmax_rows(m, scale: float = 1.0, causal: bool = False) -> np.ndarray:
    """Row softmax of ``scale * m`` over the last axis.

    Works on any array with at least two dims (leading dims are batch). With
    ``causal`` the last two dims must be square and entries above the
    diagonal are masked to exactly zero.
    """
    z = np.asarray(m, dtype=np.float64) * scale
    if z.ndim < 2:
        raise ValueError(f"softmax_rows needs a matrix, got shape {z.shape}")
    if causal:
        n, k = z.shape[-2:]
        if n != k:
            raise ValueError(f"causal softmax needs square logits, got {n}x{k}")
        z = np.where(causal_mask(n), MASK_VALUE, z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def causal_mask(n: int) -> np.ndarray:
    """Boolean n x n array, True strictly above the diagonal."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


# --------------------------------------------------------------------- SVD


@dataclass
class SvdResult:
    u: Matrix  # m x r, orthonormal columns
    s: np.ndarray  # r singular values, nonincreasing
    v: Matrix  # n x r, orthonormal columns
    rank_requested: int
    sweeps: int = 0

    def reconstruct(self) -> Matrix:
        return (self.u * self.s) @ self.v.T


def _complete_columns(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns not flagged ``good`` with unit vectors orthogonal to the rest.

    Candidates are the standard basis vectors in index order, orthogonalized
    by two rounds of Gram-Schmidt, so the completion is deterministic.
    """
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if good[j]]
    out = u.copy()
    e = 0
    for j in range(k):
        if good[j]:
            continue
        while True:
            cand = np.zeros(m)
            cand[e % m] = 1.0
            e += 1
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            norm = np.linalg.norm(cand)
            if norm > 1e-6:
                break
        cand /= norm
        basis.append(cand)
        out[:, j] = cand
    return out


def full_svd(m) -> SvdResult:
    """Thin SVD of all ``min(rows, cols)`` components via one-sided Jacobi."""
    m = as_matrix(m)
    rows, cols = m.shape
    transposed = cols > rows
    work = np.array(m.T if transposed else m, dtype=np.float64, order="F")
    k = work.shape[1]
    v = np.asfortranarray(np.eye(k))
    sweeps = kernels.jacobi_sweeps(work, v, SVD_TOL, MAX_SWEEPS)
    if sweeps < 0:
        raise RuntimeError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")

    s = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    work = work[:, order]
    v = np.ascontiguousarray(v[:, order])

    smax = s[0] if s.size else 0.0
    good = s > max(work.shape) * np.finfo(np.float64).eps * smax
    u = np.zeros_like(work)
    u[:, good] = work[:, good] / s[good]
    if not np.all(good):
        u = _complete_columns(u, good)
    u = np.ascontiguousarray(u)

    if transposed:
        u, v = v, u

    # sign convention: the largest-magnitude entry of each u column is >= 0
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u = u * signs
    v = v * signs
    return SvdResult(u=u, s=s, v=v, rank_requested=k, sweeps=sweeps)


def truncated_svd(m, r: int) -> SvdResult:
    """Best rank-``r`` factorization ``u @ diag(s) @ v.T`` of ``m``."""
    m = as_matrix(m)
    kmax = min(m.shape)
    if not (isinstance(r, (int, np.integer)) and 1 <= r <= kmax):
        raise ValueError(f"rank {r} out of range [1, {kmax}] for a {m.shape[0]}x{m.shape[1]} matrix")
    full = full_svd(m)
    r = int(r)
    return SvdResult(
        u=full.u[:, :r].copy(),
        s=full.s[:r].copy(),
        v=full.v[:, :r].copy(),
        rank_requested=r,
        sweeps=full.sweeps,
    )


def discarded_energy(s_full: np.ndarray, r: int) -> float:
    """Frobenius error of the rank-r truncation given all singular values."""
    tail = np.asarray(s_full, dtype=np.float64)[r:]
    return float(math.sqrt(float(tail @ tail)))


# --------------------------------------------------------------------- PRNG


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (output, new_state)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31), state


def derive_seed(seed: int, *labels: int) -> int:
    """Deterministically mix a base seed with integer labels into a new 64-bit seed."""
    out, _ = splitmix64(seed & _MASK64)
    for lab in labels:
        out, _ = splitmix64((out ^ (int(lab) & _MASK64)) & _MASK64)
    return out


class Rng:
    """SplitMix64 stream. Every draw advances the state by the number of words consumed."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def u64(self, n: int) -> np.ndarray:
        out, self.state = kernels.splitmix64_fill(self.state, int(n))
        self.state = int(self.state)
        return np.asarray(out, dtype=np.uint64)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return (low + (high - low) * u).reshape(shape)

    def integers(self, high: int, size) -> np.ndarray:
        """Integers in [0, high) as int64."""
        u = self.uniform(size)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def normal(self, size, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        out = np.empty(2 * pairs)
        two_pi = 2.0 * math.pi
        for i in range(pairs):
            rad = math.sqrt(-2.0 * math.log(1.0 - u[2 * i]))
            ang = two_pi * u[2 * i + 1]
            out[2 * i] = rad * math.cos(ang)
            out[2 * i + 1] = rad * math.sin(ang)
        return (mean + std * out[:n]).reshape(shape)

    def permutations(self, n_rows: int, n: int) -> np.ndarray:
        """``n_rows`` independent permutations of ``range(n)`` (stable argsort of uniforms)."""
        return np.argsort(self.uniform((n_rows, n)), axis=1, kind="stable")


@dataclass(frozen=True)
class Normal:
    std: float
    mean: float = 0.0


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float


Distribution = Union[Normal, Uniform]


def seeded_random_matrix(seed: int, rows: int, cols: int, dist: Distribution = Normal(1.0)) -> Matrix:
    if rows < 1 or cols < 1:
        raise ValueError(f"invalid dims {rows}x{cols}")
    rng = Rng(seed)
    if isinstance(dist, Normal):
        return rng.normal((rows, cols), std=dist.std, mean=dist.mean)
    if isinstance(dist, Uniform):
        return rng.uniform((rows, cols), dist.low, dist.high)
    raise TypeError(f"unknown distribution {dist!r}")
