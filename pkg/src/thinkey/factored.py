"""Factored (thin) keys from a truncated SVD of the key projection.

With ``W_K = U S V^T`` truncated to rank r:

* thin keys ``A = U_r S_r`` (d_model x r) is what gets cached per token;
* the absorbed query ``W_Q V_r`` (d_model x r) is recomputed every step.

Scores are untouched at full rank since ``(W_Q V_r)(U_r S_r)^T = W_Q W_K^T``;
below full rank they equal the scores of the rank-r truncation of W_K.

One SVD is taken per layer over the whole key projection. In a multi-head
layer head i reads all r thin-key dims through its own absorbed query block
``W_Q[:, head_i] V_r[head_i, :]``; the head blocks sum to ``W_Q V_r``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix, full_svd, matmul
from .model import Model

EXACT_TOL = 1e-8


class CompressionMode(enum.Enum):
    K_ONLY = "konly"
    Q_ONLY = "qonly"
    BOTH = "both"


@dataclass
class FactoredProjection:
    a: np.ndarray  # d_model x r, thin key projection U_r S_r
    w_q_absorbed: np.ndarray  # d_model x r, W_Q V_r
    r: int
    sigma: np.ndarray
    sigma_discarded: np.ndarray
    v_r: np.ndarray  # d_k x r
    w_q_heads: np.ndarray  # d_model x (h * r), per-head absorbed blocks

    def scores(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x @ self.w_q_absorbed) @ (x @ self.a).T

    @property
    def retained_energy(self) -> float:
        return float(self.sigma @ self.sigma)

    @property
    def discarded_energy(self) -> float:
        return float(self.sigma_discarded @ self.sigma_discarded)


def _check_rank(r, d_k, what="key projection"):
    if not (isinstance(r, (int, np.integer)) and 1 <= r <= d_k):
        raise ValueError(f"rank {r} out of range [1, {d_k}] for {what} of width {d_k}")
    return int(r)


def factor_keys(w_q, w_k, r: int, n_heads: int = 1) -> FactoredProjection:
    w_q = as_matrix(w_q, "w_q")
    w_k = as_matrix(w_k, "w_k")
    if w_q.shape != w_k.shape:
        raise ValueError(f"w_q {w_q.shape} and w_k {w_k.shape} must have the same shape")
    d_k = w_k.shape[1]
    r = _check_rank(r, min(w_k.shape))
    if d_k % n_heads:
        raise ValueError(f"key width {d_k} not divisible by {n_heads} heads")
    svd = full_svd(w_k)
    u, s, v = svd.u[:, :r], svd.s[:r], svd.v[:, :r]
    v_r = np.ascontiguousarray(v)
    dh = d_k // n_heads
    heads = [w_q[:, i * dh : (i + 1) * dh] @ v_r[i * dh : (i + 1) * dh] for i in range(n_heads)]
    return FactoredProjection(
        a=u * s,
        w_q_absorbed=matmul(w_q, v_r),
        r=r,
        sigma=s.copy(),
        sigma_discarded=svd.s[r:].copy(),
        v_r=v_r,
        w_q_heads=np.concatenate(heads, axis=1),
    )


def truncate(w, r: int) -> np.ndarray:
    """Rank-r reconstruction ``U_r S_r V_r^T`` at the original shape."""
    w = as_matrix(w)
    r = _check_rank(r, min(w.shape), "matrix")
    svd = full_svd(w)
    return (svd.u[:, :r] * svd.s[:r]) @ svd.v[:, :r].T


def compress_mode(w_q, w_k, r: int, mode: CompressionMode):
    """Replace W_K and/or W_Q by rank-r truncations, keeping their shapes."""
    mode = CompressionMode(mode)
    w_q = as_matrix(w_q, "w_q")
    w_k = as_matrix(w_k, "w_k")
    _check_rank(r, min(w_k.shape))
    new_q = truncate(w_q, r) if mode in (CompressionMode.Q_ONLY, CompressionMode.BOTH) else w_q.copy()
    new_k = truncate(w_k, r) if mode in (CompressionMode.K_ONLY, CompressionMode.BOTH) else w_k.copy()
    return new_q, new_k


def score_error(x, w_q, w_k, fp: FactoredProjection) -> float:
    """Frobenius norm of ``X W_Q W_K^T X^T - X W_Q' A^T X^T``."""
    x = as_matrix(x, "x")
    exact = (x @ w_q) @ (x @ w_k).T
    return float(np.linalg.norm(exact - fp.scores(x)))


def apply_factored_to_model(model: Model, layer_index: int, r: int) -> Model:
    """Return a copy whose layer ``layer_index`` caches r-dim thin keys.

    Only that layer's query and key tensors change; everything else is copied
    bit for bit.
    """
    return factor_layer(model, layer_index, r)[0]


def factor_layer(model: Model, layer_index: int, r: int) -> tuple[Model, FactoredProjection]:
    cfg = model.cfg
    if not 0 <= layer_index < cfg.n_layers:
        raise ValueError(f"layer {layer_index} out of range [0, {cfg.n_layers})")
    if model.is_factored(layer_index):
        raise ValueError(f"layer {layer_index} already has factored keys")
    pre = f"layers.{layer_index}.attn."
    w_q, w_k = model.params[pre + "w_q"], model.params[pre + "w_k"]
    if not (isinstance(r, (int, np.integer)) and 1 <= r <= min(w_k.shape)):
        raise ValueError(f"rank {r} out of range [1, {min(w_k.shape)}] for layer {layer_index}")
    fp = factor_keys(w_q, w_k, r, n_heads=cfg.n_heads)
    out = model.copy()
    params = {}
    for name, val in out.params.items():
        if name == pre + "w_q":
            params[pre + "w_q_absorbed"] = fp.w_q_heads.copy()
        elif name == pre + "w_k":
            params[pre + "a"] = fp.a.copy()
        else:
            params[name] = val
    out.params = params
    return out, fp


def compress_model(model: Model, r: int, mode: CompressionMode, layers=None) -> Model:
    """Apply :func:`compress_mode` in place of each (unfactored) layer's W_Q/W_K."""
    mode = CompressionMode(mode)
    out = model.copy()
    for i in layers if layers is not None else range(model.cfg.n_layers):
        if model.is_factored(i):
            raise ValueError(f"layer {i} already has factored keys")
        pre = f"layers.{i}.attn."
        w_k = out.params[pre + "w_k"]
        if not 1 <= r <= min(w_k.shape):
            raise ValueError(f"rank {r} out of range [1, {min(w_k.shape)}] for layer {i}")
        out.params[pre + "w_q"], out.params[pre + "w_k"] = compress_mode(out.params[pre + "w_q"], w_k, r, mode)
    return out
