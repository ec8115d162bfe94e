"""Multi-head attention with query/key width decoupled from the model width.

Each head ``i`` projects to ``d_head_qk = d_select / h`` query/key dims and
``d_head_v = d_model / h`` value dims; heads are contiguous column blocks of
the projection matrices. Logits are scaled by ``1 / sqrt(d_head_qk)``. With
``d_select == d_model`` this is ordinary multi-head attention.

A layer can also run with *shared thin keys* (``shared_keys=True``): a single
``d_model x r`` key projection whose r-dim keys are read by every head, and
per-head query blocks of width r. That is the layout produced by factoring a
trained key projection (see :mod:`thinkey.factored`); the logit scale stays
that of the original config so scores are preserved.

Inputs may carry leading batch dims: ``x`` is ``(..., n, d_model)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .linalg import MASK_VALUE


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    d_select: int

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_select < 1:
            raise ValueError(f"dims must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_select % self.n_heads:
            raise ValueError(f"d_select={self.d_select} not divisible by n_heads={self.n_heads}")

    @property
    def d_head_qk(self) -> int:
        return self.d_select // self.n_heads

    @property
    def d_head_v(self) -> int:
        return self.d_model // self.n_heads

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.d_head_qk)


@dataclass
class AttentionLayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    shared_keys: bool = False

    @property
    def key_width(self) -> int:
        """Per-token key-cache width of this layer."""
        return self.w_k.shape[1]

    def query_head_dim(self, cfg: AttentionConfig) -> int:
        return self.w_k.shape[1] if self.shared_keys else cfg.d_head_qk

    def check(self, cfg: AttentionConfig) -> None:
        d, h = cfg.d_model, cfg.n_heads
        if self.shared_keys:
            r = self.w_k.shape[1]
            want = {"w_q": (d, h * r), "w_k": (d, r)}
        else:
            want = {"w_q": (d, cfg.d_select), "w_k": (d, cfg.d_select)}
        want.update({"w_v": (d, d), "w_o": (d, d)})
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape} for {cfg}")

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for arr in (self.w_q, self.w_k, self.w_v, self.w_o):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(b"shared" if self.shared_keys else b"split")
        return h.hexdigest()


@dataclass
class AttentionTrace:
    """Intermediates of one forward call. Heads live on axis ``-3``."""

    q: np.ndarray  # (..., h, n, dq)
    k: np.ndarray  # (..., h, n, dq), or (..., 1, n, r) with shared keys
    v: np.ndarray  # (..., h, n, d_head_v)
    attn: np.ndarray  # (..., h, n, n)
    output: np.ndarray  # (..., n, d_model)
    x: np.ndarray = field(repr=False)
    concat: np.ndarray = field(repr=False)
    scale: float = 1.0
    causal: bool = True
    weights_digest: str | None = field(default=None, repr=False)
    cfg: AttentionConfig | None = None
    consumed: bool = False


@dataclass
class AttentionGrads:
    x: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


def _split_heads(t: np.ndarray, h: int) -> np.ndarray:
    *lead, n, width = t.shape
    return np.swapaxes(t.reshape(*lead, n, h, width // h), -2, -3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    *lead, h, n, width = t.shape
    return np.swapaxes(t, -2, -3).reshape(*lead, n, h * width)


def _sum_lead(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over all leading (batch) dims of a^T b for (..., n, p) x (..., n, q)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def forward(x, w: AttentionLayerWeights, n_heads: int, scale: float, causal: bool) -> AttentionTrace:
    """Unchecked forward used by the model's training loop."""
    h = n_heads
    q = _split_heads(x @ w.w_q, h)
    kk = x @ w.w_k
    k = kk[..., None, :, :] if w.shared_keys else _split_heads(kk, h)
    v = _split_heads(x @ w.w_v, h)
    raw = q @ np.swapaxes(k, -1, -2)
    n = raw.shape[-1]
    attn = kernels.softmax_forward(np.ascontiguousarray(raw.reshape(-1, n, n)), scale, causal, MASK_VALUE)
    attn = attn.reshape(raw.shape)
    concat = _merge_heads(attn @ v)
    out = concat @ w.w_o
    return AttentionTrace(q=q, k=k, v=v, attn=attn, output=out, x=x, concat=concat, scale=scale, causal=causal)


def backward(tr: AttentionTrace, grad_output, w: AttentionLayerWeights) -> AttentionGrads:
    """Unchecked chain rule through :func:`forward`."""
    g = np.asarray(grad_output, dtype=np.float64)
    h = tr.q.shape[-3]
    d_w_o = _sum_lead(tr.concat, g)
    d_heads = _split_heads(g @ w.w_o.T, h)  # (..., h, n, dv)
    d_attn = d_heads @ np.swapaxes(tr.v, -1, -2)
    d_v = np.swapaxes(tr.attn, -1, -2) @ d_heads
    n = d_attn.shape[-1]
    d_logits = kernels.softmax_backward(
        np.ascontiguousarray(tr.attn.reshape(-1, n, n)), np.ascontiguousarray(d_attn.reshape(-1, n, n)), tr.scale
    ).reshape(d_attn.shape)
    d_q = d_logits @ tr.k
    d_k = np.swapaxes(d_logits, -1, -2) @ tr.q
    d_q = _merge_heads(d_q)
    d_k = d_k.sum(axis=-3) if w.shared_keys else _merge_heads(d_k)
    d_v = _merge_heads(d_v)
    x = tr.x
    return AttentionGrads(
        x=d_q @ w.w_q.T + d_k @ w.w_k.T + d_v @ w.w_v.T,
        w_q=_sum_lead(x, d_q),
        w_k=_sum_lead(x, d_k),
        w_v=_sum_lead(x, d_v),
        w_o=d_w_o,
    )


def attend_forward(x, w: AttentionLayerWeights, cfg: AttentionConfig, causal: bool = True) -> AttentionTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != cfg.d_model or x.shape[-2] < 1:
        raise ValueError(f"x has shape {x.shape}, expected (..., n, {cfg.d_model})")
    w.check(cfg)
    tr = forward(x, w, cfg.n_heads, cfg.scale, causal)
    tr.cfg = cfg
    tr.weights_digest = w.digest()
    return tr


def attend_backward(trace: AttentionTrace, grad_output, w: AttentionLayerWeights, cfg: AttentionConfig) -> AttentionGrads:
    if trace.consumed:
        raise ValueError("trace already consumed by a backward call")
    if trace.cfg != cfg or trace.weights_digest != w.digest():
        raise ValueError("trace was produced with different weights or config")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != trace.output.shape:
        raise ValueError(f"grad_output has shape {g.shape}, expected {trace.output.shape}")
    trace.consumed = True
    return backward(trace, g, w)


def raw_logits(q_head: np.ndarray, k_head: np.ndarray, d_head_qk: int) -> np.ndarray:
    """Pre-softmax scores ``q k^T / sqrt(d_head_qk)`` for one head."""
    return (q_head @ k_head.T) / np.sqrt(d_head_qk)
