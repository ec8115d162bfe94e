"""A small pre-norm decoder-only transformer with hand-written backprop.

Token + learned positional embeddings, ``n_layers`` blocks of
``x + attn(ln1(x))`` then ``x + ffn(ln2(x))`` (GELU, no biases anywhere),
a final gain-only layer norm and an output head tied to the token embedding.

Parameters live in an ordered ``dict[str, ndarray]``; the names are the
tensor names used by the checkpoint format. A layer whose keys have been
factored stores ``attn.a`` (thin keys) and ``attn.w_q_absorbed`` in place of
``attn.w_k`` / ``attn.w_q``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import attention
from .attention import AttentionConfig, AttentionLayerWeights
from ._backend import kernels
from .linalg import Rng, derive_seed

LN_EPS = 1e-5
EMB_STD = 1.0
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_select: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1 or self.d_ff < 1:
            raise ValueError(f"n_layers and d_ff must be positive: {self}")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.max_seq_len < 2:
            raise ValueError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        self.attention  # validates head divisibility

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, self.d_select)


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    def copy(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def is_factored(self, layer: int) -> bool:
        return f"layers.{layer}.attn.a" in self.params

    def qk_names(self, layer: int) -> tuple[str, str]:
        p = f"layers.{layer}.attn."
        if self.is_factored(layer):
            return p + "w_q_absorbed", p + "a"
        return p + "w_q", p + "w_k"

    def attn_weights(self, layer: int) -> AttentionLayerWeights:
        p = self.params
        qn, kn = self.qk_names(layer)
        pre = f"layers.{layer}.attn."
        return AttentionLayerWeights(
            w_q=p[qn], w_k=p[kn], w_v=p[pre + "w_v"], w_o=p[pre + "w_o"], shared_keys=self.is_factored(layer)
        )

    def key_cache_widths(self) -> list[int]:
        return [self.params[self.qk_names(i)[1]].shape[1] for i in range(self.cfg.n_layers)]

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def __deepcopy__(self, memo):
        return Model(self.cfg, copy.deepcopy(self.params, memo))


def init_model(cfg: ModelConfig) -> Model:
    """Embeddings ~ N(0, 1); every projection ~ N(0, 1/fan_in); gains = 1.

    Unit-scale embeddings and unscaled residual branches matter for the
    retrieval task: with the small GPT-style init (embeddings 0.02, residual
    outputs shrunk by 1/sqrt(2L)) training sits for tens of thousands of steps
    on a plateau where it predicts some value from the context rather than
    the one paired with the query key.
    """
    d, dff = cfg.d_model, cfg.d_ff
    counter = iter(range(1 << 30))

    def normal(rows, cols, std):
        return Rng(derive_seed(cfg.seed, next(counter))).normal((rows, cols), std=std)

    params = {
        "tok_emb": normal(cfg.vocab_size, d, EMB_STD),
        "pos_emb": normal(cfg.max_seq_len, d, EMB_STD),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        params[p + "ln1.g"] = np.ones((1, d))
        params[p + "attn.w_q"] = normal(d, cfg.d_select, 1 / np.sqrt(d))
        params[p + "attn.w_k"] = normal(d, cfg.d_select, 1 / np.sqrt(d))
        params[p + "attn.w_v"] = normal(d, d, 1 / np.sqrt(d))
        params[p + "attn.w_o"] = normal(d, d, 1 / np.sqrt(d))
        params[p + "ln2.g"] = np.ones((1, d))
        params[p + "ffn.w_in"] = normal(d, dff, 1 / np.sqrt(d))
        params[p + "ffn.w_out"] = normal(dff, d, 1 / np.sqrt(dff))
    params["ln_f.g"] = np.ones((1, d))
    return Model(cfg, params)


# ------------------------------------------------------------------ pieces


def _ln_forward(x, g):
    shape = x.shape
    y, xhat, rstd = kernels.layernorm_forward(np.ascontiguousarray(x.reshape(-1, shape[-1])), g[0], LN_EPS)
    return y.reshape(shape), (xhat, rstd)


def _ln_backward(dy, g, cache):
    xhat, rstd = cache
    dx, dg = kernels.layernorm_backward(np.ascontiguousarray(dy.reshape(xhat.shape)), xhat, rstd, g[0])
    return dx.reshape(dy.shape), dg


def gelu(x):
    """tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def _flat_t(a, b):
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


# --------------------------------------------------------------- forward


def check_tokens(model: Model, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ValueError(f"token grid must be 2-D, got shape {ids.shape}")
    if ids.shape[1] > model.cfg.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {model.cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= model.cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {model.cfg.vocab_size})")
    return ids.astype(np.int64)


def forward(model: Model, ids: np.ndarray, keep: bool = True):
    """Return (logits (B, T, V), caches). ``keep=False`` drops backward caches."""
    cfg = model.cfg
    p = model.params
    ids = check_tokens(model, ids)
    T = ids.shape[1]
    scale = cfg.attention.scale
    x = p["tok_emb"][ids] + p["pos_emb"][:T]
    caches = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        u, ln1 = _ln_forward(x, p[pre + "ln1.g"])
        tr = attention.forward(u, model.attn_weights(i), cfg.n_heads, scale, causal=True)
        x = x + tr.output
        u2, ln2 = _ln_forward(x, p[pre + "ln2.g"])
        hpre = (u2 @ p[pre + "ffn.w_in"]).reshape(-1, cfg.d_ff)
        hact, t = kernels.gelu_forward(hpre)
        hact = hact.reshape(*u2.shape[:-1], cfg.d_ff)
        x = x + hact @ p[pre + "ffn.w_out"]
        if keep:
            caches.append((ln1, tr, u2, ln2, hpre, t, hact))
        else:
            caches.append(None)
    hf, lnf = _ln_forward(x, p["ln_f.g"])
    logits = hf @ p["tok_emb"].T
    return logits, {"ids": ids, "layers": caches, "hf": hf, "lnf": lnf}


def backward(model: Model, caches, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    ids = caches["ids"]
    T = ids.shape[1]
    grads["tok_emb"] += _flat_t(d_logits, caches["hf"])
    dhf = d_logits @ p["tok_emb"]
    dx, grads["ln_f.g"] = _ln_backward(dhf, p["ln_f.g"], caches["lnf"])
    for i in reversed(range(model.cfg.n_layers)):
        pre = f"layers.{i}."
        ln1, tr, u2, ln2, hpre, t, hact = caches["layers"][i]
        grads[pre + "ffn.w_out"] = _flat_t(hact, dx)
        dhact = dx @ p[pre + "ffn.w_out"].T
        dhpre = kernels.gelu_backward(dhact.reshape(hpre.shape), hpre, t).reshape(dhact.shape)
        grads[pre + "ffn.w_in"] = _flat_t(u2, dhpre)
        du2 = dhpre @ p[pre + "ffn.w_in"].T
        dxl, grads[pre + "ln2.g"] = _ln_backward(du2, p[pre + "ln2.g"], ln2)
        dx = dx + dxl
        ag = attention.backward(tr, dx, model.attn_weights(i))
        qn, kn = model.qk_names(i)
        grads[qn] = ag.w_q
        grads[kn] = ag.w_k
        grads[pre + "attn.w_v"] = ag.w_v
        grads[pre + "attn.w_o"] = ag.w_o
        dxl, grads[pre + "ln1.g"] = _ln_backward(ag.x, p[pre + "ln1.g"], ln1)
        dx = dx + dxl
    grads["pos_emb"][:T] += dx.sum(axis=0)
    np.add.at(grads["tok_emb"], ids.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    return grads


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_targets(model, inputs, targets, loss_mask):
    ids = check_tokens(model, inputs)
    targets = np.asarray(targets, dtype=np.int64).reshape(ids.shape)
    mask = np.asarray(loss_mask, dtype=np.float64).reshape(ids.shape)
    if mask.sum() <= 0:
        raise ValueError("loss_mask selects no positions")
    sel = mask > 0
    if targets[sel].min() < 0 or targets[sel].max() >= model.cfg.vocab_size:
        raise ValueError(f"target id out of range [0, {model.cfg.vocab_size})")
    return ids, np.where(sel, targets, 0), mask


def forward_loss(model: Model, inputs, targets, loss_mask):
    """Mean cross-entropy over unmasked positions, and the logits."""
    ids, targets, mask = _check_targets(model, inputs, targets, loss_mask)
    logits, _ = forward(model, ids, keep=False)
    logp = _log_softmax(logits)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float((nll * mask).sum() / mask.sum())
    return loss, logits


def loss_and_grads(model: Model, inputs, targets, loss_mask):
    ids, targets, mask = _check_targets(model, inputs, targets, loss_mask)
    logits, caches = forward(model, ids)
    logp = _log_softmax(logits)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    denom = mask.sum()
    loss = float((nll * mask).sum() / denom)
    d_logits = np.exp(logp)
    np.put_along_axis(d_logits, targets[..., None], np.take_along_axis(d_logits, targets[..., None], axis=-1) - 1.0, axis=-1)
    d_logits *= (mask / denom)[..., None]
    return loss, backward(model, caches, d_logits)


def predict(model: Model, ids, batch: int = 512) -> np.ndarray:
    """Argmax token at every position, evaluated in chunks."""
    ids = check_tokens(model, ids)
    out = np.empty(ids.shape, dtype=np.int64)
    for s in range(0, ids.shape[0], batch):
        logits, _ = forward(model, ids[s : s + batch], keep=False)
        out[s : s + batch] = logits.argmax(axis=-1)
    return out
