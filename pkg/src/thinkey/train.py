"""Training, evaluation, QK-only fine-tuning and gradient checking."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .linalg import derive_seed
from .tasks import TaskSpec, generate_batch

log = logging.getLogger(__name__)

EVAL_STREAM = 0x5EED_E7A1
TRAIN_STREAM = 0x7EA1_0001


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batches_per_epoch: int = 32
    batch_size: int = 32
    warmup_steps: int = 100
    schedule: str = "cosine"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    trainable_mask: str = "all"
    eval_samples: int = 2048
    converge_threshold: float = 0.9995
    early_stop: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 0 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0, batches_per_epoch and batch_size >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.trainable_mask not in ("all", "qk_only"):
            raise ValueError(f"trainable_mask must be 'all' or 'qk_only', got {self.trainable_mask!r}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.batches_per_epoch

    def lr_at(self, step: int) -> float:
        """Linear warmup then cosine decay to zero over ``total_steps``."""
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.schedule == "constant":
            return self.lr
        span = max(1, self.total_steps - self.warmup_steps)
        frac = min(1.0, (step - self.warmup_steps) / span)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    converge_epoch: int | None = None
    initial_accuracy: float | None = None

    @property
    def final_accuracy(self) -> float | None:
        return self.epochs[-1]["accuracy"] if self.epochs else self.initial_accuracy

    @property
    def best_accuracy(self) -> float | None:
        accs = [e["accuracy"] for e in self.epochs]
        if self.initial_accuracy is not None:
            accs.append(self.initial_accuracy)
        return max(accs) if accs else None

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "converge_epoch": self.converge_epoch,
            "initial_accuracy": self.initial_accuracy,
            "final_accuracy": self.final_accuracy,
            "best_accuracy": self.best_accuracy,
        }


def trainable_names(model: M.Model, mask: str) -> list[str]:
    if mask == "all":
        return list(model.params)
    names = []
    for i in range(model.cfg.n_layers):
        names.extend(model.qk_names(i))
    return names


class AdamW:
    """Decoupled weight decay (applied to matrices, not to norm gains)."""

    def __init__(self, names, params, cfg: TrainConfig):
        self.cfg = cfg
        self.names = list(names)
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, params, grads, lr):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        if c.grad_clip:
            norm = math.sqrt(sum(float(np.vdot(grads[n], grads[n])) for n in self.names))
            if norm > c.grad_clip:
                scale = c.grad_clip / norm
                grads = {n: grads[n] * scale for n in self.names}
        for n in self.names:
            g = grads[n]
            m, v = self.m[n], self.v[n]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p = params[n]
            if c.weight_decay and not n.endswith(".g"):
                p *= 1.0 - lr * c.weight_decay
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def evaluate_accuracy(model: M.Model, task: TaskSpec, n_samples: int, seed: int) -> float:
    """Exact-match accuracy over supervised positions of ``n_samples`` fresh samples."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    b = generate_batch(task, seed, n_samples)
    pred = M.predict(model, b.inputs)
    sel = b.loss_mask > 0
    return float(np.count_nonzero(pred[sel] == b.targets[sel]) / np.count_nonzero(sel))


def eval_seed(seed: int) -> int:
    return derive_seed(seed, EVAL_STREAM)


def train(model: M.Model, task: TaskSpec, cfg: TrainConfig, progress=None):
    """Train a copy of ``model``; returns (trained model, History).

    Deterministic given ``model`` and ``cfg``. Held-out accuracy is measured on a
    fixed set of ``cfg.eval_samples`` after every epoch; ``converge_epoch`` is the
    first epoch reaching ``cfg.converge_threshold``, after which training stops
    when ``early_stop`` is set.
    """
    model = model.copy()
    names = trainable_names(model, cfg.trainable_mask)
    opt = AdamW(names, model.params, cfg)
    hist = History()
    held_out = eval_seed(cfg.seed)
    if cfg.epochs == 0:
        hist.initial_accuracy = evaluate_accuracy(model, task, cfg.eval_samples, held_out)
        return model, hist
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for j in range(cfg.batches_per_epoch):
            b = generate_batch(task, derive_seed(cfg.seed, TRAIN_STREAM, epoch, j), cfg.batch_size)
            loss, grads = M.loss_and_grads(model, b.inputs, b.targets, b.loss_mask)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is caught below
                opt.step(model.params, grads, cfg.lr_at(step))
            step += 1
            losses.append(loss)
        for n in names:
            if not np.all(np.isfinite(model.params[n])):
                raise TrainingDiverged(f"non-finite weights in {n} at epoch {epoch}")
        acc = evaluate_accuracy(model, task, cfg.eval_samples, held_out)
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "accuracy": acc, "lr": cfg.lr_at(step - 1)}
        hist.epochs.append(rec)
        if progress:
            progress(rec)
        log.debug("epoch %d loss %.4f acc %.4f", epoch, rec["loss"], acc)
        if hist.converge_epoch is None and acc >= cfg.converge_threshold:
            hist.converge_epoch = epoch
            if cfg.early_stop:
                break
    return model, hist


def finetune_qk(model: M.Model, task: TaskSpec, cfg: TrainConfig, progress=None):
    """Train only the query/key projections; every other tensor is left bit-identical."""
    if cfg.trainable_mask != "qk_only":
        raise ValueError("finetune_qk requires trainable_mask='qk_only'")
    return train(model, task, cfg, progress)


def config_dict(cfg) -> dict:
    return asdict(cfg)


# ------------------------------------------------------------ grad check


def _rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(model_cfg: M.ModelConfig, seed: int, seq_len: int | None = None, batch: int = 2,
               step: float = 1e-5, trainable_mask: str = "all", model: M.Model | None = None):
    """Max relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``. With
    ``trainable_mask='qk_only'`` the analytic gradients of frozen tensors are
    the zero update the optimizer would apply; the report lists them.
    """
    if model_cfg.d_model > 16:
        raise ValueError("grad_check is meant for tiny configs (d_model <= 16)")
    model = model or M.init_model(model_cfg)
    n = seq_len or min(model_cfg.max_seq_len, 6)
    from .linalg import Rng

    rng = Rng(derive_seed(seed, 1))
    ids = rng.integers(model_cfg.vocab_size, (batch, n))
    targets = rng.integers(model_cfg.vocab_size, (batch, n))
    mask = (rng.uniform((batch, n)) < 0.7).astype(np.float64)
    mask[:, -1] = 1.0
    _, grads = M.loss_and_grads(model, ids, targets, mask)
    live = set(trainable_names(model, trainable_mask))
    worst = 0.0
    per_param = {}
    for name, p in model.params.items():
        g = grads[name] if name in live else np.zeros_like(p)
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + step
            lp, _ = M.forward_loss(model, ids, targets, mask)
            flat[idx] = old - step
            lm, _ = M.forward_loss(model, ids, targets, mask)
            flat[idx] = old
            num.reshape(-1)[idx] = (lp - lm) / (2 * step)
        if name in live:
            err = float(_rel_err(g, num).max())
            worst = max(worst, err)
        else:
            err = float(np.abs(g).max())
        per_param[name] = err
    return worst, per_param
