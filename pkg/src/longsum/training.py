"""Teacher-forced training with per-tensor gradient clipping and Adam."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import Model, load_checkpoint, save_checkpoint
from .tensor import Tensor, as_tensor, log, log_softmax, mul, pick, tsum
from .text import collate, epoch_order

log_ = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 16
    max_steps: int = 2000
    clip_cap: float = 1.0
    global_clip: bool = False
    seed: int = 0
    checkpoint_every: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.clip_cap > 0:
            raise ValueError("clip_cap must be > 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    running_loss: float = float("nan")
    history: list = field(default_factory=list)
    last_loss_sum: float = float("nan")
    last_grad_norms: dict = field(default_factory=dict)

    def save(self, path):
        arrays = {f"m/{k}": a for k, a in self.m.items()}
        arrays.update({f"v/{k}": a for k, a in self.v.items()})
        meta = {"step": self.step, "running_loss": self.running_loss, "history": self.history}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            m = {k[2:]: z[k] for k in z.files if k.startswith("m/")}
            v = {k[2:]: z[k] for k in z.files if k.startswith("v/")}
        return cls(step=meta["step"], m=m, v=v, running_loss=meta["running_loss"],
                   history=[tuple(h) for h in meta["history"]])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _mask_weights(targets, pad_mask):
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(targets.shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross-entropy: no unmasked target steps")
    return targets, mask, count


def cross_entropy_loss(step_distributions, targets, pad_mask=None, reduction="mean"):
    """Mean (or summed) -log P(y_t) over unmasked steps, from probabilities.

    ``step_distributions`` is ``[..., m, vocab]`` of probabilities. Use
    :func:`cross_entropy_from_logits` in training; it avoids underflow.
    """
    probs = as_tensor(step_distributions)
    targets, mask, count = _mask_weights(targets, pad_mask)
    dt = probs.data.dtype.type
    floor = Tensor(np.where(probs.data > 0, 0.0, np.finfo(dt).tiny), dtype=dt)
    nll = mul(log(pick(probs + floor, targets)), -1.0)
    total = tsum(mul(nll, Tensor(mask, dtype=probs.data.dtype.type)))
    return total if reduction == "sum" else mul(total, 1.0 / count)


def cross_entropy_from_logits(logits, targets, pad_mask=None, reduction="mean"):
    """Same quantity as :func:`cross_entropy_loss`, via log-sum-exp on logits."""
    logits = as_tensor(logits)
    targets, mask, count = _mask_weights(targets, pad_mask)
    nll = mul(pick(log_softmax(logits), targets), -1.0)
    total = tsum(mul(nll, Tensor(mask, dtype=logits.data.dtype.type)))
    return total if reduction == "sum" else mul(total, 1.0 / count)


# ---------------------------------------------------------------------------
# clipping and the optimizer
# ---------------------------------------------------------------------------

def clip_gradient(g, C):
    """Rescale ``g`` to norm ``C`` when its L2 norm exceeds ``C``."""
    if not C > 0:
        raise ValueError("clip cap must be > 0")
    arr = g.data if isinstance(g, Tensor) else np.asarray(g)
    norm = float(np.sqrt(np.sum(arr.astype(np.float64) ** 2)))
    if norm <= C:
        out = arr
    else:
        # rounding can leave the rescaled norm just above C; shrink until it is not,
        # which also makes a second clip a no-op
        factor, step = C / norm, 1.0 - np.finfo(arr.dtype).eps
        while True:
            out = (arr.astype(np.float64) * factor).astype(arr.dtype)
            if np.sqrt(np.sum(out.astype(np.float64) ** 2)) <= C:
                break
            factor *= step
    return Tensor(out, dtype=arr.dtype.type) if isinstance(g, Tensor) else out


def clip_gradients(named_grads, C, global_norm=False):
    """Clip each gradient on its own, or all of them by their joint norm."""
    if not global_norm:
        return {k: clip_gradient(g, C) for k, g in named_grads.items()}
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in named_grads.values()))
    if total <= C:
        return dict(named_grads)
    return {k: (g.astype(np.float64) * (C / total)).astype(g.dtype) for k, g in named_grads.items()}


def adam_update(param, grad, m, v, step, cfg):
    """One Adam step in float64; returns the new moments."""
    g = grad.astype(np.float64)
    m = cfg.beta1 * m + (1 - cfg.beta1) * g
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
    mhat = m / (1 - cfg.beta1 ** step)
    vhat = v / (1 - cfg.beta2 ** step)
    upd = cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
    param.data = (param.data.astype(np.float64) - upd).astype(param.data.dtype)
    return m, v


# ---------------------------------------------------------------------------
# steps and the loop
# ---------------------------------------------------------------------------

def batch_loss(model, batch, reduction="mean"):
    logits = model.forward(batch.doc_ids, batch.doc_mask, batch.dec_in)
    return cross_entropy_from_logits(logits, batch.target, batch.target_mask, reduction=reduction)


def train_step(batch, model, state, config):
    """Forward, backward, clip, update. Returns the pre-update mean loss."""
    if len(batch.indices) == 0:
        raise ValueError("train_step: empty batch")
    model.zero_grad()
    loss = batch_loss(model, batch)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {state.step + 1}, batch rows {batch.indices.tolist()}")
    state.last_loss_sum = value * int(batch.target_mask.sum())
    loss.backward()

    named = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in model.trainable()}
    clipped = clip_gradients(named, config.clip_cap, global_norm=config.global_clip)
    state.last_grad_norms = {k: float(np.linalg.norm(g.astype(np.float64))) for k, g in clipped.items()}

    state.step += 1
    for k, t in model.trainable():
        m = state.m.get(k, np.zeros(t.shape))
        v = state.v.get(k, np.zeros(t.shape))
        state.m[k], state.v[k] = adam_update(t, clipped[k], m, v, state.step, config)
    model.zero_grad()

    state.running_loss = value if math.isnan(state.running_loss) else 0.98 * state.running_loss + 0.02 * value
    state.history.append((state.step, value))
    return value


def batch_for_step(pairs, config, step):
    """The batch trained at 0-based ``step``; order depends only on the seed."""
    per_epoch = math.ceil(len(pairs) / config.batch_size)
    epoch, idx = divmod(step, per_epoch)
    order = epoch_order(len(pairs), config.seed, epoch)
    return collate(pairs, order[idx * config.batch_size:(idx + 1) * config.batch_size])


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for step, loss in history:
            w.writerow([step, repr(float(loss))])


def read_history(path):
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


@dataclass
class TrainResult:
    checkpoint: str
    history: list
    model: Model
    state: TrainState


def _save(model, state, out_dir, stem):
    ckpt = os.path.join(out_dir, stem + ".ckpt")
    save_checkpoint(model, ckpt)
    state.save(os.path.join(out_dir, stem + ".state.npz"))
    return ckpt


def train(pairs, model_config, config, out_dir, resume=None, step_callback=None):
    """Train on ``pairs`` and write checkpoints plus ``history.csv`` into ``out_dir``.

    ``resume`` is a checkpoint path whose ``.state.npz`` sidecar holds the
    optimizer moments and step count.
    """
    if not pairs:
        raise ValueError("train: corpus is empty")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise TrainingError(f"cannot create checkpoint directory {out_dir}: {exc}") from None
    if not os.access(out_dir, os.W_OK):
        raise TrainingError(f"checkpoint directory {out_dir} is not writable")
    with open(os.path.join(out_dir, "train_config.json"), "w") as fh:
        json.dump(asdict(config), fh, indent=2, sort_keys=True)

    if resume:
        model = load_checkpoint(resume)
        state = TrainState.load(resume[: -len(".ckpt")] + ".state.npz")
    else:
        model = Model(model_config)
        state = TrainState()

    while state.step < config.max_steps:
        batch = batch_for_step(pairs, config, state.step)
        loss = train_step(batch, model, state, config)
        if step_callback is not None:
            step_callback(state, loss)
        if config.checkpoint_every and state.step % config.checkpoint_every == 0:
            _save(model, state, out_dir, f"step_{state.step:06d}")
        if state.step % 100 == 0:
            log_.info("step %d loss %.4f (avg %.4f)", state.step, loss, state.running_loss)

    ckpt = _save(model, state, out_dir, "model")
    write_history(os.path.join(out_dir, "history.csv"), state.history)
    return TrainResult(ckpt, list(state.history), model, state)
