"""Losses, the orthogonality-weight ramp, Adamax, and the training loop.

Training is fully deterministic given the configs: parameter init, the
validation carve-out, and per-epoch shuffles all draw from independent
substreams of the training seed.  The orthogonality weight alpha ramps
linearly from 0 at step 0 to ``alpha_max`` at the final optimizer step.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bilinear import mean_pairwise_cosine, orthogonality_loss
from .checkpoint import save_checkpoint
from .config import FusionConfig, TrainConfig, config_hash
from .models import build_model
from .rng import generator
from .synthetic import one_hot, stack_examples
from .tensor import Tape, Tensor, add, backward, bce_with_logits, mul, zero_grads


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


def alpha_schedule(step: int, total_steps: int, alpha_max: float) -> float:
    """Linear ramp: 0 at step 0, alpha_max at step == total_steps."""
    if total_steps <= 0 or step <= 0:
        return 0.0
    return alpha_max * min(step, total_steps) / total_steps


def total_loss(main: Tensor, ortho: Optional[Tensor], alpha: float) -> Tensor:
    """main + alpha * ortho; the penalty term is skipped entirely at alpha=0
    so an alpha-free run is bit-identical to one with the term removed."""
    if ortho is None or alpha == 0.0:
        return main
    return add(main, mul(ortho, alpha))


def predict(logits) -> np.ndarray:
    """Answer indices by argmax; ties break toward the lowest index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[-1] == 0:
        raise ValueError("empty answer vocabulary")
    return arr.argmax(axis=-1)


@dataclass
class AdamaxState:
    """First moment and infinity-norm accumulators, one pair per parameter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)


def adamax_step(params: dict, state: AdamaxState, lr: float) -> None:
    """One update: m <- b1*m + (1-b1)*g; u <- max(b2*u, |g|);
    theta <- theta - lr/(1-b1^t) * m/(u+eps)."""
    state.step += 1
    correction = 1.0 - state.beta1 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        u = state.u.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            u = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        u = np.maximum(state.beta2 * u, np.abs(g))
        state.m[name] = m
        state.u[name] = u
        p.assign(p.data - (lr / correction) * m / (u + state.eps))


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    ortho_loss: float
    alpha: float
    val_acc: float


@dataclass
class TrainResult:
    best_params: dict          # name -> float64 array (best validation epoch)
    final_params: dict
    history: list
    best_epoch: int
    best_val_acc: float
    model_config: FusionConfig
    train_config: TrainConfig

    @property
    def best_from_history(self) -> float:
        return max((m.val_acc for m in self.history), default=0.0)


def snapshot(params: dict) -> dict:
    return {name: p.data.copy() for name, p in params.items()}


def load_params(model, saved: dict) -> None:
    params = model.params()
    if set(params) != set(saved):
        raise ValueError("checkpoint parameter names do not match the model")
    for name, p in params.items():
        p.assign(saved[name])


def evaluate(model, examples, batch_size: int = 256) -> float:
    """Classification accuracy over ``examples`` (no tape, no dropout)."""
    if not examples:
        return 0.0
    hits = 0
    for lo in range(0, len(examples), batch_size):
        image, question, mask, answers = stack_examples(examples[lo:lo + batch_size])
        logits, _ = model.forward(image, question, mask)
        hits += int((predict(logits) == answers).sum())
    return hits / len(examples)


def glimpse_cosine(model, examples, batch_size: int = 256) -> float:
    """Mean pairwise cosine between glimpse distributions over a sample set."""
    values = []
    for lo in range(0, len(examples), batch_size):
        image, question, mask, _ = stack_examples(examples[lo:lo + batch_size])
        _, bundle = model.forward(image, question, mask)
        if bundle is None:
            return float("nan")
        values.append(mean_pairwise_cosine(bundle.distributions))
    return float(np.mean(values))


def train(model_config: FusionConfig, train_config: TrainConfig, examples,
          include_ortho: bool = True, checkpoint_dir: Optional[str] = None) -> TrainResult:
    """Train one model on ``examples``; carves out a validation split and
    retains the best-validation parameters.

    With ``checkpoint_dir`` set and ``checkpoint_every > 0``, a checkpoint is
    also written every that-many epochs.  Raises :class:`DivergenceError` as
    soon as the loss or a parameter goes non-finite.
    """
    model_config.validate()
    tc = train_config.validate()
    model = build_model(model_config, seed=tc.seed)
    params = model.params()

    n_val = max(1, int(round(tc.val_fraction * len(examples))))
    order = generator(tc.seed, "split").permutation(len(examples))
    val_set = [examples[i] for i in order[:n_val]]
    train_set = [examples[i] for i in order[n_val:]]
    if not train_set:
        raise ValueError("no training examples left after the validation split")

    batches_per_epoch = (len(train_set) + tc.batch_size - 1) // tc.batch_size
    total_steps = tc.epochs * batches_per_epoch

    state = AdamaxState()
    history = []
    best_params = snapshot(params)
    best_val, best_epoch = -1.0, -1
    drop_rng = generator(tc.seed, "dropout") if model_config.dropout > 0 else None

    step = 0
    for epoch in range(tc.epochs):
        shuffle = generator(tc.seed, "shuffle", epoch).permutation(len(train_set))
        main_losses, ortho_losses = [], []
        for lo in range(0, len(train_set), tc.batch_size):
            batch = [train_set[i] for i in shuffle[lo:lo + tc.batch_size]]
            image, question, mask, answers = stack_examples(batch)
            targets = one_hot(answers, model_config.answers)
            step += 1
            alpha = alpha_schedule(step, total_steps, tc.alpha_max if include_ortho else 0.0)
            with Tape():
                logits, bundle = model.forward(image, question, mask, rng=drop_rng)
                main = bce_with_logits(logits, targets)
                ortho = (orthogonality_loss(bundle.distributions)
                         if bundle is not None else None)
                loss = total_loss(main, ortho, alpha if include_ortho else 0.0)
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(
                        f"loss became {value} at epoch {epoch} step {step}")
                backward(loss)
            adamax_step(params, state, tc.learning_rate)
            zero_grads(params.values())
            # runaway parameters would overflow the next forward pass into
            # inf/NaN garbage; catch them at the source
            if any(not np.all(np.abs(p.data) <= 1e30) for p in params.values()):
                raise DivergenceError(
                    f"parameters blew up at epoch {epoch} step {step}")
            main_losses.append(main.item())
            ortho_losses.append(ortho.item() if ortho is not None else 0.0)
        val_acc = evaluate(model, val_set, tc.batch_size)
        history.append(EpochMetrics(
            epoch=epoch,
            train_loss=float(np.mean(main_losses)),
            ortho_loss=float(np.mean(ortho_losses)),
            alpha=alpha_schedule(step, total_steps, tc.alpha_max if include_ortho else 0.0),
            val_acc=val_acc,
        ))
        if val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            best_params = snapshot(params)
        if (checkpoint_dir is not None and tc.checkpoint_every > 0
                and (epoch + 1) % tc.checkpoint_every == 0):
            save_checkpoint(
                os.path.join(checkpoint_dir,
                             f"checkpoint_seed{tc.seed}_epoch{epoch}.ckpt"),
                params, config_hash(model_config),
                extra={"epoch": epoch, "seed": tc.seed})

    if tc.epochs == 0:
        best_val, best_epoch = 0.0, -1
    return TrainResult(
        best_params=best_params,
        final_params=snapshot(params),
        history=history,
        best_epoch=best_epoch,
        best_val_acc=max(best_val, 0.0),
        model_config=model_config,
        train_config=tc,
    )


def write_metrics_csv(path: str, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "ortho_loss", "alpha", "val_acc"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_loss), repr(row.ortho_loss),
                             repr(row.alpha), repr(row.val_acc)])


def read_metrics_csv(path: str) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(EpochMetrics(
                epoch=int(rec["epoch"]),
                train_loss=float(rec["train_loss"]),
                ortho_loss=float(rec["ortho_loss"]),
                alpha=float(rec["alpha"]),
                val_acc=float(rec["val_acc"]),
            ))
    return out
