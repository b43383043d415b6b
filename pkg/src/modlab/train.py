"""
Training and evaluation orchestration.

Epoch loop with a linear-warmup + cosine-annealed learning rate, AdamW or
SGD-with-momentum updates, seeded xorshift shuffling, per-epoch metrics CSV
and checkpointing. Runs are bit-deterministic for a fixed seed: the shuffle
PRNG is an in-repo xorshift64* (documented below), batches are visited in a
fixed order, and gradient accumulation order never varies.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .data import Dataset, DatasetSpec, load_dataset
from .model import ModelConfig, cross_entropy, init_params, model_forward
from .tensor import ContractError, Tape, Tensor, backward, zero_grads


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"  # "adamw" | "sgd_momentum"
    base_lr: float = 1e-3
    warmup_epochs: int = 2
    total_epochs: int = 30
    batch_size: int = 32
    weight_decay: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    eval_dataset: DatasetSpec | None = None  # None: evaluate on the train set
    eval_every: int = 1
    stop_at_train_acc: float | None = None  # early exit once reached

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd_momentum"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ContractError("need 0 <= warmup_epochs < total_epochs")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ContractError("base_lr must be > 0")


# ---------------------------------------------------------------------------
# Deterministic shuffling
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


class Xorshift64Star:
    """xorshift64* PRNG (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D).

    Used for data shuffling so the visit order is reproducible across
    platforms independent of numpy's generator internals.
    """

    def __init__(self, seed: int):
        self.state = (seed & _MASK64) or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= (x >> 12) & _MASK64
        x = (x ^ (x << 25)) & _MASK64
        x ^= (x >> 27) & _MASK64
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK64

    def shuffle(self, items: np.ndarray) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            items[i], items[j] = items[j], items[i]


# ---------------------------------------------------------------------------
# Schedule and optimizers
# ---------------------------------------------------------------------------


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine annealing to 0."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: dict[str, Tensor], state: dict, lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected moment update with decoupled weight decay (applied first)."""
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            continue
        g = p.grad
        if cfg.weight_decay:
            p.data -= lr * cfg.weight_decay * p.data
        slot = state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        slot["m"] = cfg.beta1 * slot["m"] + (1 - cfg.beta1) * g
        slot["v"] = cfg.beta2 * slot["v"] + (1 - cfg.beta2) * g * g
        m_hat = slot["m"] / (1 - cfg.beta1**t)
        v_hat = slot["v"] / (1 - cfg.beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def sgd_step(params: dict[str, Tensor], state: dict, lr: float, cfg: TrainConfig) -> None:
    """Momentum buffer update, then param -= lr * buffer."""
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            continue
        buf = state.setdefault(name, np.zeros_like(p.data))
        buf *= cfg.momentum
        buf += p.grad
        p.data -= lr * buf


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for name in sorted(params):
            if params[name].grad is not None:
                params[name].grad *= factor
    return norm


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def predict(config: ModelConfig, params: dict[str, Tensor], images: np.ndarray) -> np.ndarray:
    """Class predictions without recording gradients."""
    logits, _, _ = model_forward(images, params, config, collect_maps=False)
    return logits.data.argmax(axis=1)


def evaluate(
    config: ModelConfig,
    params: dict[str, Tensor],
    dataset: Dataset,
    batch_size: int = 64,
) -> float:
    correct = 0
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        preds = predict(config, params, dataset.images[start:stop])
        correct += int((preds == dataset.labels[start:stop]).sum())
    return correct / len(dataset)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    history: list[dict]
    csv_text: str
    best_eval_acc: float
    final_train_acc: float
    fingerprint: str


def config_fingerprint(model_config: ModelConfig, train_config: TrainConfig) -> str:
    """Hash of the canonical config text, quoted in the metrics CSV header."""
    parts = []
    for prefix, cfg in (("model", model_config), ("train", train_config)):
        for key, value in sorted(dataclasses.asdict(cfg).items()):
            parts.append(f"{prefix}.{key}={value}")
    return hashlib.sha256("\n".join(parts).encode("utf-8")).hexdigest()


def _format_row(epoch: int, lr: float, loss: float, acc: float, eval_acc: float | None) -> str:
    cell = "" if eval_acc is None else f"{eval_acc:.6f}"
    return f"{epoch},{lr:.8g},{loss:.6f},{acc:.6f},{cell}"


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    init: str | dict[str, Tensor] = "fresh",
    out_dir: str | None = None,
) -> TrainResult:
    """Full training run; returns updated parameters and the metrics table.

    ``init`` is "fresh", a parameter dict (e.g. adapted from a dense
    checkpoint), or a checkpoint path. With ``out_dir`` set, writes
    metrics.csv plus last.ckpt and best.ckpt (best held-out accuracy).
    """
    if isinstance(init, str) and init != "fresh":
        from .checkpoint import load_checkpoint

        params, _ = load_checkpoint(init)
    elif isinstance(init, dict):
        params = init
    else:
        params = init_params(model_config, seed=train_config.seed)

    train_set = load_dataset(train_config.dataset)
    eval_set = (
        load_dataset(train_config.eval_dataset) if train_config.eval_dataset else train_set
    )
    if train_set.num_classes > model_config.num_classes:
        raise ContractError(
            f"dataset has {train_set.num_classes} classes, model only {model_config.num_classes}"
        )

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    fingerprint = config_fingerprint(model_config, train_config)
    shuffler = Xorshift64Star(train_config.seed)
    state: dict = {}
    step_fn = adamw_step if train_config.optimizer == "adamw" else sgd_step

    history: list[dict] = []
    lines = [f"# config_fingerprint={fingerprint}", "epoch,lr,train_loss,train_acc,eval_acc"]
    best_eval = -1.0
    final_train_acc = 0.0
    config_text = _model_config_text(model_config)

    for epoch in range(train_config.total_epochs):
        lr = lr_at(epoch, train_config)
        order = np.arange(len(train_set))
        shuffler.shuffle(order)
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(order), train_config.batch_size):
            batch_idx = order[start : start + train_config.batch_size]
            images = train_set.images[batch_idx]
            labels = train_set.labels[batch_idx]
            zero_grads(params.values())
            with Tape() as tape:
                logits, _, _ = model_forward(images, params, model_config, collect_maps=False)
                loss = cross_entropy(logits, labels)
                backward(loss, tape)
            if train_config.grad_clip > 0:
                clip_gradients(params, train_config.grad_clip)
            step_fn(params, state, lr, train_config)
            loss_sum += loss.item() * len(batch_idx)
            correct += int((logits.data.argmax(axis=1) == labels).sum())

        train_loss = loss_sum / len(train_set)
        train_acc = correct / len(train_set)
        final_train_acc = train_acc
        is_last = epoch == train_config.total_epochs - 1
        reached_target = (
            train_config.stop_at_train_acc is not None
            and train_acc >= train_config.stop_at_train_acc
        )
        eval_acc = None
        if (epoch + 1) % train_config.eval_every == 0 or is_last or reached_target:
            eval_acc = evaluate(model_config, params, eval_set)
            if eval_acc > best_eval:
                best_eval = eval_acc
                if out_dir:
                    save_checkpoint(os.path.join(out_dir, "best.ckpt"), params, config_text)
        history.append(
            dict(epoch=epoch, lr=lr, train_loss=train_loss, train_acc=train_acc, eval_acc=eval_acc)
        )
        lines.append(_format_row(epoch, lr, train_loss, train_acc, eval_acc))
        if reached_target:
            break

    csv_text = "\n".join(lines) + "\n"
    if out_dir:
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8", newline="\n") as f:
            f.write(csv_text)
        save_checkpoint(os.path.join(out_dir, "last.ckpt"), params, config_text)
    return TrainResult(
        params=params,
        history=history,
        csv_text=csv_text,
        best_eval_acc=best_eval,
        final_train_acc=final_train_acc,
        fingerprint=fingerprint,
    )


def _model_config_text(model_config: ModelConfig) -> str:
    from .config import model_config_to_text  # deferred: config imports this module

    return model_config_to_text(model_config)
