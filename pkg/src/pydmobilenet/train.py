"""SGD with Nesterov momentum, step schedule, train/eval loops and metrics."""
from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ops import soft_cross_entropy, softmax_cross_entropy
from .tensor import make_rng

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,lr,train_loss,train_err,test_err,seconds"


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 320
    base_lr: float = 0.1
    lr_drops: tuple = (150, 225)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    augment: bool = True
    mixup: bool = False
    mixup_alpha: float = 0.2
    record_time: bool = True

    def __post_init__(self):
        self.lr_drops = tuple(int(e) for e in self.lr_drops)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rate, momentum and weight decay must be non-negative")
        if not 0 < self.lr_factor <= 1:
            raise ValueError("lr_factor must lie in (0, 1]")
        drops = self.lr_drops
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError(f"lr drop epochs must be strictly increasing, got {drops}")
        if drops and drops[-1] >= self.epochs:
            raise ValueError(f"lr drop at epoch {drops[-1]} is not before the last epoch {self.epochs}")
        if self.mixup and self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant rate; each drop applies from its epoch onward."""
    n_drops = sum(1 for d in cfg.lr_drops if epoch >= d)
    return cfg.base_lr * cfg.lr_factor ** n_drops


def nag_step(theta, grad, velocity, lr: float, momentum: float, weight_decay: float):
    """One Nesterov update on plain arrays, returning new (theta, velocity).

    g = grad + wd * theta;  v = mu * v + g;  theta = theta - lr * (g + mu * v)
    """
    theta = np.asarray(theta)
    grad = np.asarray(grad)
    velocity = np.asarray(velocity)
    if theta.shape != grad.shape or theta.shape != velocity.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}, v {velocity.shape}")
    g = grad + weight_decay * theta
    v = momentum * velocity + g
    return theta - lr * (g + momentum * v), v


class NesterovSGD:
    """In-place NAG over a model's parameters; velocities start at zero."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float) -> None:
        mu, wd = self.momentum, self.weight_decay
        for p, v in zip(self.params, self.velocity):
            if p.grad.shape != p.value.shape:
                raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.value.shape}")
            g = p.grad + wd * p.value if wd else p.grad
            v *= mu
            v += g
            p.value -= (lr * (g + mu * v)).astype(p.value.dtype, copy=False)


def train_step(model, x, y, optimizer: NesterovSGD, lr: float, mixup_rng=None,
               mixup_alpha: float = 0.2):
    """Forward, backward and one optimizer step; returns (loss, n_wrong)."""
    if mixup_rng is not None:
        lam = mixup_rng.beta(mixup_alpha, mixup_alpha)
        perm = mixup_rng.permutation(len(y))
        x = (lam * x + (1 - lam) * x[perm]).astype(x.dtype)
        logits = model.forward(x)
        onehot = np.eye(logits.shape[1], dtype=logits.dtype)[y]
        target = lam * onehot + (1 - lam) * onehot[perm]
        loss, dlogits = soft_cross_entropy(logits, target)
        reference = target.argmax(axis=1)
    else:
        logits = model.forward(x)
        loss, dlogits = softmax_cross_entropy(logits, y)
        reference = y
    model.backward(dlogits)
    optimizer.step(lr)
    return loss, int((logits.argmax(axis=1) != reference).sum())


def train_epoch(model, batches, optimizer: NesterovSGD, lr: float, mixup_rng=None,
                mixup_alpha: float = 0.2, step_offset: int = 0):
    """One pass over ``batches`` in train mode; returns (mean loss, error rate)."""
    model.train()
    total_loss, wrong, seen = 0.0, 0, 0
    for i, (x, y) in enumerate(batches):
        loss, n_wrong = train_step(model, x, y, optimizer, lr, mixup_rng, mixup_alpha)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step_offset + i} (lr={lr})")
        total_loss += loss * len(y)
        wrong += n_wrong
        seen += len(y)
    if seen == 0:
        return 0.0, 0.0
    return total_loss / seen, wrong / seen


def predict_logits(model, batches) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        return np.concatenate([model.forward(x) for x, _ in batches])
    finally:
        model.train(was_training)


def top1_error(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(logits.argmax(axis=1) != labels))


def evaluate(model, batches) -> float:
    """Top-1 error with BN in eval mode."""
    batches = list(batches)
    if not batches:
        return 0.0
    logits = predict_logits(model, batches)
    labels = np.concatenate([y for _, y in batches])
    return top1_error(logits, labels)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_err: float
    test_err: float
    seconds: float

    def csv_row(self) -> str:
        test = "" if math.isnan(self.test_err) else f"{self.test_err:.6f}"
        return (f"{self.epoch},{self.lr:g},{self.train_loss:.6f},{self.train_err:.6f},"
                f"{test},{self.seconds:.3f}")


def append_metrics(path, row: EpochMetrics) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    text = (METRICS_HEADER + "\n" if new else "") + row.csv_row() + "\n"
    with open(path, "a", encoding="ascii") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())


@dataclass
class Trainer:
    """Epoch loop tying model, data, optimizer, metrics and checkpoints together."""

    model: object
    cfg: TrainConfig
    train_batches: object
    test_batches: object = None
    out_dir: str | None = None
    clock: object = time.perf_counter
    optimizer: NesterovSGD = None
    start_epoch: int = 0
    history: list = field(default_factory=list)
    extra_tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = NesterovSGD(self.model.params(), self.cfg.momentum, self.cfg.weight_decay)
        if self.out_dir is not None:
            Path(self.out_dir).mkdir(parents=True, exist_ok=True)

    @property
    def metrics_path(self):
        return None if self.out_dir is None else Path(self.out_dir) / "metrics.csv"

    def run(self, epochs: int | None = None):
        from .checkpoint import save_checkpoint

        cfg = self.cfg
        end = cfg.epochs if epochs is None else min(cfg.epochs, self.start_epoch + epochs)
        for epoch in range(self.start_epoch, end):
            # per-epoch stream so a resumed run draws the same mixing weights
            mixup_rng = make_rng(cfg.seed, 3, epoch) if cfg.mixup else None
            t0 = self.clock()
            lr = lr_at(epoch, cfg)
            if hasattr(self.train_batches, "set_epoch"):
                self.train_batches.set_epoch(epoch)
            loss, err = train_epoch(self.model, self.train_batches, self.optimizer, lr,
                                    mixup_rng, cfg.mixup_alpha)
            test_err = evaluate(self.model, self.test_batches) if self.test_batches is not None else float("nan")
            seconds = self.clock() - t0 if cfg.record_time else 0.0
            row = EpochMetrics(epoch, lr, loss, err, test_err, seconds)
            self.history.append(row)
            log.info("epoch %d lr %g loss %.4f train_err %.4f test_err %.4f", epoch, lr, loss, err, test_err)
            if self.out_dir is not None:
                append_metrics(self.metrics_path, row)
                save_checkpoint(Path(self.out_dir) / "last.pydn", self.model, self.optimizer, epoch + 1,
                                extra=self.extra_tensors)
            self.start_epoch = epoch + 1
        if self.out_dir is not None and self.start_epoch >= cfg.epochs:
            save_checkpoint(Path(self.out_dir) / "final.pydn", self.model, self.optimizer, self.start_epoch,
                            extra=self.extra_tensors)
        return self.history
