"""Optimisers and the supervised training loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..data import LabeledDataset
from ..tensor import Tensor
from .models import Model, predict

OPTIMIZERS = ("adam", "sgd_momentum")
SCHEDULES = ("constant", "cosine")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    schedule: str = "constant"  # cosine: decay the step size to 0 over all steps

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; choose from {SCHEDULES}")


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


class SGDMomentum:
    def __init__(self, params, lr=1e-2, momentum=0.9):
        self.params = list(params)
        self.lr, self.mu = lr, momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        for p, g, b in zip(self.params, grads, self.buf):
            b *= self.mu
            b += g
            p.data -= (self.lr * b).astype(p.data.dtype)


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd_momentum":
        return SGDMomentum(params, lr, momentum)
    raise ValueError(f"unknown optimizer {name!r}")


def train(model: Model, dataset: LabeledDataset, cfg: TrainConfig | None = None, log=None):
    """Train ``model`` in place and return ``(model, history)``.

    History holds one dict per epoch with mean training loss and the
    running training accuracy seen during that epoch.
    """
    cfg = cfg or TrainConfig()
    if dataset.split != "train":
        raise ValueError(f"train expects a train split, got {dataset.split!r}")
    history: list = []
    if cfg.epochs == 0:
        return model, history
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    for p in params:
        p.requires_grad = True
    opt = make_optimizer(cfg.optimizer, params, cfg.learning_rate, cfg.momentum)
    x_all, y_all = dataset.images, dataset.labels
    n = len(y_all)
    total = cfg.epochs * -(-n // cfg.batch_size)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            tot_loss, correct = 0.0, 0
            for i in range(0, n, cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                if cfg.schedule == "cosine":
                    opt.lr = cfg.learning_rate * 0.5 * (1 + np.cos(np.pi * step / total))
                step += 1
                logits = model.forward(Tensor(x_all[idx]))
                loss = T.cross_entropy(logits, y_all[idx])
                if not np.isfinite(loss.data):
                    raise TrainingDivergedError(f"training loss became non-finite in epoch {epoch}")
                grads = T.grad(loss, params)
                opt.step(grads)
                tot_loss += float(loss.data) * len(idx)
                correct += int((logits.data.argmax(1) == y_all[idx]).sum())
            rec = {"epoch": epoch, "loss": tot_loss / n, "accuracy": correct / n}
            history.append(rec)
            if log:
                log(f"epoch {epoch}: loss {rec['loss']:.4f} acc {rec['accuracy']:.4f}")
    except T.NonFiniteError as e:
        raise TrainingDivergedError(f"training diverged in epoch {epoch}: {e}") from e
    finally:
        for p in params:
            p.requires_grad = False
    return model, history


def accuracy(model: Model, dataset: LabeledDataset, defense=None) -> float:
    """Fraction of samples classified correctly, optionally after a defense."""
    if len(dataset.labels) == 0:
        raise ValueError("accuracy needs a nonempty dataset")
    x = dataset.images
    if defense is not None:
        from ..defense import apply_defense

        x = apply_defense(x, defense)
    pred = predict(model, x).argmax(axis=1)
    return float(np.mean(pred == dataset.labels))
