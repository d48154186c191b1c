"""Compression defenses and the attacker/evaluator wiring around them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .jpeg import JpegConfig, jpeg_forward
from .tensor import Tensor, no_grad

CODECS = ("none", "jpeg", "learned")


@dataclass(frozen=True)
class DefenseConfig:
    codec: str = "none"
    quality: float | None = None  # JPEG q, or the lambda of the learned codec
    iterations: int = 1
    through: bool = False
    # Trained codec for codec == "learned"; not part of the identity of the config.
    model: object = field(default=None, compare=False, repr=False, hash=False)
    # Evaluate with the bit-exact JPEG instead of the differentiable one.
    exact_eval: bool = False

    def __post_init__(self):
        if self.codec not in CODECS:
            raise ValueError(f"unknown codec {self.codec!r}; choose from {CODECS}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be at least 1, got {self.iterations}")
        if self.codec == "jpeg":
            JpegConfig(self.quality if self.quality is not None else 25.0)
        if self.codec == "learned" and self.model is None:
            raise ValueError("codec 'learned' needs a trained codec in DefenseConfig.model")

    @property
    def q(self) -> float:
        return 25.0 if self.quality is None else float(self.quality)

    @property
    def label(self) -> str:
        if self.codec == "none":
            return "none"
        return f"{self.codec}-q{self.q:g}-n{self.iterations}{'-through' if self.through else ''}"


def _one_pass(x: Tensor, cfg: DefenseConfig, differentiable: bool) -> Tensor:
    if cfg.codec == "jpeg":
        mode = "differentiable" if differentiable else "bit_exact"
        return jpeg_forward(x, JpegConfig(cfg.q, mode))
    from .learned.codec import codec_forward

    return codec_forward(cfg.model, x, differentiable=differentiable)


def apply_defense(images, cfg: DefenseConfig, differentiable: bool = True, batch_size: int = 500):
    """N-fold compress/decompress.

    A ``Tensor`` input gives a ``Tensor`` output with the tape intact; an
    array input is processed in batches without a tape and returned as an
    array.
    """
    if cfg.codec == "none":
        return images
    if isinstance(images, Tensor):
        v = images
        for _ in range(cfg.iterations):
            v = _one_pass(v, cfg, differentiable)
        return v
    x = np.asarray(images, dtype=np.float32)
    out = np.empty_like(x)
    with no_grad():
        for i in range(0, len(x), batch_size):
            v = Tensor(x[i : i + batch_size])
            for _ in range(cfg.iterations):
                v = _one_pass(v, cfg, differentiable)
            out[i : i + batch_size] = v.data
    return out


@dataclass
class Pipelines:
    attack: object  # Tensor -> logits, what the attacker differentiates
    evaluate: object  # Tensor -> logits, what is scored


def make_pipeline(model, cfg: DefenseConfig) -> Pipelines:
    """Build the attacker-side and evaluation-side pipelines.

    The evaluation side is always model(defense(x)). With ``through`` the
    attacker differentiates that same composition; otherwise it only sees
    the bare model and the defense acts at evaluation time.
    """
    eval_differentiable = not cfg.exact_eval

    def evaluate(x):
        return model.forward(apply_defense(x, cfg, differentiable=eval_differentiable))

    def through(x):
        return model.forward(apply_defense(x, cfg, differentiable=True))

    attack = through if cfg.through else model.forward
    return Pipelines(attack=attack, evaluate=evaluate)
