"""Gradient-based evasion attacks against an arbitrary differentiable pipeline.

A *pipeline* is any callable mapping an image ``Tensor`` (N, C, H, W) to a
logits ``Tensor`` (N, K): the bare model, or a defense followed by the
model. The attacks never look inside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .. import tensor as T
from ..tensor import Tensor, no_grad

Pipeline = Callable[[Tensor], Tensor]

KINDS = ("fgsm", "ifgsm", "pgd", "cw", "deepfool")
LINF = ("fgsm", "ifgsm", "pgd")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "ifgsm"
    epsilon: float = 8 / 255
    alpha: Optional[float] = None  # defaults to epsilon / 4
    steps: Optional[int] = None  # 10 for ifgsm/pgd, 50 for cw/deepfool
    random_start: Optional[bool] = None  # pgd only; defaults to True
    c: float = 1.0
    kappa: float = 0.0
    lr: float = 0.01
    overshoot: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; choose from {KINDS}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def step_size(self) -> float:
        return self.epsilon / 4 if self.alpha is None else self.alpha

    @property
    def n_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return 10 if self.kind in ("ifgsm", "pgd") else 50 if self.kind in ("cw", "deepfool") else 1

    @property
    def uses_random_start(self) -> bool:
        return self.kind == "pgd" and (True if self.random_start is None else self.random_start)

    def with_budget(self, budget: float) -> "AttackConfig":
        return replace(self, epsilon=float(budget))


@dataclass
class AttackResult:
    adversarial: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    success: np.ndarray
    iterations: np.ndarray
    extra: dict = field(default_factory=dict)


def _prepare(images, labels):
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 4 or len(x) != len(y):
        raise T.ShapeError(f"attack expects (N, C, H, W) images with N labels, got {x.shape} and {y.shape}")
    return x, y


def _predict(pipeline: Pipeline, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return pipeline(Tensor(x)).data


def _result(pipeline, x, xadv, y, iters, **extra) -> AttackResult:
    d = (xadv.astype(np.float64) - x.astype(np.float64)).reshape(len(x), -1)
    pred = _predict(pipeline, xadv).argmax(axis=1) if len(x) else np.zeros(0, dtype=np.int64)
    return AttackResult(
        adversarial=xadv,
        linf=np.abs(d).max(axis=1) if d.size else np.zeros(len(x)),
        l2=np.sqrt((d**2).sum(axis=1)),
        success=pred != y,
        iterations=np.asarray(iters, dtype=np.int64),
        extra=extra,
    )


def loss_gradient(pipeline: Pipeline, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d/dx of the summed cross-entropy; samples never interact."""
    xt = Tensor(x, requires_grad=True)
    loss = T.cross_entropy(pipeline(xt), y, reduction="sum")
    (g,) = T.grad(loss, [xt])
    return g


def _signed_step(x: np.ndarray, g: np.ndarray, step: float) -> np.ndarray:
    return np.clip(x + np.float32(step) * np.sign(g).astype(np.float32), 0.0, 1.0).astype(np.float32)


def _project(v: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(v, lo), hi)


def fgsm(pipeline: Pipeline, images, labels, cfg: AttackConfig | None = None) -> AttackResult:
    cfg = cfg or AttackConfig("fgsm")
    x, y = _prepare(images, labels)
    if cfg.epsilon == 0 or len(x) == 0:
        return _result(pipeline, x, x.copy(), y, np.zeros(len(x)))
    xadv = _signed_step(x, loss_gradient(pipeline, x, y), cfg.epsilon)
    return _result(pipeline, x, xadv, y, np.ones(len(x)))


def _iterative(pipeline, x, y, eps, alpha, steps, start):
    eps32 = np.float32(eps)
    lo, hi = x - eps32, x + eps32
    xa = start
    for _ in range(steps):
        xa = _project(_signed_step(xa, loss_gradient(pipeline, xa, y), alpha), lo, hi)
    return xa


def ifgsm(pipeline: Pipeline, images, labels, cfg: AttackConfig | None = None) -> AttackResult:
    cfg = cfg or AttackConfig("ifgsm")
    x, y = _prepare(images, labels)
    steps = cfg.n_steps
    if cfg.epsilon == 0 or len(x) == 0:
        return _result(pipeline, x, x.copy(), y, np.zeros(len(x)))
    xadv = _iterative(pipeline, x, y, cfg.epsilon, cfg.step_size, steps, x.copy())
    return _result(pipeline, x, xadv, y, np.full(len(x), steps))


def pgd_start(x: np.ndarray, eps: float, seed: int) -> np.ndarray:
    """Uniform draw in the eps-ball around ``x``, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-eps, eps, size=x.shape).astype(np.float32)
    eps32 = np.float32(eps)
    return _project(np.clip(x + noise, 0.0, 1.0), x - eps32, x + eps32).astype(np.float32)


def pgd(pipeline: Pipeline, images, labels, cfg: AttackConfig | None = None) -> AttackResult:
    cfg = cfg or AttackConfig("pgd")
    x, y = _prepare(images, labels)
    steps = cfg.n_steps
    if cfg.epsilon == 0 or len(x) == 0:
        return _result(pipeline, x, x.copy(), y, np.zeros(len(x)))
    start = pgd_start(x, cfg.epsilon, cfg.seed) if cfg.uses_random_start else x.copy()
    xadv = _iterative(pipeline, x, y, cfg.epsilon, cfg.step_size, steps, start)
    return _result(pipeline, x, xadv, y, np.full(len(x), steps))


# --- L2 attacks ---------------------------------------------------------------

_ATANH_LIMIT = 1 - 1e-6


def _margin(logits: Tensor, y: np.ndarray, kappa: float) -> Tensor:
    """max(z_y - max_{j != y} z_j, -kappa) per sample."""
    n, k = logits.shape
    onehot = np.eye(k, dtype=logits.dtype)[y]
    z_y = T.sum(logits * onehot, axis=1)
    z_other = T.amax(logits - onehot * np.float32(1e9), axis=1)
    return T.clamp(z_y - z_other, -kappa, None)


def cw(pipeline: Pipeline, images, labels, cfg: AttackConfig | None = None) -> AttackResult:
    """L2 attack in tanh space with Adam; keeps the lowest-L2 successful iterate."""
    from ..classifier.training import Adam

    cfg = cfg or AttackConfig("cw")
    x, y = _prepare(images, labels)
    n = len(x)
    if n == 0:
        return _result(pipeline, x, x.copy(), y, np.zeros(0))
    w0 = np.arctanh(np.clip(2.0 * x.astype(np.float64) - 1.0, -_ATANH_LIMIT, _ATANH_LIMIT)).astype(np.float32)
    w = Tensor(w0.copy(), requires_grad=True)
    anchor = ((np.tanh(w0) + 1.0) / 2.0).astype(np.float32)  # x as the parametrisation sees it
    opt = Adam([w], lr=cfg.lr)
    best = anchor.copy()
    best_l2 = np.full(n, np.inf)
    found_at = np.zeros(n, dtype=np.int64)
    xflat = x.reshape(n, -1).astype(np.float64)

    def consider(xcur, logits, it):
        ok = logits.argmax(axis=1) != y
        l2 = np.sqrt(((xcur.reshape(n, -1).astype(np.float64) - xflat) ** 2).sum(axis=1))
        better = ok & (l2 < best_l2)
        best[better] = xcur[better]
        best_l2[better] = l2[better]
        found_at[better] = it

    try:
        for it in range(cfg.n_steps):
            xp = (T.tanh(w) + 1.0) * 0.5
            logits = pipeline(xp)
            consider(xp.data, logits.data, it)
            dist = T.sum(T.reshape((xp - anchor) * (xp - anchor), (n, -1)), axis=1)
            obj = T.sum(dist + cfg.c * _margin(logits, y, cfg.kappa))
            if not np.isfinite(obj.data):
                raise AttackError("cw: objective became non-finite")
            (g,) = T.grad(obj, [w])
            opt.step([g])
        final = ((np.tanh(w.data) + 1.0) / 2.0).astype(np.float32)
        consider(final, _predict(pipeline, final), cfg.n_steps)
    except T.NonFiniteError as e:
        raise AttackError(f"cw: non-finite value during optimisation ({e})") from e
    out = np.where(np.isfinite(best_l2)[:, None, None, None], best, final).astype(np.float32)
    iters = np.where(np.isfinite(best_l2), found_at, cfg.n_steps)
    return _result(pipeline, x, out, y, iters)


def _class_gradients(pipeline: Pipeline, xi: np.ndarray) -> tuple:
    """Logits and per-class input gradients for one sample, via one batched pass."""
    with no_grad():
        k = pipeline(Tensor(xi[None])).shape[1]
    rep = Tensor(np.repeat(xi[None], k, axis=0), requires_grad=True)
    logits = pipeline(rep)
    sel = T.sum(logits * np.eye(k, dtype=logits.dtype))
    (g,) = T.grad(sel, [rep])
    return logits.data[0].astype(np.float64), g.astype(np.float64)


def deepfool(pipeline: Pipeline, images, labels, cfg: AttackConfig | None = None) -> AttackResult:
    """Per-sample DeepFool: step to the nearest linearised boundary until the class changes."""
    cfg = cfg or AttackConfig("deepfool")
    x, y = _prepare(images, labels)
    out = x.copy()
    iters = np.zeros(len(x), dtype=np.int64)
    degenerate = np.zeros(len(x), dtype=bool)
    scale = 1.0 + cfg.overshoot
    for i in range(len(x)):
        x0 = x[i].astype(np.float64)
        r_tot = np.zeros_like(x0)
        xi = x[i]
        k0 = int(y[i])
        for it in range(cfg.n_steps):
            z, grads = _class_gradients(pipeline, xi)
            if int(np.argmax(z)) != k0:
                break
            f = np.delete(z - z[k0], k0)
            wv = np.delete((grads - grads[k0]).reshape(len(z), -1), k0, axis=0)
            norms = np.linalg.norm(wv, axis=1)
            if not np.any(norms > 0):
                degenerate[i] = True
                break
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(norms > 0, np.abs(f) / norms, np.inf)
            ell = int(np.argmin(ratio))
            r_tot = r_tot + (abs(f[ell]) / norms[ell] ** 2) * wv[ell].reshape(x0.shape)
            xi = np.clip(x0 + scale * r_tot, 0.0, 1.0).astype(np.float32)
            iters[i] = it + 1
        out[i] = np.clip(x0 + scale * r_tot, 0.0, 1.0).astype(np.float32)
    res = _result(pipeline, x, out, y, iters)
    res.success &= ~degenerate
    res.extra["degenerate"] = degenerate
    return res


ATTACKS = {"fgsm": fgsm, "ifgsm": ifgsm, "pgd": pgd, "cw": cw, "deepfool": deepfool}


def run_attack(pipeline: Pipeline, images, labels, cfg: AttackConfig) -> AttackResult:
    return ATTACKS[cfg.kind](pipeline, images, labels, cfg)


def thresholded_accuracy(result: AttackResult, clean_correct, thresholds) -> list:
    """Accuracy when only perturbations with L2 <= t count as successful attacks."""
    t = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be sorted ascending")
    cc = np.asarray(clean_correct, dtype=bool)
    if len(cc) == 0:
        raise ValueError("thresholded_accuracy needs at least one sample")
    success = np.asarray(result.success, dtype=bool)
    l2 = np.asarray(result.l2, dtype=np.float64)
    return [float(np.mean(cc & (~success | (l2 > ti)))) for ti in t]
