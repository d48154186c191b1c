"""Quantised-latent autoencoder with a factorised per-channel rate model."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..tensor import Tensor, no_grad

LATENT_CHANNELS = 32
DOWNSAMPLE = 4
BIN_MIN, BIN_MAX = -32, 32
N_BINS = BIN_MAX - BIN_MIN + 1
INIT_SIGMA = 8.0


class RateModelError(ValueError):
    pass


class LearnedCodec:
    TAG = "learned_codec"

    def __init__(self, params: "OrderedDict[str, Tensor]", lam: float, input_spec: tuple):
        if not lam > 0:
            raise ValueError(f"lambda must be positive, got {lam}")
        self.params = params
        self.lam = float(lam)
        self.input_spec = tuple(int(v) for v in input_spec)

    @property
    def metadata(self) -> dict:
        return {"lambda": self.lam, "latent_channels": LATENT_CHANNELS, "input_spec": list(self.input_spec)}

    def parameters(self) -> list:
        return list(self.params.values())

    def latent_shape(self) -> tuple:
        _, h, w = self.input_spec
        return (LATENT_CHANNELS, h // DOWNSAMPLE, w // DOWNSAMPLE)

    def __repr__(self) -> str:
        return f"LearnedCodec(lambda={self.lam}, input={self.input_spec})"


def _conv_init(rng, params, name, cout, cin, k=3):
    fan_in = cin * k * k
    bound = math.sqrt(6.0 / fan_in)
    params[name + ".w"] = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)).astype(np.float32))
    params[name + ".b"] = Tensor(np.zeros(cout, dtype=np.float32))


def build_codec(lam: float, input_spec=(1, 28, 28), seed: int = 0) -> LearnedCodec:
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    c, h, w = (int(v) for v in input_spec)
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ValueError(f"codec needs height and width divisible by {DOWNSAMPLE}, got {h}x{w}")
    rng = np.random.default_rng(seed)
    L = LATENT_CHANNELS
    p: OrderedDict = OrderedDict()
    _conv_init(rng, p, "enc1", L, c)
    _conv_init(rng, p, "enc2", L, L)
    _conv_init(rng, p, "enc3", L, L)
    _conv_init(rng, p, "dec1", L * 4, L)
    _conv_init(rng, p, "dec2", 16 * 4, L)
    _conv_init(rng, p, "dec3", c, 16)
    # Broad discretised Gaussian as the starting density for every channel.
    k = np.arange(BIN_MIN, BIN_MAX + 1, dtype=np.float64)
    logits = -0.5 * (k / INIT_SIGMA) ** 2
    p["rate.logits"] = Tensor(np.tile(logits, (L, 1)).astype(np.float32))
    return LearnedCodec(p, lam, (c, h, w))


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    n, c, h, w = x.shape
    co = c // (r * r)
    t = T.reshape(x, (n, co, r, r, h, w))
    t = T.transpose(t, (0, 1, 4, 2, 5, 3))
    return T.reshape(t, (n, co, h * r, w * r))


def encode(codec: LearnedCodec, x: Tensor) -> Tensor:
    p = codec.params
    h = T.relu(T.conv2d(x, p["enc1.w"], p["enc1.b"], stride=2, padding=1))
    h = T.relu(T.conv2d(h, p["enc2.w"], p["enc2.b"], stride=2, padding=1))
    return T.conv2d(h, p["enc3.w"], p["enc3.b"], padding=1)


def decode(codec: LearnedCodec, y: Tensor) -> Tensor:
    p = codec.params
    h = pixel_shuffle(T.relu(T.conv2d(y, p["dec1.w"], p["dec1.b"], padding=1)))
    h = pixel_shuffle(T.relu(T.conv2d(h, p["dec2.w"], p["dec2.b"], padding=1)))
    return T.conv2d(h, p["dec3.w"], p["dec3.b"], padding=1)


def pmf(codec: LearnedCodec) -> np.ndarray:
    """Per-channel bin masses (channels, bins), checked for normalisation."""
    logits = codec.params["rate.logits"].data.astype(np.float64)
    with np.errstate(all="ignore"):
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
    if not np.all(np.isfinite(probs)) or np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise RateModelError("rate model density is not normalised")
    return probs


def _bits(codec: LearnedCodec, y: Tensor) -> Tensor:
    """-log2 likelihood of each latent under the piecewise-linear density.

    Integer values take their bin mass; a value k + t between bins takes
    (1 - t) P[k] + t P[k + 1], which is what the uniform-noise relaxation sees.
    """
    n, c, h, w = y.shape
    logp = T.log_softmax(codec.params["rate.logits"], axis=1)  # (C, bins)
    probs = T.exp(logp)
    pos = T.clamp(y, BIN_MIN, BIN_MAX).data - BIN_MIN  # in [0, bins-1]
    lo = np.clip(np.floor(pos), 0, N_BINS - 2).astype(np.intp)
    frac = T.clamp(y, BIN_MIN, BIN_MAX) - (lo + BIN_MIN).astype(y.dtype)
    # gather P[c, lo] and P[c, lo+1] for every latent
    idx = np.transpose(lo, (1, 0, 2, 3)).reshape(c, -1)
    p_lo = T.take_along_axis(probs, idx, axis=1)
    p_hi = T.take_along_axis(probs, idx + 1, axis=1)
    f = T.reshape(T.transpose(frac, (1, 0, 2, 3)), (c, -1))
    like = p_lo * (1.0 - f) + p_hi * f
    like = T.clamp(like, 1e-9, None)
    bits = T.neg(T.log(like)) * (1.0 / math.log(2.0))
    return T.transpose(T.reshape(bits, (c, n, h, w)), (1, 0, 2, 3))


def quantize(y: Tensor, differentiable: bool) -> Tensor:
    y = T.clamp(y, BIN_MIN, BIN_MAX)
    return T.smooth_round(y) if differentiable else T.hard_round(y)


def _check(codec: LearnedCodec, x: Tensor):
    if x.ndim != 4 or tuple(x.shape[1:]) != codec.input_spec:
        raise T.ShapeError(f"codec_forward: expected (N, {codec.input_spec}) images, got {x.shape}")


def codec_forward(codec: LearnedCodec, images, differentiable: bool = True) -> Tensor:
    """Encode, quantise, decode, clamp to [0,1]."""
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    _check(codec, x)
    if x.shape[0] == 0:
        return Tensor(np.zeros(x.shape, dtype=np.float32))
    return T.clamp(decode(codec, quantize(encode(codec, x), differentiable)), 0.0, 1.0)


def latents(codec: LearnedCodec, images) -> np.ndarray:
    with no_grad():
        x = Tensor(np.asarray(images, dtype=np.float32))
        _check(codec, x)
        return quantize(encode(codec, x), False).data


def codec_rate(codec: LearnedCodec, images, batch_size: int = 500) -> float:
    """Estimated bits per pixel: mean over images of total latent bits / (H*W)."""
    probs = pmf(codec)
    x = np.asarray(images, dtype=np.float32)
    if len(x) == 0:
        raise ValueError("codec_rate needs at least one image")
    _, h, w = codec.input_spec
    per_image = []
    for i in range(0, len(x), batch_size):
        q = latents(codec, x[i : i + batch_size]).astype(np.intp) - BIN_MIN
        ch = np.arange(q.shape[1])[None, :, None, None]
        bits = -np.log2(np.maximum(probs[ch, q], 1e-300))
        per_image.append(bits.sum(axis=(1, 2, 3)) / (h * w))
    return float(np.mean(np.concatenate(per_image)))


def reconstruction_mse(codec: LearnedCodec, images, batch_size: int = 500) -> float:
    x = np.asarray(images, dtype=np.float32)
    errs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            xb = x[i : i + batch_size]
            errs.append(((codec_forward(codec, xb, differentiable=False).data - xb) ** 2).reshape(len(xb), -1).mean(1))
    return float(np.mean(np.concatenate(errs)))


@dataclass(frozen=True)
class CodecTrainConfig:
    epochs: int = 4
    batch_size: int = 64
    learning_rate: float = 2e-3
    seed: int = 0
    # The density logits need to move by whole units, far more than the
    # network weights, so they get their own step size.
    rate_learning_rate: float = 0.05

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0 or not self.rate_learning_rate > 0:
            raise ValueError("invalid codec training configuration")


class CodecDivergedError(FloatingPointError):
    pass


def train_codec(codec: LearnedCodec, corpus, cfg: CodecTrainConfig | None = None, log=None):
    """Minimise MSE + lambda * mean latent bits; returns ``(codec, history)``."""
    from ..classifier.training import Adam

    cfg = cfg or CodecTrainConfig()
    x_all = np.asarray(corpus, dtype=np.float32)
    if len(x_all) == 0:
        raise ValueError("train_codec needs a nonempty corpus")
    history: list = []
    if cfg.epochs == 0:
        return codec, history
    rng = np.random.default_rng(cfg.seed)
    params = codec.parameters()
    for p in params:
        p.requires_grad = True
    net = [p for k, p in codec.params.items() if k != "rate.logits"]
    opt_net = Adam(net, cfg.learning_rate)
    opt_rate = Adam([codec.params["rate.logits"]], cfg.rate_learning_rate)
    n = len(x_all)
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            sums = np.zeros(3)
            for i in range(0, n, cfg.batch_size):
                xb = Tensor(x_all[order[i : i + cfg.batch_size]])
                y = T.clamp(encode(codec, xb), BIN_MIN, BIN_MAX)
                noisy = y + rng.uniform(-0.5, 0.5, y.shape).astype(np.float32)
                rec = decode(codec, noisy)
                mse = T.mean((rec - xb) * (rec - xb))
                rate = T.mean(_bits(codec, noisy))
                loss = mse + codec.lam * rate
                if not np.isfinite(loss.data):
                    raise CodecDivergedError(f"codec loss became non-finite in epoch {epoch}")
                grads = T.grad(loss, net + [codec.params["rate.logits"]])
                opt_net.step(grads[:-1])
                opt_rate.step(grads[-1:])
                sums += np.array([float(loss.data), float(mse.data), float(rate.data)]) * len(xb)
            loss_m, mse_m, rate_m = sums / n
            history.append({"epoch": epoch, "loss": loss_m, "distortion": mse_m, "rate": rate_m})
            if log:
                log(f"codec lambda={codec.lam} epoch {epoch}: loss {loss_m:.5f} mse {mse_m:.5f} bits/latent {rate_m:.3f}")
    except T.NonFiniteError as e:
        raise CodecDivergedError(f"codec training diverged in epoch {epoch}: {e}") from e
    finally:
        for p in params:
            p.requires_grad = False
    return codec, history
