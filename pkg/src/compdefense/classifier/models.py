"""Desk-scale classifiers: a small CNN and a tiny patch transformer."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from .. import tensor as T
from ..tensor import Tensor, no_grad

ARCHS = ("small_cnn", "tiny_vit")

PATCH = 4
VIT_DIM = 64
VIT_DEPTH = 2
VIT_HEADS = 4
VIT_MLP_RATIO = 2


class Model:
    """A parameterised classifier; ``forward`` maps (N, C, H, W) images to logits."""

    def __init__(self, arch: str, params: "OrderedDict[str, Tensor]", num_classes: int, input_spec: tuple):
        self.arch = arch
        self.params = params
        self.num_classes = int(num_classes)
        self.input_spec = tuple(int(v) for v in input_spec)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if tuple(x.shape[1:]) != self.input_spec:
            raise T.ShapeError(f"{self.arch}: expected images of shape (N, {self.input_spec}), got {x.shape}")
        if x.shape[0] == 0:
            return Tensor(np.zeros((0, self.num_classes), dtype=np.float32))
        return _FORWARD[self.arch](self.params, x)

    def parameters(self) -> list:
        return list(self.params.values())

    def copy(self) -> "Model":
        params = OrderedDict((k, Tensor(v.data.copy())) for k, v in self.params.items())
        return Model(self.arch, params, self.num_classes, self.input_spec)

    def __repr__(self) -> str:
        n = sum(p.size for p in self.params.values())
        return f"Model({self.arch}, classes={self.num_classes}, input={self.input_spec}, params={n})"


def _uniform(rng, shape, fan_in, gain=math.sqrt(6.0)):
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _init_small_cnn(rng, num_classes, c, h, w):
    h4, w4 = h // 2 // 2, w // 2 // 2
    flat = 64 * h4 * w4
    shapes = [
        ("conv1.w", (32, c, 3, 3), c * 9),
        ("conv1.b", (32,), None),
        ("conv2.w", (64, 32, 3, 3), 32 * 9),
        ("conv2.b", (64,), None),
        ("fc1.w", (flat, 128), flat),
        ("fc1.b", (128,), None),
        ("fc2.w", (128, num_classes), 128),
        ("fc2.b", (num_classes,), None),
    ]
    params = OrderedDict()
    for name, shape, fan_in in shapes:
        if fan_in is None:
            params[name] = Tensor(np.zeros(shape, dtype=np.float32))
        else:
            params[name] = Tensor(_uniform(rng, shape, fan_in))
    return params


def _small_cnn(p, x):
    h = T.max_pool2d(T.relu(T.conv2d(x, p["conv1.w"], p["conv1.b"], padding=1)))
    h = T.max_pool2d(T.relu(T.conv2d(h, p["conv2.w"], p["conv2.b"], padding=1)))
    h = T.reshape(h, (h.shape[0], -1))
    h = T.relu(h @ p["fc1.w"] + p["fc1.b"])
    return h @ p["fc2.w"] + p["fc2.b"]


def _init_tiny_vit(rng, num_classes, c, h, w):
    tokens = (h // PATCH) * (w // PATCH)
    d, hid = VIT_DIM, VIT_DIM * VIT_MLP_RATIO
    pdim = c * PATCH * PATCH
    params = OrderedDict()

    def dense(name, fan_in, fan_out, gain=math.sqrt(3.0)):
        params[name + ".w"] = Tensor(_uniform(rng, (fan_in, fan_out), fan_in, gain))
        params[name + ".b"] = Tensor(np.zeros(fan_out, dtype=np.float32))

    def norm(name):
        params[name + ".g"] = Tensor(np.ones(d, dtype=np.float32))
        params[name + ".b"] = Tensor(np.zeros(d, dtype=np.float32))

    dense("embed", pdim, d)
    params["pos"] = Tensor((0.02 * rng.standard_normal((tokens, d))).astype(np.float32))
    for i in range(VIT_DEPTH):
        norm(f"block{i}.ln1")
        dense(f"block{i}.qkv", d, 3 * d)
        dense(f"block{i}.proj", d, d)
        norm(f"block{i}.ln2")
        dense(f"block{i}.mlp1", d, hid)
        dense(f"block{i}.mlp2", hid, d)
    norm("ln_out")
    dense("head", d, num_classes)
    return params


def patchify(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, tokens, C*P*P), tokens in raster order."""
    n, c, h, w = x.shape
    gh, gw = h // PATCH, w // PATCH
    t = T.reshape(x, (n, c, gh, PATCH, gw, PATCH))
    t = T.transpose(t, (0, 2, 4, 1, 3, 5))
    return T.reshape(t, (n, gh * gw, c * PATCH * PATCH))


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    k = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + T.tanh(k * (x + 0.044715 * x * x * x)))


def _attention(p, pre, x):
    n, t, d = x.shape
    hd = d // VIT_HEADS
    qkv = x @ p[pre + ".qkv.w"] + p[pre + ".qkv.b"]
    qkv = T.transpose(T.reshape(qkv, (n, t, 3, VIT_HEADS, hd)), (2, 0, 3, 1, 4))  # 3 n h t hd
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax((q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd)), axis=-1)
    out = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (n, t, d))
    return out @ p[pre + ".proj.w"] + p[pre + ".proj.b"]


def _tiny_vit(p, x):
    z = patchify(x) @ p["embed.w"] + p["embed.b"] + p["pos"]
    for i in range(VIT_DEPTH):
        pre = f"block{i}"
        z = z + _attention(p, pre, T.layer_norm(z, p[pre + ".ln1.g"], p[pre + ".ln1.b"]))
        hdn = T.layer_norm(z, p[pre + ".ln2.g"], p[pre + ".ln2.b"])
        hdn = gelu(hdn @ p[pre + ".mlp1.w"] + p[pre + ".mlp1.b"])
        z = z + (hdn @ p[pre + ".mlp2.w"] + p[pre + ".mlp2.b"])
    z = T.layer_norm(z, p["ln_out.g"], p["ln_out.b"])
    return T.mean(z, axis=1) @ p["head.w"] + p["head.b"]


_INIT = {"small_cnn": _init_small_cnn, "tiny_vit": _init_tiny_vit}
_FORWARD = {"small_cnn": _small_cnn, "tiny_vit": _tiny_vit}


def build_model(arch: str, num_classes: int = 10, input_spec=(1, 28, 28), seed: int = 0) -> Model:
    if arch not in ARCHS:
        raise ValueError(f"unsupported architecture {arch!r}; choose from {ARCHS}")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    c, h, w = (int(v) for v in input_spec)
    if h < 16 or w < 16:
        raise ValueError(f"input height/width must be at least 16, got {h}x{w}")
    if arch == "tiny_vit" and (h % PATCH or w % PATCH):
        raise ValueError(f"tiny_vit needs height and width divisible by {PATCH}, got {h}x{w}")
    rng = np.random.default_rng(seed)
    return Model(arch, _INIT[arch](rng, num_classes, c, h, w), num_classes, (c, h, w))


def num_tokens(model: Model) -> int:
    _, h, w = model.input_spec
    return (h // PATCH) * (w // PATCH)


def predict(model: Model, images, batch_size: int = 500) -> np.ndarray:
    """Logits for a batch of [0,1] images, evaluated without a tape."""
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_spec:
        raise T.ShapeError(f"predict: expected (N, {model.input_spec}) images, got {x.shape}")
    if len(x) == 0:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    with no_grad():
        parts = [model.forward(Tensor(x[i : i + batch_size])).data for i in range(0, len(x), batch_size)]
    return np.concatenate(parts)
