"""JPEG compress/decompress as an image-to-image map.

Two modes share one pipeline description:

* ``differentiable`` builds the whole round trip from tensor primitives,
  with the cubic rounding surrogate in place of quantisation, so gradients
  flow from the reconstruction back to the input pixels;
* ``bit_exact`` works on 8-bit samples and integer coefficients exactly
  as a baseline encoder/decoder pair would.

Chroma is never subsampled (4:4:4).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from ..tensor.ops import dct_matrix, round_half_away
from .tables import QuantTables, quant_table

# JFIF full-range RGB -> YCbCr (offsets applied separately).
RGB_TO_YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCC_TO_RGB = np.linalg.inv(RGB_TO_YCC)

MODES = ("differentiable", "bit_exact")


@dataclass(frozen=True)
class JpegConfig:
    quality: float = 25.0
    mode: str = "differentiable"

    def __post_init__(self):
        quant_table(self.quality)  # validates range
        if self.mode not in MODES:
            raise ValueError(f"unknown JPEG mode {self.mode!r}; expected one of {MODES}")


def _check_channels(shape) -> None:
    if len(shape) != 4 or shape[1] not in (1, 3):
        raise ValueError(f"JPEG expects (N, 1|3, H, W) images, got shape {tuple(shape)}")


def _qmatrix(tables: QuantTables, channels: int, dtype) -> np.ndarray:
    """Per-channel tables shaped to broadcast against (N, C, bh, bw, 8, 8) blocks."""
    qs = [tables.luma] + [tables.chroma] * (channels - 1)
    return np.stack(qs).astype(dtype)[None, :, None, None]


def _pad_amount(n: int) -> int:
    return (-n) % 8


# --- differentiable path ----------------------------------------------------

def _color_forward(x: Tensor) -> Tensor:
    m = RGB_TO_YCC.T.astype(x.dtype)
    y = T.transpose(x, (0, 2, 3, 1)) @ m
    return T.transpose(y, (0, 3, 1, 2))


def _color_inverse(x: Tensor) -> Tensor:
    m = YCC_TO_RGB.T.astype(x.dtype)
    y = T.transpose(x, (0, 2, 3, 1)) @ m
    return T.transpose(y, (0, 3, 1, 2))


def _to_blocks(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    b = T.reshape(x, (n, c, h // 8, 8, w // 8, 8))
    return T.transpose(b, (0, 1, 2, 4, 3, 5))


def _from_blocks(b: Tensor) -> Tensor:
    n, c, bh, bw = b.shape[:4]
    return T.reshape(T.transpose(b, (0, 1, 2, 4, 3, 5)), (n, c, bh * 8, bw * 8))


def _differentiable(x: Tensor, tables: QuantTables) -> Tensor:
    n, c, h, w = x.shape
    v = x
    if c == 3:
        v = _color_forward(v)
    # Level shift: luma by -128; chroma's +128 offset cancels it, so none.
    shift = np.array([128.0, 0.0, 0.0][:c], dtype=x.dtype).reshape(1, c, 1, 1)
    v = v * 255.0 - shift
    v = T.pad_edge(v, _pad_amount(h), _pad_amount(w))
    q = _qmatrix(tables, c, x.dtype)
    coef = T.block_dct(_to_blocks(v))
    coef = T.smooth_round(coef / q) * q
    v = _from_blocks(T.block_idct(coef))
    if v.shape[2] != h or v.shape[3] != w:
        v = v[:, :, :h, :w]
    v = (v + shift) / 255.0
    if c == 3:
        v = _color_inverse(v)
    return T.clamp(v, 0.0, 1.0)


# --- bit-exact path -----------------------------------------------------------

def to_samples(images: np.ndarray) -> np.ndarray:
    """[0,1] floats -> 8-bit component samples (YCbCr for colour), int64."""
    px = np.clip(round_half_away(np.asarray(images, dtype=np.float64) * 255.0), 0, 255)
    if px.shape[1] == 3:
        ycc = np.einsum("ij,njhw->nihw", RGB_TO_YCC, px)
        ycc[:, 1:] += 128.0
        px = np.clip(round_half_away(ycc), 0, 255)
    return px.astype(np.int64)


def quantize_samples(samples: np.ndarray, tables: QuantTables) -> np.ndarray:
    """8-bit samples (N, C, H, W) -> integer coefficients (N, C, bh, bw, 8, 8)."""
    n, c, h, w = samples.shape
    v = samples.astype(np.float64) - 128.0
    v = np.pad(v, ((0, 0), (0, 0), (0, _pad_amount(h)), (0, _pad_amount(w))), mode="edge")
    hp, wp = v.shape[2:]
    blocks = v.reshape(n, c, hp // 8, 8, wp // 8, 8).transpose(0, 1, 2, 4, 3, 5)
    d = dct_matrix(8, np.float64)
    coef = d @ blocks @ d.T
    return round_half_away(coef / _qmatrix(tables, c, np.float64)).astype(np.int64)


def reconstruct(qcoef: np.ndarray, tables: QuantTables, height: int, width: int) -> np.ndarray:
    """Integer coefficients -> [0,1] float image, via 8-bit decoded samples."""
    n, c, bh, bw = qcoef.shape[:4]
    d = dct_matrix(8, np.float64)
    blocks = d.T @ (qcoef * _qmatrix(tables, c, np.float64)) @ d
    v = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, bh * 8, bw * 8)[:, :, :height, :width]
    s = np.clip(round_half_away(v + 128.0), 0, 255)
    if c == 3:
        ycc = s.copy()
        ycc[:, 1:] -= 128.0
        s = np.clip(round_half_away(np.einsum("ij,njhw->nihw", YCC_TO_RGB, ycc)), 0, 255)
    return (s / 255.0).astype(np.float32)


def _bit_exact(images: np.ndarray, tables: QuantTables) -> np.ndarray:
    n, c, h, w = images.shape
    return reconstruct(quantize_samples(to_samples(images), tables), tables, h, w)


def jpeg_forward(images, cfg: JpegConfig | None = None) -> Tensor:
    """Compress and decompress a batch of [0,1] images.

    Accepts a :class:`Tensor` or array of shape (N, C, H, W) with C in {1, 3}
    and returns a tensor of the same shape in [0, 1]. Only the differentiable
    mode records a tape.
    """
    cfg = cfg or JpegConfig()
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    _check_channels(x.shape)
    tables = quant_table(cfg.quality)
    if cfg.mode == "differentiable":
        return _differentiable(x, tables)
    return Tensor(_bit_exact(x.data, tables))
