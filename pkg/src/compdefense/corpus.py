"""Builders for the two on-disk corpora the experiments use.

* the *desk* corpus: rendered digit glyphs, 10 classes, grayscale 28x28,
  written as MNIST-layout IDX files (30000 train / 1000 test by default);
* the *photo* corpus: 224x224 crops of the natural test photographs that
  ship with scikit-image, written as PNG files, for the BPP study.
"""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .data import LabeledDataset, save_idx, save_png

FONT_DIRS = ("/usr/share/fonts/truetype/dejavu", "/usr/share/fonts/TTF", "/usr/share/fonts")
PHOTO_SOURCES = (
    "astronaut", "camera", "coffee", "chelsea", "rocket", "coins", "moon", "grass",
    "gravel", "brick", "clock", "stereo_motorcycle", "immunohistochemistry", "hubble_deep_field",
)
CROP = 224


@dataclass(frozen=True)
class DeskStyle:
    """Rendering ranges for the glyph corpus (all intensities in [0, 1])."""

    size: int = 28
    font_px: tuple = (30, 42)  # glyph size on the 2x canvas
    rotation: float = 15.0  # degrees, symmetric
    shift: float = 4.0  # canvas pixels, symmetric
    background: tuple = (0.1, 0.4)
    contrast: tuple = (0.25, 0.45)
    noise: float = 0.0


def _fonts() -> list:
    env = os.environ.get("COMPDEFENSE_FONTS")
    dirs = (env,) if env else FONT_DIRS
    for d in dirs:
        found = sorted(glob.glob(os.path.join(d, "*.ttf")))
        if found:
            return found
    return []


def render_glyph(digit: int, rng: np.random.Generator, style: DeskStyle = DeskStyle(), fonts=None) -> np.ndarray:
    """One grayscale (size, size) image of ``digit`` with random font and pose."""
    fonts = _fonts() if fonts is None else fonts
    big = 2 * style.size
    px = int(rng.integers(style.font_px[0], style.font_px[1]))
    font = ImageFont.truetype(fonts[rng.integers(len(fonts))], px) if fonts else ImageFont.load_default(px)
    im = Image.new("L", (big, big), 0)
    ImageDraw.Draw(im).text((big / 2, big / 2), str(digit), fill=255, font=font, anchor="mm")
    angle = rng.uniform(-style.rotation, style.rotation)
    shift = (rng.uniform(-style.shift, style.shift), rng.uniform(-style.shift, style.shift))
    im = im.rotate(angle, resample=Image.BILINEAR, translate=shift)
    im = im.resize((style.size, style.size), resample=Image.BILINEAR, reducing_gap=None)
    a = np.asarray(im, dtype=np.float32) / 255.0
    out = rng.uniform(*style.background) + rng.uniform(*style.contrast) * a
    if style.noise:
        out = out + style.noise * rng.standard_normal(a.shape)
    return np.clip(out, 0.0, 1.0)


def make_desk_dataset(n: int, seed: int, split: str = "train", style: DeskStyle = DeskStyle()) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    fonts = _fonts()
    labels = rng.integers(0, 10, n)
    imgs = np.stack([render_glyph(int(d), rng, style, fonts) for d in labels]) if n else np.zeros((0, style.size, style.size))
    # Quantise to bytes so in-memory and on-disk copies agree exactly.
    imgs = np.round(imgs * 255.0) / 255.0
    return LabeledDataset(imgs[:, None].astype(np.float32), labels, split, tuple(str(i) for i in range(10)))


def write_desk_corpus(out_dir, n_train: int = 30000, n_test: int = 1000, seed: int = 0, style: DeskStyle = DeskStyle()) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, n, s in (("train", n_train, seed), ("test", n_test, seed + 1)):
        ds = make_desk_dataset(n, s, split, style)
        save_idx(ds, out / f"{split}-images-idx3-ubyte", out / f"{split}-labels-idx1-ubyte")
    return out


def photo_crops() -> list:
    """Non-overlapping 224x224 crops (raster order) of the bundled photographs."""
    import skimage.data

    crops = []
    for name in PHOTO_SOURCES:
        a = getattr(skimage.data, name)()
        a = np.asarray(a[0] if isinstance(a, tuple) else a)
        if a.ndim == 3 and a.shape[2] == 4:
            a = a[..., :3]
        a = a.astype(np.float32) / 255.0
        a = a[None] if a.ndim == 2 else a.transpose(2, 0, 1)
        h, w = a.shape[1:]
        for i in range(0, h - CROP + 1, CROP):
            for j in range(0, w - CROP + 1, CROP):
                crops.append((name, a[:, i : i + CROP, j : j + CROP]))
    return crops


def write_photo_corpus(out_dir) -> Path:
    out = Path(out_dir)
    for k, (name, crop) in enumerate(photo_crops()):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        save_png(d / f"crop{k:03d}.png", crop)
    return out
