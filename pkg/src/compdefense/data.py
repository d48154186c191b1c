"""Labelled image datasets and their on-disk formats (IDX, PNG class folders)."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
PNG_SUFFIXES = (".png",)


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "test"
    classes: tuple = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.split not in ("train", "test"):
            raise DatasetError(f"split must be train or test, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        if self.classes:
            return len(self.classes)
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def input_spec(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, n: int) -> "LabeledDataset":
        return LabeledDataset(self.images[:n], self.labels[:n], self.split, self.classes)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file into a uint8 array."""
    path = Path(path)
    try:
        with _open(path) as f:
            raw = f.read()
    except OSError as e:
        raise DatasetError(f"{path}: cannot read ({e})") from e
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != 0x08:
        raise DatasetError(f"{path}: bad magic 0x{int.from_bytes(raw[:4], 'big'):08X}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DatasetError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - head < count:
        raise DatasetError(f"{path}: truncated data, expected {count} bytes after header, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise DatasetError("IDX writer supports uint8 arrays only")
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    atomic_write_bytes(path, header + arr.tobytes())


def load_idx(images_path, labels_path, split: str = "test") -> LabeledDataset:
    imgs = read_idx(images_path)
    labs = read_idx(labels_path)
    magic_i = 0x800 | imgs.ndim
    if magic_i != IDX_IMAGES_MAGIC:
        raise DatasetError(f"{images_path}: expected image magic 0x{IDX_IMAGES_MAGIC:08X}, got 0x{magic_i:08X}")
    if labs.ndim != 1:
        raise DatasetError(f"{labels_path}: expected label magic 0x{IDX_LABELS_MAGIC:08X}, got 0x{0x800 | labs.ndim:08X}")
    if len(imgs) != len(labs):
        raise DatasetError(f"{images_path} has {len(imgs)} images but {labels_path} has {len(labs)} labels")
    return LabeledDataset(imgs[:, None].astype(np.float32) / 255.0, labs.astype(np.int64), split)


def save_idx(dataset: LabeledDataset, images_path, labels_path) -> None:
    if dataset.images.shape[1] != 1:
        raise DatasetError("IDX stores single-channel images only")
    px = np.clip(np.round(dataset.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    write_idx(images_path, px)
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if "A" in im.mode or im.mode in ("P", "CMYK") else "L")
            a = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, SyntaxError, ValueError) as e:
        raise DatasetError(f"{path}: unreadable image ({e})") from e
    return a[None] if a.ndim == 2 else a.transpose(2, 0, 1)


def load_png_dirs(root, split: str = "test") -> LabeledDataset:
    """Each subfolder of ``root`` is a class; ids follow sorted folder names."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"{root}: no class folders")
    images, labels = [], []
    for cid, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() in PNG_SUFFIXES:
                images.append(_read_png(f))
                labels.append(cid)
    if not images:
        raise DatasetError(f"{root}: no PNG files found")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"{root}: images differ in shape {sorted(shapes)}")
    return LabeledDataset(np.stack(images), np.array(labels), split, tuple(classes))


def load_png_corpus(root) -> list:
    """All PNGs below ``root`` (any depth, sorted), as a list of (C, H, W) arrays."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in PNG_SUFFIXES)
    if not files:
        raise DatasetError(f"{root}: no PNG files found")
    return [_read_png(f) for f in files]


def save_png(path, image: np.ndarray) -> None:
    px = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    im = Image.fromarray(px[0] if px.shape[0] == 1 else px.transpose(1, 2, 0))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    im.save(tmp, format="PNG")
    os.replace(tmp, path)


def load_dataset(fmt: str, path, split: str = "test", labels_path=None) -> LabeledDataset:
    if fmt == "idx":
        path = Path(path)
        if labels_path is None:
            # <dir>/<split>-images-idx3-ubyte next to <split>-labels-idx1-ubyte
            return load_idx(path / f"{split}-images-idx3-ubyte", path / f"{split}-labels-idx1-ubyte", split)
        return load_idx(path, labels_path, split)
    if fmt == "png_dirs":
        return load_png_dirs(Path(path) / split if (Path(path) / split).is_dir() else path, split)
    raise DatasetError(f"unknown dataset format {fmt!r}; expected idx or png_dirs")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
