"""Binary checkpoint container shared by classifiers and the learned codec.

Layout (little-endian)::

    b"RPRS"  u16 version
    u16 tag length, tag (utf-8)
    u8 rank, rank x u32 input_spec
    u32 metadata length, metadata (utf-8 JSON)
    u32 parameter count, then per parameter:
        u16 name length, name, u8 rank, rank x u32 shape, float32 data
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict

import numpy as np

from .data import atomic_write_bytes
from .tensor import Tensor

MAGIC = b"RPRS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def pack(tag: str, input_spec, params: "OrderedDict[str, Tensor]", metadata: dict | None = None) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<H", VERSION))
    t = tag.encode()
    out.write(struct.pack("<H", len(t)) + t)
    out.write(struct.pack("<B", len(input_spec)) + struct.pack(f"<{len(input_spec)}I", *input_spec))
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    out.write(struct.pack("<I", len(meta)) + meta)
    out.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        nb = name.encode()
        arr = np.ascontiguousarray(p.data if isinstance(p, Tensor) else p, dtype="<f4")
        out.write(struct.pack("<H", len(nb)) + nb)
        out.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack(buf: bytes, expected_tag: str | None = None, source: str = "<bytes>") -> tuple:
    """Parse a container; returns ``(tag, input_spec, params, metadata)``."""
    r = _Reader(buf, source)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version} but this reader supports version {VERSION}")
    (tlen,) = r.unpack("<H")
    tag = r.take(tlen).decode()
    if expected_tag is not None and tag != expected_tag:
        raise CheckpointError(f"{source}: checkpoint holds {tag!r} but {expected_tag!r} was requested")
    (rank,) = r.unpack("<B")
    spec = tuple(r.unpack(f"<{rank}I"))
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode())
    (count,) = r.unpack("<I")
    params = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (nd,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{nd}I"))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Tensor(arr)
    if r.pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - r.pos} trailing bytes after last parameter")
    return tag, spec, params, meta


def save_model(model, path) -> None:
    atomic_write_bytes(path, pack(model.arch, model.input_spec, model.params, {"num_classes": model.num_classes}))


def load_model(path, expected_arch: str | None = None):
    from .classifier.models import ARCHS, Model

    with open(path, "rb") as f:
        tag, spec, params, meta = unpack(f.read(), expected_arch, str(path))
    if tag not in ARCHS:
        raise CheckpointError(f"{path}: tag {tag!r} is not a classifier architecture {ARCHS}")
    return Model(tag, params, meta["num_classes"], spec)


def save_codec(codec, path) -> None:
    atomic_write_bytes(path, pack(codec.TAG, codec.input_spec, codec.params, {"lambda": codec.lam}))


def load_codec(path):
    from .learned.codec import LearnedCodec

    with open(path, "rb") as f:
        _, spec, params, meta = unpack(f.read(), LearnedCodec.TAG, str(path))
    return LearnedCodec(params, float(meta["lambda"]), spec)
