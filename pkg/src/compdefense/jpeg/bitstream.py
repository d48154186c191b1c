"""Baseline JFIF writer/reader with the standard Huffman tables.

The encoder is vectorised: every Huffman event (DC difference, AC
run/size pair, ZRL, EOB) becomes one row ``(code << extra_len | extra,
total_len)``, rows are sorted into scan order and expanded to bits in one
go. The decoder is a plain bit-serial loop; it exists to check the encoder.
"""

from __future__ import annotations

import struct

import numpy as np

from .codec import _check_channels, quantize_samples, reconstruct, to_samples
from .tables import (
    AC_CHROMA,
    AC_LUMA,
    DC_CHROMA,
    DC_LUMA,
    UNZIGZAG,
    ZIGZAG,
    HuffmanTable,
    QuantTables,
    quant_table,
)

MAX_DC_DIFF = 2047
MAX_AC = 1023


class BitstreamError(ValueError):
    pass


def _category(v: np.ndarray) -> np.ndarray:
    """Bit length of |v| (0 for 0)."""
    a = np.abs(v)
    out = np.zeros(a.shape, dtype=np.int64)
    nz = a > 0
    out[nz] = np.floor(np.log2(a[nz])).astype(np.int64) + 1
    return out


def _extra_bits(v: np.ndarray, size: np.ndarray) -> np.ndarray:
    # Negative values are sent as v - 1 in ``size`` bits (one's complement).
    return np.where(v >= 0, v, v + (1 << size) - 1)


def _stack(tables) -> tuple:
    return np.stack([t.codes for t in tables]), np.stack([t.lengths for t in tables])


def _events_to_bytes(vals: np.ndarray, lens: np.ndarray) -> bytes:
    total = int(lens.sum())
    if total == 0:
        return b""
    owner = np.repeat(np.arange(len(lens)), lens)
    starts = np.cumsum(lens) - lens
    j = np.arange(total) - np.repeat(starts, lens)
    bits = (vals[owner] >> (lens[owner] - 1 - j)) & 1
    pad = (-total) % 8
    bits = np.concatenate([bits, np.ones(pad, dtype=np.int64)]).astype(np.uint8)
    data = np.packbits(bits)
    ff = np.flatnonzero(data == 0xFF)
    return np.insert(data, ff + 1, 0).tobytes()


def encode_blocks(zz: np.ndarray, comp: np.ndarray) -> bytes:
    """Entropy-code integer blocks already in scan order.

    ``zz`` is (U, 64) in zig-zag order; ``comp`` gives each unit's component
    index (0 = luma tables, otherwise chroma). DC prediction runs per
    component in unit order.
    """
    zz = np.asarray(zz, dtype=np.int64)
    comp = np.asarray(comp, dtype=np.int64)
    u = len(zz)
    if zz.shape != (u, 64) or comp.shape != (u,):
        raise BitstreamError(f"expected (U, 64) blocks and (U,) components, got {zz.shape} and {comp.shape}")
    chroma = (comp > 0).astype(np.int64)

    dc = zz[:, 0]
    diff = np.empty(u, dtype=np.int64)
    for c in np.unique(comp):
        idx = np.flatnonzero(comp == c)
        diff[idx] = np.diff(dc[idx], prepend=0)
    if np.any(np.abs(diff) > MAX_DC_DIFF):
        raise BitstreamError("DC difference outside the baseline range")
    ac = zz[:, 1:]
    if np.any(np.abs(ac) > MAX_AC):
        raise BitstreamError("AC coefficient outside the baseline range")

    dcc, dcl = _stack([DC_LUMA, DC_CHROMA])
    acc, acl = _stack([AC_LUMA, AC_CHROMA])

    keys, vals, lens = [], [], []

    def add(key, code, clen, extra, elen):
        keys.append(key)
        vals.append((code << elen) | extra)
        lens.append(clen + elen)

    # DC
    s = _category(diff)
    add(np.arange(u) * 65 * 17, dcc[chroma, s], dcl[chroma, s], _extra_bits(diff, s), s)

    # AC: run lengths between consecutive nonzeros inside each unit
    uu, kk = np.nonzero(ac)
    kk = kk + 1
    prev = np.zeros_like(kk)
    if len(kk):
        same = np.r_[False, uu[1:] == uu[:-1]]
        prev[same] = kk[np.flatnonzero(same) - 1]
    run = kk - prev - 1
    v = zz[uu, kk]
    s = _category(v)
    sym = ((run % 16) << 4) | s
    ch = chroma[uu]
    add((uu * 65 + kk) * 17 + 16, acc[ch, sym], acl[ch, sym], _extra_bits(v, s), s)

    nzrl = run // 16
    if np.any(nzrl):
        rep = np.repeat(np.arange(len(kk)), nzrl)
        sub = np.arange(len(rep)) - np.repeat(np.cumsum(nzrl) - nzrl, nzrl)
        ru, rk, rc = uu[rep], kk[rep], ch[rep]
        zero = np.zeros(len(rep), dtype=np.int64)
        add((ru * 65 + rk) * 17 + sub, acc[rc, 0xF0], acl[rc, 0xF0], zero, zero)

    last = np.zeros(u, dtype=np.int64)
    if len(kk):
        np.maximum.at(last, uu, kk)
    eob = np.flatnonzero(last < 63)
    zero = np.zeros(len(eob), dtype=np.int64)
    add((eob * 65 + 64) * 17, acc[chroma[eob], 0], acl[chroma[eob], 0], zero, zero)

    keys = np.concatenate(keys)
    order = np.argsort(keys, kind="stable")
    return _events_to_bytes(np.concatenate(vals)[order], np.concatenate(lens)[order])


def _scan_order(qcoef: np.ndarray) -> tuple:
    """(C, bh, bw, 8, 8) -> zig-zag units in MCU order plus component ids."""
    c = qcoef.shape[0]
    flat = qcoef.reshape(c, -1, 64)[:, :, ZIGZAG]  # (C, B, 64)
    units = flat.transpose(1, 0, 2).reshape(-1, 64)  # interleave: block-major, component-minor
    comp = np.tile(np.arange(c), flat.shape[1])
    return units, comp


# --- file structure ---------------------------------------------------------

def _segment(marker: int, payload: bytes) -> bytes:
    return struct.pack(">HH", 0xFF00 | marker, len(payload) + 2) + payload


def _dht(cls: int, ident: int, table: HuffmanTable) -> bytes:
    return bytes([cls << 4 | ident, *table.bits, *table.vals])


def write_jfif(qcoef: np.ndarray, tables: QuantTables, height: int, width: int) -> bytes:
    """Assemble a complete baseline file from quantised coefficients (C, bh, bw, 8, 8)."""
    c = qcoef.shape[0]
    if c not in (1, 3):
        raise BitstreamError(f"1 or 3 components supported, got {c}")
    out = [b"\xff\xd8"]
    out.append(_segment(0xE0, b"JFIF\x00\x01\x01\x00\x00\x01\x00\x01\x00\x00"))
    qts = [tables.luma] + ([tables.chroma] if c == 3 else [])
    dqt = b"".join(bytes([i]) + q.reshape(-1)[ZIGZAG].astype(np.uint8).tobytes() for i, q in enumerate(qts))
    out.append(_segment(0xDB, dqt))
    sof = struct.pack(">BHHB", 8, height, width, c)
    sof += b"".join(bytes([i + 1, 0x11, min(i, 1)]) for i in range(c))
    out.append(_segment(0xC0, sof))
    dht = _dht(0, 0, DC_LUMA) + _dht(1, 0, AC_LUMA)
    if c == 3:
        dht += _dht(0, 1, DC_CHROMA) + _dht(1, 1, AC_CHROMA)
    out.append(_segment(0xC4, dht))
    sos = bytes([c]) + b"".join(bytes([i + 1, 0x11 * min(i, 1)]) for i in range(c)) + b"\x00\x3f\x00"
    out.append(_segment(0xDA, sos))
    units, comp = _scan_order(qcoef)
    out.append(encode_blocks(units, comp))
    out.append(b"\xff\xd9")
    return b"".join(out)


def encode_jpeg(image, quality: float) -> bytes:
    """Encode one [0,1] image, (C, H, W) or (1, C, H, W), to baseline JFIF bytes."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3:
        img = img[None]
    _check_channels(img.shape)
    if img.shape[0] != 1:
        raise BitstreamError("encode_jpeg takes a single image")
    tables = quant_table(quality)
    h, w = img.shape[2:]
    qcoef = quantize_samples(to_samples(img), tables)[0]
    return write_jfif(qcoef, tables, h, w)


def jpeg_bitstream_size(image, quality: float) -> int:
    """Length in bits of the full baseline file, headers included."""
    return 8 * len(encode_jpeg(image, quality))


def bpp(corpus, quality: float) -> float:
    """Mean bits per pixel of the baseline files over a corpus of images."""
    sizes = []
    for img in corpus:
        img = np.asarray(img)
        h, w = img.shape[-2:]
        sizes.append(jpeg_bitstream_size(img, quality) / (h * w))
    if not sizes:
        raise ValueError("bpp needs at least one image")
    return float(np.mean(sizes))


# --- decoder ------------------------------------------------------------------

class _Lut:
    """16-bit peek table: prefix -> (symbol, code length)."""

    def __init__(self, table: HuffmanTable):
        self.sym = np.full(1 << 16, -1, dtype=np.int64)
        self.len = np.zeros(1 << 16, dtype=np.int64)
        for s in table.vals:
            n, code = int(table.lengths[s]), int(table.codes[s])
            lo = code << (16 - n)
            self.sym[lo : lo + (1 << (16 - n))] = s
            self.len[lo : lo + (1 << (16 - n))] = n
        self.sym = self.sym.tolist()
        self.len = self.len.tolist()


def _unstuff(data: bytes) -> bytes:
    return data.replace(b"\xff\x00", b"\xff")


def decode_blocks(data: bytes, comp, n_units: int) -> np.ndarray:
    """Inverse of :func:`encode_blocks`; returns (U, 64) zig-zag integers."""
    raw = np.frombuffer(_unstuff(data), dtype=np.uint8)
    bits = "".join(map(str, np.unpackbits(raw).tolist())) + "1" * 32
    luts = {0: (_Lut(DC_LUMA), _Lut(AC_LUMA)), 1: (_Lut(DC_CHROMA), _Lut(AC_CHROMA))}
    out = np.zeros((n_units, 64), dtype=np.int64)
    pred: dict = {}
    pos = 0

    def symbol(lut):
        nonlocal pos
        peek = int(bits[pos : pos + 16], 2)
        s = lut.sym[peek]
        if s < 0:
            raise BitstreamError(f"invalid Huffman code at bit {pos}")
        pos += lut.len[peek]
        return s

    def receive(size):
        nonlocal pos
        if size == 0:
            return 0
        v = int(bits[pos : pos + size], 2)
        pos += size
        return v if v >= 1 << (size - 1) else v - (1 << size) + 1

    for u in range(n_units):
        c = int(comp[u])
        dc_lut, ac_lut = luts[min(c, 1)]
        pred[c] = pred.get(c, 0) + receive(symbol(dc_lut))
        out[u, 0] = pred[c]
        k = 1
        while k < 64:
            rs = symbol(ac_lut)
            if rs == 0x00:
                break
            if rs == 0xF0:
                k += 16
                continue
            k += rs >> 4
            if k > 63:
                raise BitstreamError("AC run past end of block")
            out[u, k] = receive(rs & 15)
            k += 1
    if pos > len(bits) - 32:
        raise BitstreamError("entropy data ended early")
    return out


def read_jfif(data: bytes) -> tuple:
    """Parse a 4:4:4 baseline file written with the standard tables.

    Returns ``(qcoef, luma_q, chroma_q, height, width)``.
    """
    if data[:2] != b"\xff\xd8":
        raise BitstreamError("missing SOI marker")
    pos, qts, frame = 2, {}, None
    while True:
        if data[pos] != 0xFF:
            raise BitstreamError(f"expected marker at byte {pos}")
        marker = data[pos + 1]
        (length,) = struct.unpack(">H", data[pos + 2 : pos + 4])
        body = data[pos + 4 : pos + 2 + length]
        pos += 2 + length
        if marker == 0xDB:
            i = 0
            while i < len(body):
                if body[i] >> 4:
                    raise BitstreamError("16-bit quantisation tables not supported")
                q = np.frombuffer(body[i + 1 : i + 65], dtype=np.uint8).astype(np.int64)
                qts[body[i] & 15] = q[UNZIGZAG].reshape(8, 8)
                i += 65
        elif marker == 0xC0:
            _, h, w, c = struct.unpack(">BHHB", body[:6])
            comps = [tuple(body[6 + 3 * i : 9 + 3 * i]) for i in range(c)]
            if any(s != 0x11 for _, s, _ in comps):
                raise BitstreamError("only unsubsampled frames are supported")
            frame = (h, w, c, [t for _, _, t in comps])
        elif marker in (0xC1, 0xC2, 0xC3):
            raise BitstreamError("only baseline sequential frames are supported")
        elif marker == 0xDA:
            break
    if frame is None:
        raise BitstreamError("no SOF0 frame header")
    end = data.rfind(b"\xff\xd9")
    h, w, c, tq = frame
    bh, bw = -(-h // 8), -(-w // 8)
    comp = np.tile(np.arange(c), bh * bw)
    units = decode_blocks(data[pos:end], comp, bh * bw * c)
    blocks = units.reshape(bh * bw, c, 64).transpose(1, 0, 2)[:, :, UNZIGZAG]
    qcoef = blocks.reshape(c, bh, bw, 8, 8)
    chroma = qts[tq[1]] if c == 3 else qts[tq[0]]
    return qcoef, qts[tq[0]], chroma, h, w


def decode_jpeg(data: bytes) -> np.ndarray:
    """Decode a file from :func:`encode_jpeg` back to a (C, H, W) [0,1] image."""
    qcoef, luma, chroma, h, w = read_jfif(data)
    tables = QuantTables(luma, chroma, float("nan"))
    return reconstruct(qcoef[None], tables, h, w)[0]
