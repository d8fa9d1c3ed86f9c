"""Minimal deterministic PNG codec (8-bit grayscale and RGB).

Writes RFC 2083-compatible files: signature, IHDR, one IDAT holding the
zlib-compressed filtered scanlines, IEND.  Filtering supports the five
standard per-row filters plus the usual adaptive minimum-sum-of-absolute-
differences heuristic.  Filter choice and DEFLATE level are pinned by the
caller so encoded byte counts are reproducible run to run.

The decoder handles exactly what the encoder emits, which is all the
complexity metric needs for its re-encode invariance check.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

_SIGNATURE = b"\x89PNG\r\n\x1a\n"

FILTER_NAMES = {"none": 0, "sub": 1, "up": 2, "average": 3, "paeth": 4}
ADAPTIVE = "adaptive"


class PngError(ValueError):
    pass


def _chunk(tag: bytes, data: bytes) -> bytes:
    crc = zlib.crc32(data, zlib.crc32(tag))
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", crc)


def _paeth(left, up, upleft):
    # Standard Paeth predictor, vectorized over a row.
    p = left.astype(np.int32) + up.astype(np.int32) - upleft.astype(np.int32)
    pa = np.abs(p - left)
    pb = np.abs(p - up)
    pc = np.abs(p - upleft)
    out = np.where((pa <= pb) & (pa <= pc), left, np.where(pb <= pc, up, upleft))
    return out.astype(np.uint8)


def _filter_row(row, prior, bpp, ftype):
    row16 = row.astype(np.int16)
    left = np.zeros_like(row)
    left[bpp:] = row[:-bpp]
    if ftype == 0:
        return row
    if ftype == 1:
        return ((row16 - left) % 256).astype(np.uint8)
    if ftype == 2:
        return ((row16 - prior) % 256).astype(np.uint8)
    if ftype == 3:
        avg = (left.astype(np.int32) + prior.astype(np.int32)) // 2
        return ((row16 - avg) % 256).astype(np.uint8)
    upleft = np.zeros_like(prior)
    upleft[bpp:] = prior[:-bpp]
    return ((row16 - _paeth(left, prior, upleft)) % 256).astype(np.uint8)


def _unfilter_row(filtered, prior, bpp, ftype):
    if ftype == 0:
        return filtered.copy()
    out = filtered.astype(np.int32)
    if ftype == 2:
        return ((out + prior) % 256).astype(np.uint8)
    # Filters with a left term need a sequential pass.
    result = np.zeros_like(filtered)
    for i in range(filtered.shape[0]):
        left = int(result[i - bpp]) if i >= bpp else 0
        up = int(prior[i])
        if ftype == 1:
            pred = left
        elif ftype == 3:
            pred = (left + up) // 2
        elif ftype == 4:
            upleft = int(prior[i - bpp]) if i >= bpp else 0
            p = left + up - upleft
            pa, pb, pc = abs(p - left), abs(p - up), abs(p - upleft)
            if pa <= pb and pa <= pc:
                pred = left
            elif pb <= pc:
                pred = up
            else:
                pred = upleft
        else:
            raise PngError(f"bad filter byte {ftype}")
        result[i] = (int(filtered[i]) + pred) % 256
    return result


def encode_png(pixels: np.ndarray, filter_mode: str = ADAPTIVE, level: int = 9) -> bytes:
    """Encode an (H, W) or (H, W, 3) uint8 array."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise PngError(f"pixels must be uint8, got {pixels.dtype}")
    if pixels.ndim == 2:
        channels = 1
        color_type = 0
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        channels = 3
        color_type = 2
    else:
        raise PngError(f"unsupported pixel shape {pixels.shape}")
    height, width = pixels.shape[:2]
    rows = pixels.reshape(height, width * channels)

    if filter_mode != ADAPTIVE and filter_mode not in FILTER_NAMES:
        raise PngError(f"unknown filter mode {filter_mode!r}")

    out = bytearray()
    prior = np.zeros(width * channels, dtype=np.uint8)
    for y in range(height):
        row = rows[y]
        if filter_mode == ADAPTIVE:
            best = None
            best_cost = None
            for ftype in range(5):
                cand = _filter_row(row, prior, channels, ftype)
                as_signed = cand.astype(np.int16)
                cost = int(np.minimum(as_signed, 256 - as_signed).sum())
                if best_cost is None or cost < best_cost:
                    best, best_cost, best_type = cand, cost, ftype
            out.append(best_type)
            out.extend(best.tobytes())
        else:
            ftype = FILTER_NAMES[filter_mode]
            out.append(ftype)
            out.extend(_filter_row(row, prior, channels, ftype).tobytes())
        prior = row

    ihdr = struct.pack(">IIBBBBB", width, height, 8, color_type, 0, 0, 0)
    return (
        _SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(bytes(out), level))
        + _chunk(b"IEND", b"")
    )


def decode_png(data: bytes) -> np.ndarray:
    """Decode a file produced by :func:`encode_png`."""
    if data[:8] != _SIGNATURE:
        raise PngError("not a PNG stream")
    pos = 8
    width = height = color_type = None
    idat = bytearray()
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        tag = data[pos + 4 : pos + 8]
        body = data[pos + 8 : pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            width, height, depth, color_type, comp, filt, interlace = struct.unpack(
                ">IIBBBBB", body
            )
            if depth != 8 or color_type not in (0, 2) or interlace != 0:
                raise PngError("decoder supports 8-bit gray/RGB non-interlaced only")
        elif tag == b"IDAT":
            idat.extend(body)
        elif tag == b"IEND":
            break
    if width is None:
        raise PngError("missing IHDR")
    channels = 3 if color_type == 2 else 1
    raw = zlib.decompress(bytes(idat))
    stride = width * channels
    if len(raw) != height * (stride + 1):
        raise PngError("scanline payload has wrong size")
    rows = np.zeros((height, stride), dtype=np.uint8)
    prior = np.zeros(stride, dtype=np.uint8)
    for y in range(height):
        offset = y * (stride + 1)
        ftype = raw[offset]
        filtered = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=offset + 1)
        rows[y] = _unfilter_row(filtered, prior, channels, ftype)
        prior = rows[y]
    if channels == 1:
        return rows.reshape(height, width)
    return rows.reshape(height, width, 3)
