"""Binary PGM (P5) and PBM (P4) reading and writing."""
from __future__ import annotations

import numpy as np


class PNMError(ValueError):
    pass


def _header(data: bytes, count: int):
    """Return ``count`` whitespace-separated header tokens and the payload offset."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PNMError("truncated header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PNMError("missing whitespace after header")
    return tokens, pos + 1


def parse_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise PNMError(f"not a binary PGM (magic {data[:2]!r})")
    tokens, offset = _header(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PNMError("non-numeric PGM header field") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise PNMError(f"bad PGM dimensions {width}x{height} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    size = width * height * dtype.itemsize
    raster = data[offset:offset + size]
    if len(raster) != size:
        raise PNMError(f"expected {size} raster bytes, found {len(raster)}")
    img = np.frombuffer(raster, dtype).reshape(height, width)
    return img.astype(np.uint16 if maxval > 255 else np.uint8)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def encode_pgm(img, maxval=None) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise PNMError(f"PGM needs a 2-D array, got shape {img.shape}")
    if maxval is None:
        maxval = 65535 if img.max(initial=0) > 255 else 255
    if img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise PNMError(f"values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = img.shape
    return b"P5\n%d %d\n%d\n" % (w, h, maxval) + img.astype(dtype).tobytes()


def write_pgm(path, img, maxval=None):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img, maxval))


def write_mask_pgm(path, mask):
    write_pgm(path, np.asarray(mask, np.uint8) * 255, 255)


def encode_pbm(mask) -> bytes:
    # PBM convention: 1 is black; we store foreground as 1
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise PNMError(f"PBM needs a 2-D array, got shape {mask.shape}")
    h, w = mask.shape
    rows = np.packbits(mask.astype(bool), axis=1, bitorder="big")
    return b"P4\n%d %d\n" % (w, h) + rows.tobytes()


def parse_pbm(data: bytes) -> np.ndarray:
    if data[:2] != b"P4":
        raise PNMError(f"not a binary PBM (magic {data[:2]!r})")
    tokens, offset = _header(data, 3)
    width, height = int(tokens[1]), int(tokens[2])
    stride = (width + 7) // 8
    raster = data[offset:offset + stride * height]
    if len(raster) != stride * height:
        raise PNMError("truncated PBM raster")
    rows = np.frombuffer(raster, np.uint8).reshape(height, stride)
    return np.unpackbits(rows, axis=1, bitorder="big")[:, :width]


def write_pbm(path, mask):
    with open(path, "wb") as fh:
        fh.write(encode_pbm(mask))


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P4":
        return parse_pbm(data)
    return (parse_pgm(data) > 0).astype(np.uint8)
