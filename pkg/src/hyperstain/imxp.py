"""The IMXP multiplex-image container and the plain-text panel manifest.

IMXP layout (all integers little-endian):

    magic "IMXP" | u32 version=1 | u32 C | u32 H | u32 W
    u16 marker count (= C) | per marker: u16 name length + UTF-8 name
    payload: C*H*W float32, channel-major row-major

The manifest lists the vocabulary, one name per line in global index
order, followed by blank-line-separated panel sections listing member
names.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .markers import MarkerVocabulary

MAGIC = b"IMXP"
VERSION = 1


def write_imxp(path, data, names):
    """Write a [C,H,W] float raster with its ordered marker names."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError("IMXP payload must be [C,H,W]")
    c, h, w = arr.shape
    names = list(names)
    if len(names) != c:
        raise ValueError(f"{len(names)} names for {c} channels")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", VERSION, c, h, w))
        fh.write(struct.pack("<H", c))
        for name in names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(arr.tobytes())


class _Cursor:
    """Byte reader that reports its offset in parse errors."""

    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated {what} at byte {self.off}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def read_imxp(path):
    """Read an IMXP file -> (data [C,H,W] float32, marker names)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    cur = _Cursor(blob, str(path))
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    version = cur.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    c = cur.u32("channel count")
    h = cur.u32("height")
    w = cur.u32("width")
    count = cur.u16("marker count")
    if count != c:
        raise FormatError(
            f"{path}: marker count {count} != channels {c} at byte {cur.off - 2}")
    names = []
    for _ in range(c):
        ln = cur.u16("name length")
        names.append(cur.take(ln, "marker name").decode("utf-8"))
    payload = cur.take(4 * c * h * w, "pixel payload")
    if cur.off != len(blob):
        raise FormatError(
            f"{path}: {len(blob) - cur.off} trailing bytes at byte {cur.off}")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).copy()
    return data, names


def write_manifest(path, vocab, panels):
    """Write the vocabulary and its panels (lists of marker names)."""
    for panel in panels:
        for name in panel:
            if name not in vocab:
                raise ValueError(f"panel references undeclared marker {name!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(vocab.names))
        for panel in panels:
            fh.write("\n\n")
            fh.write("\n".join(panel))
        fh.write("\n")


def read_manifest(path):
    """Read a manifest -> (MarkerVocabulary, list of panel name lists)."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    blocks = [blk.strip().splitlines() for blk in text.split("\n\n") if blk.strip()]
    if not blocks:
        raise FormatError(f"{path}: empty manifest")
    vocab = MarkerVocabulary([ln.strip() for ln in blocks[0]])
    panels = []
    for blk in blocks[1:]:
        panel = [ln.strip() for ln in blk]
        for name in panel:
            if name not in vocab:
                raise FormatError(f"{path}: panel references unknown marker {name!r}")
        panels.append(panel)
    return vocab, panels
