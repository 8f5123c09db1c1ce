"""Minimal deterministic PNG writer/reader and a tiny metric-curve plotter.

Only 8-bit RGB, non-interlaced images are supported; that is all the project
emits. Color mapping for rendered images is documented here once:
[-1, 1] maps linearly to [0, 255] with round-half-to-even, values clipped.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np


def to_uint8(image: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Map a float image in [lo, hi] to uint8 with clipping."""
    scaled = (np.asarray(image, dtype=np.float64) - lo) / (hi - lo) * 255.0
    return np.rint(np.clip(scaled, 0.0, 255.0)).astype(np.uint8)


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", zlib.crc32(tag + payload))


def write_png(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"write_png expects (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[i].tobytes() for i in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    blob = b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b"")
    with open(path, "wb") as fh:
        fh.write(blob)


def read_png(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != b"\x89PNG\r\n\x1a\n":
        raise ValueError(f"{path}: not a PNG file")
    pos, w, h, idat = 8, 0, 0, b""
    while pos < len(blob):
        (length,) = struct.unpack(">I", blob[pos : pos + 4])
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + length]
        if tag == b"IHDR":
            w, h, depth, ctype = struct.unpack(">IIBB", payload[:10])
            if depth != 8 or ctype != 2:
                raise ValueError(f"{path}: only 8-bit RGB PNGs supported")
        elif tag == b"IDAT":
            idat += payload
        pos += 12 + length
    raw = zlib.decompress(idat)
    stride = w * 3
    out = np.empty((h, w, 3), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for i in range(h):
        ftype = raw[i * (stride + 1)]
        line = np.frombuffer(raw[i * (stride + 1) + 1 : (i + 1) * (stride + 1)], dtype=np.uint8).copy()
        if ftype == 0:
            pass
        elif ftype == 1:  # sub
            for j in range(3, stride):
                line[j] = (line[j] + line[j - 3]) & 0xFF
        elif ftype == 2:  # up
            line = (line + prev) & 0xFF
        else:
            raise ValueError(f"{path}: unsupported PNG filter {ftype}")
        out[i] = line.reshape(w, 3)
        prev = line
    return out


def plot_curves(path, curves: dict[str, tuple[np.ndarray, np.ndarray]], width: int = 640, height: int = 360) -> None:
    """Render (x, y) polylines into a PNG; axes span the data bounding box."""
    palette = [(214, 69, 65), (65, 131, 215), (63, 178, 97), (244, 179, 80), (155, 89, 182), (52, 73, 94)]
    img = np.full((height, width, 3), 255, dtype=np.uint8)
    margin = 24
    img[margin, margin:-margin] = 0
    img[margin:-margin, margin] = 0
    img[-margin, margin:-margin] = 0
    img[margin:-margin, -margin] = 0
    xs = np.concatenate([np.asarray(x, dtype=np.float64) for x, _ in curves.values()]) if curves else np.zeros(1)
    ys = np.concatenate([np.asarray(y, dtype=np.float64) for _, y in curves.values()]) if curves else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def to_px(x, y):
        px = margin + (np.asarray(x) - x0) / (x1 - x0) * (width - 2 * margin - 1)
        py = height - margin - (np.asarray(y) - y0) / (y1 - y0) * (height - 2 * margin - 1)
        return px, py

    for ci, (_, (cx, cy)) in enumerate(sorted(curves.items())):
        color = palette[ci % len(palette)]
        px, py = to_px(cx, cy)
        for k in range(len(px) - 1):
            steps = int(max(abs(px[k + 1] - px[k]), abs(py[k + 1] - py[k]))) + 1
            ts = np.linspace(0, 1, steps + 1)
            ii = np.clip(np.rint(py[k] + (py[k + 1] - py[k]) * ts), 0, height - 1).astype(int)
            jj = np.clip(np.rint(px[k] + (px[k + 1] - px[k]) * ts), 0, width - 1).astype(int)
            img[ii, jj] = color
    write_png(path, img)
