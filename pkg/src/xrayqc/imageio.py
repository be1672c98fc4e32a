"""Raster I/O for 16-bit radiographs and 8-bit converted images.

Images are plain numpy arrays:

* a 16-bit radiograph is a ``(height, width)`` array of ``uint16``;
* a converted image is a ``(3, height, width)`` array of ``uint8``
  (three planes, channel 1 first).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from fractions import Fraction
from math import ceil
from pathlib import Path

import numpy as np

from .errors import ImageFormatError, SizeMismatchError, UnsupportedDepthError

PGM_MAXVAL = 65535
PPM_MAXVAL = 255
_WHITESPACE = b" \t\n\r\v\f"


def as_raw16(image) -> np.ndarray:
    """Validate and return ``image`` as a 2-D ``uint16`` array."""
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint16:
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"expected integer pixels, got {arr.dtype}")
        if arr.min() < 0 or arr.max() > PGM_MAXVAL:
            raise ValueError("pixel values must lie in [0, 65535]")
        arr = arr.astype(np.uint16)
    return arr


def as_image8x3(image) -> np.ndarray:
    """Validate and return ``image`` as a ``(3, H, W)`` ``uint8`` array."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ValueError(f"expected shape (3, H, W), got {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() > 255:
            raise ValueError("channel values must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


# ---------------------------------------------------------------------------
# PNM parsing
# ---------------------------------------------------------------------------


def _read_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Parse a binary PNM header.

    Returns ``(width, height, maxval, payload_offset)``.  Comments (``#`` to
    end of line) are accepted between tokens; exactly one whitespace byte
    separates maxval from the payload.
    """
    if len(data) < 2 or data[:2] != magic:
        raise ImageFormatError(f"bad magic number, expected {magic.decode()}", 0)
    pos = 2
    tokens = []
    while len(tokens) < 3:
        # whitespace and comments before the next token
        start = pos
        while pos < len(data):
            c = data[pos : pos + 1]
            if c in _WHITESPACE and c:
                pos += 1
            elif c == b"#":
                while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break
        if pos == start:
            raise ImageFormatError("expected whitespace in header", pos)
        if pos >= len(data):
            raise ImageFormatError("header ended early", pos)
        tok_start = pos
        while pos < len(data) and data[pos : pos + 1] not in _WHITESPACE and data[pos : pos + 1] != b"#":
            pos += 1
        tok = data[tok_start:pos]
        if not tok.isdigit():
            raise ImageFormatError(f"expected a decimal integer, got {tok[:16]!r}", tok_start)
        tokens.append((int(tok), tok_start))
    if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
        raise ImageFormatError("expected one whitespace byte after maxval", pos)
    pos += 1
    (width, w_off), (height, h_off), (maxval, _) = tokens
    if width < 1:
        raise ImageFormatError("width must be at least 1", w_off)
    if height < 1:
        raise ImageFormatError("height must be at least 1", h_off)
    return width, height, maxval, pos


def decode_pgm16(data: bytes) -> np.ndarray:
    width, height, maxval, offset = _read_header(data, b"P5")
    if maxval != PGM_MAXVAL:
        raise UnsupportedDepthError(f"maxval {maxval} not supported, need {PGM_MAXVAL}")
    payload = data[offset:]
    expected = width * height * 2
    if len(payload) != expected:
        raise SizeMismatchError(
            f"payload has {len(payload)} bytes, header {width}x{height} needs {expected}", offset
        )
    return np.frombuffer(payload, dtype=">u2").reshape(height, width).astype(np.uint16)


def encode_pgm16(image) -> bytes:
    img = as_raw16(image)
    h, w = img.shape
    header = f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii")
    return header + img.astype(">u2").tobytes()


def load_pgm16(path: str | os.PathLike) -> np.ndarray:
    """Read a 16-bit binary PGM (``P5``, maxval 65535, big-endian samples)."""
    return decode_pgm16(Path(path).read_bytes())


def save_pgm16(image, path: str | os.PathLike) -> None:
    """Write ``image`` as a canonical ``P5`` file: ``P5\\n<w> <h>\\n65535\\n`` + payload."""
    Path(path).write_bytes(encode_pgm16(image))


def encode_ppm8(image) -> bytes:
    img = as_image8x3(image)
    _, h, w = img.shape
    header = f"P6\n{w} {h}\n{PPM_MAXVAL}\n".encode("ascii")
    # R, G, B = channels 1, 2, 3
    return header + np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes()


def decode_ppm8(data: bytes) -> np.ndarray:
    width, height, maxval, offset = _read_header(data, b"P6")
    if maxval != PPM_MAXVAL:
        raise UnsupportedDepthError(f"maxval {maxval} not supported, need {PPM_MAXVAL}")
    payload = data[offset:]
    expected = width * height * 3
    if len(payload) != expected:
        raise SizeMismatchError(
            f"payload has {len(payload)} bytes, header {width}x{height} needs {expected}", offset
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).transpose(2, 0, 1).copy()


def save_ppm8(image, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_ppm8(image))


def load_ppm8(path: str | os.PathLike) -> np.ndarray:
    return decode_ppm8(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageStats:
    min: int
    max: int
    mean: float
    std: float
    histogram: np.ndarray = field(repr=False)

    def csv_header(self) -> list[str]:
        return ["min", "max", "mean", "std"] + [f"bin_{k}" for k in range(len(self.histogram))]

    def csv_row(self) -> list[str]:
        return [str(self.min), str(self.max), repr(self.mean), repr(self.std)] + [
            str(int(c)) for c in self.histogram
        ]


def image_stats(image, bins: int = 256) -> ImageStats:
    """Min/max, mean, population std and a uniform histogram over [0, 65535].

    ``bins`` must divide 65536; bin ``k`` counts values in
    ``[k * 65536 // bins, (k + 1) * 65536 // bins)``.
    """
    img = as_raw16(image)
    if bins < 1 or 65536 % bins:
        raise ValueError("bins must be a divisor of 65536")
    flat = img.ravel()
    values = flat.astype(np.float64)
    mean = float(values.mean())
    std = float(np.sqrt(np.mean((values - mean) ** 2)))
    width = 65536 // bins
    hist = np.bincount(flat // width if width > 1 else flat, minlength=bins).astype(np.int64)
    lo, hi = int(flat.min()), int(flat.max())
    # float mean can drift past the exact extremes by an ulp on constant images
    mean = float(min(max(mean, lo), hi))
    return ImageStats(lo, hi, mean, std, hist)


def write_stats_csv(rows: list[tuple[str | None, ImageStats]], path: str | os.PathLike) -> None:
    """Write stats rows; a leading ``sample_id`` column is added when rows are named."""
    named = any(name is not None for name, _ in rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = rows[0][1].csv_header()
        writer.writerow((["sample_id"] if named else []) + header)
        for name, st in rows:
            writer.writerow(([name] if named else []) + st.csv_row())


def _rank_fraction(p: float) -> Fraction:
    # decimal reading of p, so 0.01 means exactly 1/100
    return Fraction(str(p)) / 100


def percentile_rank(p: float, n: int) -> int:
    """1-indexed nearest rank ``ceil(p / 100 * n)``, computed exactly."""
    if not 0 < p <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    return max(1, ceil(_rank_fraction(p) * n))


def percentile(image, p: float) -> int:
    """Nearest-rank percentile: the sorted element at rank ``ceil(p/100 * N)``."""
    img = as_raw16(image)
    flat = img.ravel()
    k = percentile_rank(p, flat.size) - 1
    return int(np.partition(flat, k)[k])


def percentiles(image, ps) -> list[int]:
    """Several nearest-rank percentiles with one partition pass."""
    flat = as_raw16(image).ravel()
    ks = [percentile_rank(p, flat.size) - 1 for p in ps]
    part = np.partition(flat, sorted(set(ks)))
    return [int(part[k]) for k in ks]
