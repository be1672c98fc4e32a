"""16-bit to 8-bit conversion by naive scaling or bounded contrast stretch.

Four methods, numbered as in the original experiment grid:

1. naive: ``x // 256``
2. global: stretch between dataset-wide percentile bounds
3. local: stretch between the image's own percentile bounds
4. mixed: methods 1, 2, 3 stacked as channels 1, 2, 3

Methods 1-3 produce a single plane replicated into three channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DegenerateBoundsError
from .imageio import as_raw16, percentiles

LOW_PERCENTILE = 0.01
HIGH_PERCENTILE = 99.99


@dataclass(frozen=True)
class GlobalBounds:
    g_min: int
    g_max: int

    def __post_init__(self):
        if self.g_min % 100 or self.g_max % 100:
            raise ValueError(f"global bounds must be multiples of 100, got {self}")
        if not 0 <= self.g_min < self.g_max <= 65535:
            raise DegenerateBoundsError(f"need 0 <= g_min < g_max <= 65535, got {self}")


@dataclass(frozen=True)
class LocalBounds:
    l_min: int
    l_max: int

    def __post_init__(self):
        if not 0 <= self.l_min < self.l_max <= 65535:
            raise DegenerateBoundsError(f"need 0 <= l_min < l_max <= 65535, got {self}")


@dataclass(frozen=True)
class ConversionMethod:
    """Method number 1-4; methods 2 and 4 carry global bounds."""

    number: int
    bounds: GlobalBounds | None = None

    def __post_init__(self):
        if self.number not in (1, 2, 3, 4):
            raise ValueError(f"conversion method must be 1-4, got {self.number}")
        if self.needs_bounds and not isinstance(self.bounds, GlobalBounds):
            raise ValueError(f"method {self.number} requires GlobalBounds")
        if not self.needs_bounds and self.bounds is not None:
            raise ValueError(f"method {self.number} takes no global bounds")

    @property
    def needs_bounds(self) -> bool:
        return self.number in (2, 4)

    @classmethod
    def naive(cls) -> "ConversionMethod":
        return cls(1)

    @classmethod
    def global_(cls, bounds: GlobalBounds) -> "ConversionMethod":
        return cls(2, bounds)

    @classmethod
    def local(cls) -> "ConversionMethod":
        return cls(3)

    @classmethod
    def mixed(cls, bounds: GlobalBounds) -> "ConversionMethod":
        return cls(4, bounds)

    @classmethod
    def from_number(cls, number: int, bounds: GlobalBounds | None = None) -> "ConversionMethod":
        """Build a method, dropping ``bounds`` for methods that ignore them."""
        return cls(number, bounds if number in (2, 4) else None)

    @property
    def key(self) -> tuple:
        b = self.bounds
        return (self.number, None if b is None else (b.g_min, b.g_max))


def round_to_hundred(value: int) -> int:
    """Nearest multiple of 100, halves away from zero."""
    value = int(value)
    sign = -1 if value < 0 else 1
    return sign * ((abs(value) + 50) // 100) * 100


def image_percentile_bounds(image) -> tuple[int, int]:
    """The image's (0.01th, 99.99th) nearest-rank percentiles, unrounded."""
    lo, hi = percentiles(image, (LOW_PERCENTILE, HIGH_PERCENTILE))
    return lo, hi


def bounds_from_percentiles(pairs: Iterable[tuple[int, int]]) -> GlobalBounds:
    """Combine per-image ``(low, high)`` percentiles into rounded global bounds."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one image to estimate global bounds")
    g_min = round_to_hundred(min(lo for lo, _ in pairs))
    g_max = round_to_hundred(max(hi for _, hi in pairs))
    if g_min >= g_max:
        raise DegenerateBoundsError(f"rounded bounds collapse: g_min={g_min}, g_max={g_max}")
    return GlobalBounds(g_min, g_max)


def compute_global_bounds(images: Iterable) -> GlobalBounds:
    """Dataset bounds from extremal per-image percentiles, rounded to hundreds.

    Each image contributes its own 0.01th and 99.99th percentile; ``g_min`` is
    the smallest low percentile and ``g_max`` the largest high percentile.
    """
    return bounds_from_percentiles(image_percentile_bounds(img) for img in images)


def compute_local_bounds(image) -> LocalBounds:
    lo, hi = image_percentile_bounds(image)
    if lo >= hi:
        raise DegenerateBoundsError(f"image has equal low/high percentiles ({lo})")
    return LocalBounds(lo, hi)


def naive_plane(image) -> np.ndarray:
    return (as_raw16(image) >> 8).astype(np.uint8)


def stretch_plane(image, lower: int, upper: int) -> np.ndarray:
    """``floor((clamp(x, lower, upper) - lower) * 255 / (upper - lower))`` as uint8."""
    if not lower < upper:
        raise DegenerateBoundsError(f"need lower < upper, got {lower}, {upper}")
    x = np.clip(np.asarray(image).astype(np.int64), lower, upper)
    return ((x - lower) * 255 // (upper - lower)).astype(np.uint8)


def _replicate(plane: np.ndarray) -> np.ndarray:
    return np.repeat(plane[np.newaxis], 3, axis=0)


def convert_naive(image) -> np.ndarray:
    return _replicate(naive_plane(image))


def convert_global(image, bounds: GlobalBounds) -> np.ndarray:
    return _replicate(stretch_plane(as_raw16(image), bounds.g_min, bounds.g_max))


def convert_local(image, bounds: LocalBounds | None = None) -> np.ndarray:
    """Stretch between the image's own percentile bounds.

    ``bounds`` may be passed when already computed for this image.
    """
    img = as_raw16(image)
    if bounds is None:
        bounds = compute_local_bounds(img)
    return _replicate(stretch_plane(img, bounds.l_min, bounds.l_max))


def convert_mixed(image, bounds: GlobalBounds) -> np.ndarray:
    img = as_raw16(image)
    local = compute_local_bounds(img)
    return np.stack(
        [
            naive_plane(img),
            stretch_plane(img, bounds.g_min, bounds.g_max),
            stretch_plane(img, local.l_min, local.l_max),
        ]
    )


def convert(image, method: ConversionMethod) -> np.ndarray:
    if method.number == 1:
        return convert_naive(image)
    if method.number == 2:
        return convert_global(image, method.bounds)
    if method.number == 3:
        return convert_local(image)
    return convert_mixed(image, method.bounds)
