"""Flips and resizing applied to converted 8-bit images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageio import as_image8x3

FlipState = tuple[bool, bool]  # (horizontal, vertical)
FLIP_STATES: tuple[FlipState, ...] = ((False, False), (True, False), (False, True), (True, True))


@dataclass(frozen=True)
class AugmentConfig:
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    target_width: int = 1000
    target_height: int = 2000
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_h_prob", "flip_v_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.target_width < 1 or self.target_height < 1:
            raise ValueError("target dimensions must be >= 1")


def flip_h(image) -> np.ndarray:
    return as_image8x3(image)[:, :, ::-1].copy()


def flip_v(image) -> np.ndarray:
    return as_image8x3(image)[:, ::-1, :].copy()


def _axis_weights(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    # corner-aligned: dst index i samples src coordinate i * (src - 1) / (dst - 1),
    # kept as an exact fraction q + r / den
    den = max(dst - 1, 1)
    num = np.arange(dst, dtype=np.int64) * (src - 1)
    q, r = np.divmod(num, den)
    q1 = np.minimum(q + 1, src - 1)
    return q, q1, r, den


def resize(image, target_w: int, target_h: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    Interpolation is carried out in exact integer arithmetic and rounded half
    away from zero, so a same-size resize is the identity and constants stay
    constant.
    """
    img = as_image8x3(image)
    if target_w < 1 or target_h < 1:
        raise ValueError("target dimensions must be >= 1")
    _, h, w = img.shape
    if (w, h) == (target_w, target_h):
        return img.copy()
    x0, x1, rx, dx = _axis_weights(w, target_w)
    y0, y1, ry, dy = _axis_weights(h, target_h)
    src = img.astype(np.int64)
    # along x, scaled by dx
    cols = src[:, :, x0] * (dx - rx) + src[:, :, x1] * rx
    # along y, scaled by dy
    ry = ry[:, None]
    full = cols[:, y0, :] * (dy - ry) + cols[:, y1, :] * ry
    den = dx * dy
    return ((2 * full + den) // (2 * den)).astype(np.uint8)


def draw_flips(config: AugmentConfig, rng: np.random.Generator) -> FlipState:
    """Draw one flip decision per axis; always consumes two uniforms."""
    u = rng.random(2)
    return bool(u[0] < config.flip_h_prob), bool(u[1] < config.flip_v_prob)


def apply_flips(image, state: FlipState) -> np.ndarray:
    out = as_image8x3(image)
    if state[0]:
        out = flip_h(out)
    if state[1]:
        out = flip_v(out)
    return out


def apply_augment(image, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flips with the configured probabilities, then resize to target."""
    flipped = apply_flips(image, draw_flips(config, rng))
    return resize(flipped, config.target_width, config.target_height)


def eval_transform(image, config: AugmentConfig) -> np.ndarray:
    """Inference-time transform: resize only."""
    return resize(image, config.target_width, config.target_height)
