"""Procedural sprite clips: a colored shape gliding over a plain background.

Each clip is 8 frames of 32x32 RGB with a caption drawn from the grammar
"a {red|green|blue} {square|circle|triangle} moving {left|right|up|down}
on a {black|white} background". Rendering is integer-exact and fully
determined by (seed, index), and sprites always stay inside the frame so
connected-component analysis in the metric oracle is unambiguous.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

COLORS = {"red": (255, 0, 0), "green": (0, 255, 0), "blue": (0, 0, 255)}
BACKGROUNDS = {"black": (0, 0, 0), "white": (255, 255, 255)}
SHAPES = ("square", "circle", "triangle")
DIRECTIONS = {"left": (-2, 0), "right": (2, 0), "up": (0, -2), "down": (0, 2)}
SPRITE_SIZES = (6, 7, 8)


@dataclass(frozen=True)
class SpriteSpec:
    color: str
    shape: str
    direction: str
    background: str
    size: int
    x0: int
    y0: int

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.shape} moving {self.direction} on a {self.background} background"


def _shape_mask(shape: str, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if shape == "square":
        mask[:] = True
    elif shape == "circle":
        c = (size - 1) / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        mask = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
    elif shape == "triangle":
        for row in range(size):
            half = (row * (size // 2)) // max(size - 1, 1)
            lo, hi = size // 2 - half, size // 2 + half
            mask[row, lo : hi + 1] = True
    else:
        raise ConfigError(f"unknown sprite shape {shape!r}")
    return mask


def render_clip(spec: SpriteSpec, frames: int = 8, resolution: int = 32) -> np.ndarray:
    """uint8 (frames, resolution, resolution, 3) clip for one sprite spec."""
    bg = np.array(BACKGROUNDS[spec.background], dtype=np.uint8)
    fg = np.array(COLORS[spec.color], dtype=np.uint8)
    mask = _shape_mask(spec.shape, spec.size)
    dx, dy = DIRECTIONS[spec.direction]
    out = np.empty((frames, resolution, resolution, 3), dtype=np.uint8)
    for i in range(frames):
        frame = np.tile(bg, (resolution, resolution, 1))
        x, y = spec.x0 + dx * i, spec.y0 + dy * i
        if not (0 <= x <= resolution - spec.size and 0 <= y <= resolution - spec.size):
            raise ConfigError(f"sprite leaves the frame at step {i} for {spec}")
        region = frame[y : y + spec.size, x : x + spec.size]
        region[mask] = fg
        out[i] = frame
    return out


class SpriteDataset:
    """Seeded clip generator; an epoch enumerates ``size`` distinct clips."""

    def __init__(self, seed: int = 0, size: int = 256, frames: int = 8, resolution: int = 32):
        if size < 1 or frames < 1:
            raise ConfigError(f"dataset size and frames must be >= 1, got {size}, {frames}")
        if resolution < 24:
            raise ConfigError(f"resolution must be >= 24 to fit sprites, got {resolution}")
        self.seed = seed
        self.size = size
        self.frames = frames
        self.resolution = resolution
        colors, shapes = sorted(COLORS), SHAPES
        directions, backgrounds = sorted(DIRECTIONS), sorted(BACKGROUNDS)
        self._combos = [
            (c, s, d, b) for c in colors for s in shapes for d in directions for b in backgrounds
        ]

    def __len__(self) -> int:
        return self.size

    def spec(self, index: int) -> SpriteSpec:
        if not 0 <= index < self.size:
            raise ConfigError(f"clip index {index} outside [0, {self.size})")
        slot = index % len(self._combos)
        repetition = index // len(self._combos)
        # combo-level base draws plus a per-repetition offset keep every clip
        # of an epoch distinct: repeats of a combo cycle sprite sizes and walk
        # the start-position lattice
        rng = random.Random((self.seed << 20) ^ slot)
        size_base = rng.randrange(3)
        pos_base = rng.randrange(1_000_000)
        color, shape, direction, background = self._combos[slot]
        size = SPRITE_SIZES[(size_base + repetition) % len(SPRITE_SIZES)]
        dx, dy = DIRECTIONS[direction]
        travel = 2 * (self.frames - 1)
        x_lo = 1 + (travel if dx < 0 else 0)
        x_hi = self.resolution - size - 1 - (travel if dx > 0 else 0)
        y_lo = 1 + (travel if dy < 0 else 0)
        y_hi = self.resolution - size - 1 - (travel if dy > 0 else 0)
        span_x, span_y = x_hi - x_lo + 1, y_hi - y_lo + 1
        if span_x < 1 or span_y < 1:
            raise ConfigError(f"resolution {self.resolution} too small for sprite size {size}")
        pos = (pos_base + repetition) % (span_x * span_y)
        return SpriteSpec(
            color, shape, direction, background, size,
            x0=x_lo + pos % span_x, y0=y_lo + pos // span_x,
        )

    def clip(self, index: int) -> tuple[np.ndarray, str]:
        spec = self.spec(index)
        return render_clip(spec, self.frames, self.resolution), spec.caption
