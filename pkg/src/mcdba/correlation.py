"""All-pairs feature correlation, its pooled pyramid and the local lookup.

A volume is stored as ``[y, x, y', x']`` (source row, source column, target
row, target column). Lookup coordinates are ``(x, y)`` pixel positions in the
target image, matching the flow convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ChannelMismatch, TooSmall, ValidationError

N_LEVELS = 4
MIN_TARGET_SIZE = 8


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    values: np.ndarray  # (H, W, D)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValidationError("feature grid must be H x W x D with positive sizes")
        if not np.all(np.isfinite(v)):
            raise ValidationError("feature grid contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class CorrVolume:
    values: np.ndarray  # (H, W, H', W')
    level: int = 0


def _as_values(f) -> np.ndarray:
    return f.values if isinstance(f, FeatureGrid) else FeatureGrid(f).values


def build_correlation(fi, fj) -> CorrVolume:
    """Raw dot products between every source and every target feature."""
    a, b = _as_values(fi), _as_values(fj)
    if a.shape[2] != b.shape[2]:
        raise ChannelMismatch(f"channel counts differ: {a.shape[2]} vs {b.shape[2]}")
    return CorrVolume(np.einsum("ijd,kld->ijkl", a, b), 0)


def _pool2(v: np.ndarray) -> np.ndarray:
    h, w = v.shape[2] // 2, v.shape[3] // 2
    v = v[:, :, : 2 * h, : 2 * w]
    return v.reshape(v.shape[0], v.shape[1], h, 2, w, 2).mean(axis=(3, 5))


def build_pyramid(c0: CorrVolume, n_levels: int = N_LEVELS) -> list[CorrVolume]:
    """Average-pool the target axes by 2 for each successive level."""
    if min(c0.values.shape[2:]) < MIN_TARGET_SIZE:
        raise TooSmall(f"target dimensions {c0.values.shape[2:]} below {MIN_TARGET_SIZE}")
    levels = [c0]
    for k in range(1, n_levels):
        levels.append(CorrVolume(_pool2(levels[-1].values), k))
    return levels


def sample_offsets(grid_side: int) -> np.ndarray:
    """Integer-spaced offsets centred on zero; half-integer when the side is even."""
    return np.arange(grid_side, dtype=np.float64) - (grid_side - 1) / 2.0


def bilinear_volume(vol: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample each source pixel's target map at ``(x, y)``, shape (H, W, K).

    Corners falling outside the target image contribute zero.
    """
    H, W, h, w = vol.shape
    flat = vol.reshape(H, W, h * w)
    x0 = np.floor(x)
    y0 = np.floor(y)
    out = np.zeros(x.shape)
    for dx in (0, 1):
        for dy in (0, 1):
            xc, yc = x0 + dx, y0 + dy
            wt = (1.0 - np.abs(x - xc)) * (1.0 - np.abs(y - yc))
            inside = (xc >= 0) & (xc <= w - 1) & (yc >= 0) & (yc <= h - 1)
            idx = np.where(inside, yc * w + xc, 0).astype(np.int64)
            vals = np.take_along_axis(flat, idx.reshape(H, W, -1), axis=2).reshape(x.shape)
            out += np.where(inside, wt * vals, 0.0)
    return out


def lookup(pyramid: list[CorrVolume], coords: np.ndarray, r: int, grid_side: int | None = None) -> np.ndarray:
    """Local correlation features around ``coords`` from every pyramid level.

    ``coords`` is (H, W, 2) in ``(x, y)`` level-0 target pixels. The sample grid
    has side ``r + 1`` unless overridden; the output has ``len(pyramid) * side**2``
    channels, level-major then row-major over the grid.
    """
    if r < 0:
        raise ValidationError("radius must be non-negative")
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValidationError("lookup coordinates must be finite")
    side = r + 1 if grid_side is None else int(grid_side)
    off = sample_offsets(side)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    feats = []
    for vol in pyramid:
        scale = 2.0**vol.level
        x = coords[..., 0, None] / scale + ox.reshape(-1)
        y = coords[..., 1, None] / scale + oy.reshape(-1)
        feats.append(bilinear_volume(vol.values, x, y))
    return np.concatenate(feats, axis=-1)
