"""Octave pyramids over feature maps and cross-scale cell correspondence.

Scales are numbered from 1 (finest, the source resolution) to N. Level ``n``
has spatial dims ``(h / 2**(n-1), w / 2**(n-1))``.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ArgumentError, BoundsError, DimensionError, ShapeError


def check_feature_map(fmap, name="map"):
    """Return ``fmap`` as a float64 ``(h, w, c)`` array."""
    arr = np.asarray(fmap, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be a (h, w, c) feature map, got shape {arr.shape}")
    return arr


class RegionRef(NamedTuple):
    """Half-open super-pixel rectangle ``(row_start, row_end, col_start, col_end)`` at a scale."""

    scale: int
    rect: tuple

    @property
    def n_cells(self):
        r0, r1, c0, c1 = self.rect
        return (r1 - r0) * (c1 - c0)


@dataclass(frozen=True)
class Pyramid:
    levels: tuple

    def __post_init__(self):
        levels = tuple(check_feature_map(lvl, f"level {k + 1}") for k, lvl in enumerate(self.levels))
        if not levels:
            raise ArgumentError("a pyramid needs at least one level")
        h, w, c = levels[0].shape
        for k, lvl in enumerate(levels):
            expect = (h >> k, w >> k, c)
            if (h % (1 << k)) or (w % (1 << k)) or lvl.shape != expect:
                raise ShapeError(
                    f"level {k + 1} has shape {lvl.shape}, expected {expect} "
                    f"(level-1 dims must be divisible by 2**{len(levels) - 1})"
                )
        object.__setattr__(self, "levels", levels)

    @property
    def n_scales(self):
        return len(self.levels)

    @property
    def channels(self):
        return self.levels[0].shape[2]

    def level(self, n):
        """Level by 1-based scale index."""
        if not 1 <= n <= self.n_scales:
            raise BoundsError(f"scale {n} outside [1, {self.n_scales}]")
        return self.levels[n - 1]

    def shape_at(self, n):
        return self.level(n).shape[:2]

    def map(self, fn):
        return Pyramid(tuple(fn(lvl) for lvl in self.levels))

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)


def _block_sum(fmap, size):
    # Sum each size x size block in raster order of the block offsets. Only
    # elementwise adds, so the result is bit-identical to pooled_vector.
    acc = None
    for a in range(size):
        for b in range(size):
            part = fmap[a::size, b::size]
            acc = part.copy() if acc is None else acc + part
    return acc


def block_mean(fmap, size):
    """Mean over non-overlapping ``size x size`` blocks."""
    fmap = check_feature_map(fmap)
    h, w, _ = fmap.shape
    for axis, dim in (("height", h), ("width", w)):
        if dim % size:
            raise DimensionError(f"{axis} {dim} is not divisible by block size {size}")
    return _block_sum(fmap, size) / float(size * size)


def downsample2x(fmap):
    """Halve both spatial dims by 2x2 mean pooling.

    For an exact factor-2 reduction this coincides with antialiased
    bilinear (area) resampling.
    """
    fmap = check_feature_map(fmap)
    h, w, _ = fmap.shape
    if h % 2:
        raise DimensionError(f"height {h} is odd; cannot downsample by 2")
    if w % 2:
        raise DimensionError(f"width {w} is odd; cannot downsample by 2")
    return _block_sum(fmap, 2) * 0.25


def build_pyramid(fmap, n_scales=3):
    """Build an ``n_scales``-level pyramid by repeated :func:`downsample2x`."""
    if int(n_scales) != n_scales or n_scales < 1:
        raise ArgumentError(f"n_scales must be a positive integer, got {n_scales!r}")
    fmap = check_feature_map(fmap)
    h, w, _ = fmap.shape
    factor = 1 << (n_scales - 1)
    if h % factor or w % factor:
        axis = "height" if h % factor else "width"
        raise DimensionError(
            f"{axis} {h if axis == 'height' else w} is not divisible by 2**{n_scales - 1}={factor}"
        )
    levels = [fmap]
    for _ in range(n_scales - 1):
        levels.append(downsample2x(levels[-1]))
    return Pyramid(tuple(levels))


def corresponding_region(scale_from, scale_to, i, j, base_shape=None, n_scales=None):
    """Region at ``scale_to`` covering cell ``(i, j)`` of ``scale_from``.

    ``base_shape`` (level-1 ``(h, w)``) and ``n_scales`` are optional and only
    used for bounds checking.
    """
    for s in (scale_from, scale_to):
        if s < 1 or (n_scales is not None and s > n_scales):
            raise BoundsError(f"scale {s} outside [1, {n_scales if n_scales else 'N'}]")
    if i < 0 or j < 0:
        raise BoundsError(f"cell ({i}, {j}) has a negative index")
    if base_shape is not None:
        h, w = base_shape[0] >> (scale_from - 1), base_shape[1] >> (scale_from - 1)
        if i >= h or j >= w:
            raise BoundsError(f"cell ({i}, {j}) outside {h}x{w} grid of scale {scale_from}")
    if scale_to < scale_from:
        f = 1 << (scale_from - scale_to)
        rect = (i * f, (i + 1) * f, j * f, (j + 1) * f)
    else:
        d = scale_to - scale_from
        ci, cj = i >> d, j >> d
        rect = (ci, ci + 1, cj, cj + 1)
    return RegionRef(scale_to, rect)


def pooled_vector(fmap, region):
    """Channel-wise mean of the super-pixels inside ``region``."""
    fmap = check_feature_map(fmap)
    r0, r1, c0, c1 = region.rect if isinstance(region, RegionRef) else region
    h, w, _ = fmap.shape
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise BoundsError(f"region {(r0, r1, c0, c1)} invalid for a {h}x{w} map")
    if r1 - r0 == 1 and c1 - c0 == 1:
        return fmap[r0, c0].copy()
    size = r1 - r0
    if size == c1 - c0 and size & (size - 1) == 0:
        # Square power-of-two regions reduce exactly like block_mean.
        return block_mean(fmap[r0:r1, c0:c1], size)[0, 0]
    acc = None
    for r in range(r0, r1):
        for c in range(c0, c1):
            acc = fmap[r, c].copy() if acc is None else acc + fmap[r, c]
    return acc / float((r1 - r0) * (c1 - c0))


class PyramidBuilder(BaseEstimator, TransformerMixin):
    """Stateless transformer wrapping :func:`build_pyramid`."""

    def __init__(self, n_scales=3):
        self.n_scales = n_scales

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return build_pyramid(X, self.n_scales)
