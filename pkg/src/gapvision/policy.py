"""Winner-take-all glimpse selection with inhibition of return."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError
from .config import ErrorNeuronConfig, GapConfig
from .imageio import as_image
from .saliency import BoundsError, SaliencyMap, compute_saliency


@dataclass(frozen=True)
class GlimpseLocation:
    y: int  # row
    x: int  # column

    def normalized(self, h, w):
        """Map pixel coordinates to [-1, 1] as ``(x, y)``."""
        nx = 2.0 * self.x / (w - 1) - 1.0 if w > 1 else 0.0
        ny = 2.0 * self.y / (h - 1) - 1.0 if h > 1 else 0.0
        return (nx, ny)

    def as_list(self):
        return [self.y, self.x]


@dataclass
class GlimpseTrace:
    locations: list
    exhausted: bool = False
    exhausted_at: int | None = None
    image_shape: tuple = ()
    contents: list = field(default_factory=list)

    def __len__(self):
        return len(self.locations)

    def normalized_locations(self):
        h, w = self.image_shape[:2]
        return np.array([loc.normalized(h, w) for loc in self.locations], dtype=np.float64)

    def to_json(self, config=None):
        return {
            "locations": [loc.as_list() for loc in self.locations],
            "exhausted": self.exhausted,
            "exhausted_at": self.exhausted_at,
            "config": config or {},
        }


def wta(smap) -> GlimpseLocation:
    """Location of the maximum; ties go to the smallest row-major index."""
    vals = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap)
    if vals.size == 0:
        raise ValueError("empty saliency map")
    if np.isnan(vals).all():
        raise NumericError("saliency map is all NaN")
    idx = int(np.nanargmax(vals))
    y, x = divmod(idx, vals.shape[1])
    return GlimpseLocation(y, x)


def _distance_grid(shape, loc):
    yy, xx = np.indices(shape[:2])
    return np.sqrt((yy - loc.y) ** 2 + (xx - loc.x) ** 2)


def ior_mask(shape, loc: GlimpseLocation, cfg: GapConfig):
    """Multiplicative mask that is 0 at ``loc``; ``shape`` is the map shape."""
    d = _distance_grid(shape, loc)
    if cfg.mask == "hard":
        return (d > cfg.radius).astype(np.float64)
    diag = float(np.hypot(shape[0] - 1, shape[1] - 1)) or 1.0
    k = np.exp(-cfg.epsilon * d / diag)
    return k if cfg.soft_literal else 1.0 - k


def apply_ior(smap: SaliencyMap, loc: GlimpseLocation, cfg: GapConfig) -> SaliencyMap:
    h, w = smap.shape
    if not (0 <= loc.y < h and 0 <= loc.x < w):
        raise BoundsError(f"location {loc} outside map of size {h}x{w}")
    return SaliencyMap(smap.values * ior_mask(smap.shape, loc, cfg), t=smap.t + 1)


def grid_points(extent, stride):
    """Centers of the non-overlapping ``stride``-sized cells covering ``extent``."""
    n = max(extent // stride, 1)
    return np.minimum(np.arange(n) * stride + stride // 2, extent - 1)


def snap_to_grid(loc: GlimpseLocation, shape, stride) -> GlimpseLocation:
    gy = grid_points(shape[0], stride)
    gx = grid_points(shape[1], stride)
    y = int(gy[np.argmin(np.abs(gy - loc.y))])
    x = int(gx[np.argmin(np.abs(gx - loc.x))])
    return GlimpseLocation(y, x)


def vit_patch_locations(shape, stride):
    gy = grid_points(shape[0], stride)
    gx = grid_points(shape[1], stride)
    return [GlimpseLocation(int(y), int(x)) for y in gy for x in gx]


def run_gap(img, encfg: ErrorNeuronConfig | None = None, gapcfg: GapConfig | None = None,
            saliency: SaliencyMap | None = None) -> GlimpseTrace:
    """Glimpse locations for ``img``: WTA on the saliency map, then IoR, T times.

    Under a hard mask, once the map is all zero the remaining glimpses fall
    back to the WTA tie-break and the trace is flagged as exhausted.
    """
    encfg = encfg or ErrorNeuronConfig()
    gapcfg = gapcfg or GapConfig()
    img = as_image(img)
    shape = img.shape[:2]

    if gapcfg.policy == "vit-patches":
        return GlimpseTrace(vit_patch_locations(shape, gapcfg.grid_stride), image_shape=img.shape)
    if gapcfg.policy == "random":
        key = zlib.crc32(np.ascontiguousarray(img).tobytes())
        rng = np.random.default_rng([gapcfg.seed, key])
        ys = rng.integers(0, shape[0], gapcfg.T)
        xs = rng.integers(0, shape[1], gapcfg.T)
        return GlimpseTrace([GlimpseLocation(int(y), int(x)) for y, x in zip(ys, xs)],
                            image_shape=img.shape)

    smap = saliency if saliency is not None else compute_saliency(img, encfg)
    locs = []
    exhausted_at = None
    for t in range(gapcfg.T):
        if exhausted_at is None and gapcfg.mask == "hard" and not np.any(smap.values > 0):
            exhausted_at = t
        loc = wta(smap)
        if gapcfg.policy == "regular-grid":
            # snapped first, so inhibition acts around the grid point actually glimpsed
            loc = snap_to_grid(loc, shape, gapcfg.grid_stride)
        smap = apply_ior(smap, loc, gapcfg)
        locs.append(loc)
    return GlimpseTrace(locs, exhausted=exhausted_at is not None, exhausted_at=exhausted_at,
                        image_shape=img.shape)
