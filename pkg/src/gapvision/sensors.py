"""Glimpse sensors: multi-scale crops and log-polar foveal sampling."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .config import SensorConfig
from .imageio import as_image
from .policy import GlimpseLocation


def crop(img, loc: GlimpseLocation, size):
    """``size x size`` window centered on ``loc``; pixels outside the image are 0."""
    h, w, c = img.shape
    top = loc.y - size // 2
    left = loc.x - size // 2
    out = np.zeros((size, size, c), dtype=img.dtype)
    y0, y1 = max(top, 0), min(top + size, h)
    x0, x1 = max(left, 0), min(left + size, w)
    if y0 < y1 and x0 < x1:
        out[y0 - top:y1 - top, x0 - left:x1 - left] = img[y0:y1, x0:x1]
    return out


@lru_cache(maxsize=64)
def area_weights(src, dst):
    """``(dst, src)`` box-filter matrix: row i averages the source span it covers."""
    W = np.zeros((dst, src))
    ratio = src / dst
    for i in range(dst):
        lo, hi = i * ratio, (i + 1) * ratio
        for j in range(int(np.floor(lo)), int(np.ceil(hi))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                W[i, j] = overlap / ratio
    W.setflags(write=False)
    return W


def area_resize(patch, size):
    src = patch.shape[0]
    if src == size:
        return patch.copy()
    Wr = area_weights(src, size)
    Wc = area_weights(patch.shape[1], size)
    rows = np.tensordot(Wr, patch, axes=(1, 0))  # (size, w, c)
    return np.tensordot(rows, Wc, axes=(1, 1)).transpose(0, 2, 1)


def multiscale_glimpse(img, loc: GlimpseLocation, cfg: SensorConfig):
    """Stack of ``(scales, size, size, c)`` patches of growing field of view."""
    img = as_image(img)
    out = np.empty((len(cfg.regions), cfg.size, cfg.size, img.shape[2]))
    for k, region in enumerate(cfg.regions):
        patch = crop(img, loc, region)
        out[k] = patch if region == cfg.size else area_resize(patch, cfg.size)
    return out


def logpolar_grid(cfg: SensorConfig):
    """Source offsets ``(dy, dx)`` for every output pixel, angle on rows, log-radius on columns."""
    h_g = w_g = cfg.size
    u = np.arange(h_g)[:, None]
    v = np.arange(w_g)[None, :]
    rho = np.exp(v * np.log(cfg.radius) / w_g)
    theta = 2.0 * np.pi * u / h_g
    return rho * np.sin(theta), rho * np.cos(theta)


def bilinear(img, ys, xs):
    """Sample ``img`` at float coordinates; neighbours outside the image count as 0."""
    h, w, c = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros(ys.shape + (c,))
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy = y0 + oy
        xx = x0 + ox
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.zeros(ys.shape + (c,))
        vals[ok] = img[yy[ok], xx[ok]]
        out += wgt[..., None] * vals
    return out


def logpolar_glimpse(img, loc: GlimpseLocation, cfg: SensorConfig):
    """``(size, size, c)`` log-polar resampling around ``loc``."""
    img = as_image(img)
    dy, dx = logpolar_grid(cfg)
    out = bilinear(img, loc.y + dy, loc.x + dx)
    return np.clip(out, 0.0, 1.0)


def glimpse(img, loc, cfg: SensorConfig):
    """Sensor dispatch returning a channels-first ``(channels, size, size)`` array.

    Multi-scale patches fold the scale axis into channels.
    """
    if cfg.kind == "multi-scale":
        g = multiscale_glimpse(img, loc, cfg)  # s, h, w, c
        s, h, w, c = g.shape
        return g.transpose(0, 3, 1, 2).reshape(s * c, h, w)
    g = logpolar_glimpse(img, loc, cfg)
    return g.transpose(2, 0, 1)


def glimpse_contents(img, trace, cfg: SensorConfig):
    return np.stack([glimpse(img, loc, cfg) for loc in trace.locations])
