"""Error-neuron saliency.

Each location compares the patch centered on it with the patches centered on
its 8 neighbours and aggregates the L2 distances (min by default).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import ErrorNeuronConfig
from .imageio import as_image

NEIGHBOURS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0))


class BoundsError(IndexError):
    pass


@dataclass
class SaliencyMap:
    values: np.ndarray
    t: int = 0

    @property
    def shape(self):
        return self.values.shape


def _pad(img, reach_y, reach_x, border):
    mode = "constant" if border == "zero" else "edge"
    return np.pad(img, ((reach_y, reach_y), (reach_x, reach_x), (0, 0)), mode=mode)


def extract_patch(img, center, h_p=5, w_p=5, border="zero"):
    """Flattened ``h_p x w_p x c`` patch around ``center = (row, col)``, row-major."""
    img = as_image(img)
    y, x = center
    h, w = img.shape[:2]
    if not (0 <= y < h and 0 <= x < w):
        raise BoundsError(f"patch center {center} outside image of size {h}x{w}")
    ry, rx = h_p // 2, w_p // 2
    padded = _pad(img, ry, rx, border)
    return padded[y:y + h_p, x:x + w_p, :].reshape(-1)


def compute_saliency(img, cfg: ErrorNeuronConfig | None = None) -> SaliencyMap:
    cfg = cfg or ErrorNeuronConfig()
    img = as_image(img)
    h, w = img.shape[:2]
    ry, rx = cfg.patch_h // 2, cfg.patch_w // 2
    # one extra pixel of padding so neighbour patches of border pixels exist
    padded = _pad(img, ry + 1, rx + 1, cfg.border)
    center = padded[1:1 + h + 2 * ry, 1:1 + w + 2 * rx]
    dists = np.empty((len(NEIGHBOURS), h, w))
    for n, (dy, dx) in enumerate(NEIGHBOURS):
        shifted = padded[1 + dy:1 + dy + h + 2 * ry, 1 + dx:1 + dx + w + 2 * rx]
        diff = center - shifted
        sq = diff * diff
        # windows come out as (h, w, c, ph, pw); reorder to the flattened patch order
        win = sliding_window_view(sq, (cfg.patch_h, cfg.patch_w), axis=(0, 1))
        win = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h, w, -1)
        dists[n] = np.sqrt(win.sum(axis=-1))
    if cfg.aggregation == "min":
        agg = dists.min(axis=0)
    else:
        agg = dists[0].copy()
        for d in dists[1:]:
            agg += d
    return SaliencyMap(agg, t=0)
