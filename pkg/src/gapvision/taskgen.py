"""Procedural same/different and relational-match-to-sample datasets.

Shapes are rasterized once as binary outline masks and pasted at integer
offsets, so a "same" pair is pixel-identical up to translation.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.signal import correlate2d

from .imageio import read_netpbm, write_netpbm
from .params import ConfigError

FAMILIES = ("polygon", "blob", "open-curve")
MARGIN = 8
GAP = 2
MAX_ATTEMPTS = 1000
IOU_LIMIT = 0.8
SPLIT_STRIDE = 10**7


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    seed: int
    scale: float = 7.0
    stroke: int = 1


@dataclass
class Sample:
    image: np.ndarray
    label: int
    seed: int
    meta: dict = field(default_factory=dict)


def _outline_points(spec: ShapeSpec, rng):
    R = spec.scale
    if spec.family == "polygon":
        n = int(rng.integers(3, 8))
        # keep vertices spread out so no edge degenerates
        ang = np.sort((np.arange(n) + rng.uniform(-0.3, 0.3, n)) * 2 * np.pi / n + rng.uniform(0, 2 * np.pi))
        rad = R * rng.uniform(0.45, 1.0, n)
        pts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        return np.vstack([pts, pts[:1]])
    if spec.family == "blob":
        phi = np.linspace(0, 2 * np.pi, 49)
        prof = np.ones_like(phi)
        for k in range(2, 5):
            prof += rng.uniform(-0.3, 0.3) * np.cos(k * phi + rng.uniform(0, 2 * np.pi))
        rad = R * np.clip(prof, 0.35, None) / np.max(np.abs(prof))
        return np.stack([rad * np.cos(phi), rad * np.sin(phi)], axis=1)
    if spec.family == "open-curve":
        t = np.linspace(-1, 1, 40)
        y = np.zeros_like(t)
        for k in range(1, 4):
            y += rng.uniform(-0.6, 0.6) / k * np.sin(k * np.pi * (t + 1) / 2 + rng.uniform(0, np.pi))
        pts = np.stack([R * t, R * y], axis=1)
        a = rng.uniform(0, 2 * np.pi)
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        return pts @ rot.T
    raise ConfigError(f"unknown shape family {spec.family!r}")


def render_shape(spec: ShapeSpec):
    """Binary ``uint8`` mask cropped tight around the rasterized outline."""
    rng = np.random.default_rng(spec.seed)
    pts = _outline_points(spec, rng)
    size = int(np.ceil(2 * spec.scale)) + 2 * spec.stroke + 4
    pts = pts + size / 2.0
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).line([tuple(p) for p in pts], fill=255, width=spec.stroke)
    mask = (np.asarray(canvas) > 0).astype(np.uint8)
    ys, xs = np.nonzero(mask)
    return mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def aligned_iou(a, b):
    """Best pixel IoU of two binary masks over all integer translations."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter = correlate2d(a, b, mode="full")
    inter = np.rint(inter)
    union = a.sum() + b.sum() - inter
    return float(np.max(inter / union))


def _boxes_clear(boxes, box):
    y, x, h, w = box
    for (y2, x2, h2, w2) in boxes:
        if y < y2 + h2 + GAP and y2 < y + h + GAP and x < x2 + w2 + GAP and x2 < x + w + GAP:
            return False
    return True


def _place(rng, masks, size, regions=None):
    """Random top-left corners for ``masks`` without overlap and inside the margin.

    ``regions`` optionally restricts each mask to a ``(y0, x0, y1, x1)`` window.
    """
    for _ in range(MAX_ATTEMPTS):
        boxes = []
        for i, m in enumerate(masks):
            h, w = m.shape
            y0, x0, y1, x1 = regions[i] if regions else (MARGIN, MARGIN, size - MARGIN, size - MARGIN)
            if y1 - h < y0 or x1 - w < x0:
                raise GenerationError(f"shape of size {h}x{w} does not fit in region {regions[i] if regions else size}")
            box = (int(rng.integers(y0, y1 - h + 1)), int(rng.integers(x0, x1 - w + 1)), h, w)
            if not _boxes_clear(boxes, box):
                break
            boxes.append(box)
        else:
            return boxes
    raise GenerationError(f"could not place {len(masks)} shapes after {MAX_ATTEMPTS} attempts")


def _compose(masks, boxes, size):
    img = np.zeros((size, size, 1))
    for m, (y, x, h, w) in zip(masks, boxes):
        img[y:y + h, x:x + w, 0] = np.maximum(img[y:y + h, x:x + w, 0], m)
    return img


def _different_pair(rng, family, scale, stroke):
    a = ShapeSpec(family, int(rng.integers(2**62)), scale, stroke)
    ma = render_shape(a)
    for _ in range(MAX_ATTEMPTS):
        b = ShapeSpec(family, int(rng.integers(2**62)), scale, stroke)
        mb = render_shape(b)
        if aligned_iou(ma, mb) < IOU_LIMIT:
            return (a, ma), (b, mb)
    raise GenerationError("could not sample a sufficiently different shape pair")


def sample_seeds(seed, count, split_index=0):
    if count >= SPLIT_STRIDE:
        raise ConfigError(f"at most {SPLIT_STRIDE - 1} samples per split")
    base = (int(seed) * 8 + split_index) * SPLIT_STRIDE
    return [base + i for i in range(count)]


def make_same_different(sample_seed, label, family="polygon", image_size=64, scale=7.0, stroke=1):
    rng = np.random.default_rng(sample_seed)
    if label == 1:
        spec = ShapeSpec(family, int(rng.integers(2**62)), scale, stroke)
        m = render_shape(spec)
        masks, specs = [m, m], [spec, spec]
    else:
        (sa, ma), (sb, mb) = _different_pair(rng, family, scale, stroke)
        masks, specs = [ma, mb], [sa, sb]
    boxes = _place(rng, masks, image_size)
    meta = {"task": "same-different", "family": family, "boxes": boxes,
            "shape_seeds": [s.seed for s in specs]}
    return Sample(_compose(masks, boxes, image_size), int(label), int(sample_seed), meta)


def gen_same_different(count, family="polygon", seed=0, image_size=64, split_index=0, **kw):
    if count < 2:
        raise ConfigError("count must be >= 2")
    return [make_same_different(s, 1 - i % 2, family, image_size, **kw)
            for i, s in enumerate(sample_seeds(seed, count, split_index))]


RMTS_RELATIONS = {1: [(1, 1), (0, 0)], 0: [(1, 0), (0, 1)]}


def make_rmts(sample_seed, label, family="polygon", image_size=64, scale=5.0, stroke=1):
    rng = np.random.default_rng(sample_seed)
    top_same, bottom_same = RMTS_RELATIONS[label][int(rng.integers(2))]
    masks, seeds = [], []
    for same in (top_same, bottom_same):
        if same:
            spec = ShapeSpec(family, int(rng.integers(2**62)), scale, stroke)
            m = render_shape(spec)
            masks += [m, m]
            seeds += [spec.seed, spec.seed]
        else:
            (sa, ma), (sb, mb) = _different_pair(rng, family, scale, stroke)
            masks += [ma, mb]
            seeds += [sa.seed, sb.seed]
    mid = image_size // 2
    lo, hi = MARGIN, image_size - MARGIN
    regions = [(lo, lo, mid - 1, mid - 1), (lo, mid + 1, mid - 1, hi),
               (mid + 1, lo, hi, mid - 1), (mid + 1, mid + 1, hi, hi)]
    boxes = _place(rng, masks, image_size, regions)
    meta = {"task": "rmts", "family": family, "boxes": boxes, "shape_seeds": seeds,
            "top_same": bool(top_same), "bottom_same": bool(bottom_same)}
    return Sample(_compose(masks, boxes, image_size), int(label), int(sample_seed), meta)


def gen_rmts(count, family="polygon", seed=0, image_size=64, split_index=0, **kw):
    if count < 2:
        raise ConfigError("count must be >= 2")
    return [make_rmts(s, 1 - i % 2, family, image_size, **kw)
            for i, s in enumerate(sample_seeds(seed, count, split_index))]


def gen_ood_split(train_family, test_family, counts=(500, 500, 1000), seed=0, task="same-different",
                  image_size=64, **kw):
    """``(train, val, test)``: train/val from one family, test from another."""
    if train_family == test_family:
        raise ConfigError("OOD split needs different train and test families")
    gen = gen_same_different if task == "same-different" else gen_rmts
    n_train, n_val, n_test = counts
    train = gen(n_train, train_family, seed, image_size, split_index=0, **kw)
    val = gen(n_val, train_family, seed, image_size, split_index=1, **kw)
    test = gen(n_test, test_family, seed, image_size, split_index=2, **kw)
    return train, val, test


def gen_split(counts=(500, 500, 1000), family="polygon", seed=0, task="same-different", image_size=64, **kw):
    """In-distribution ``(train, val, test)`` with disjoint sample seeds."""
    gen = gen_same_different if task == "same-different" else gen_rmts
    return tuple(gen(n, family, seed, image_size, split_index=i, **kw) for i, n in enumerate(counts))


# ------------------------------------------------------------------ disk format

def save_split(samples, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "labels.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["filename", "label", "seed"])
        for i, s in enumerate(samples):
            name = f"{i:06d}.pgm"
            write_netpbm(directory / name, s.image)
            w.writerow([name, s.label, s.seed])


def load_split(directory):
    directory = Path(directory)
    out = []
    with open(directory / "labels.csv", newline="") as f:
        for row in csv.DictReader(f):
            img = read_netpbm(directory / row["filename"])
            out.append(Sample(img, int(row["label"]), int(row["seed"])))
    return out


def save_dataset(root, splits: dict, manifest: dict):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, samples in splits.items():
        save_split(samples, root / name)
    man = dict(manifest)
    man["splits"] = {k: len(v) for k, v in splits.items()}
    (root / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def load_dataset(root):
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    return {name: load_split(root / name) for name in manifest["splits"]}, manifest
