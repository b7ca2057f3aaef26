import json

import numpy as np
import pytest
from scipy import ndimage

from gapvision.params import ConfigError
from gapvision.taskgen import (FAMILIES, IOU_LIMIT, MARGIN, GenerationError, ShapeSpec, _place,
                               aligned_iou, gen_ood_split, gen_rmts, gen_same_different, gen_split,
                               load_dataset, load_split, make_rmts, render_shape, save_dataset,
                               save_split)


def components(img):
    """Binary masks of the shapes in a sample, one per bounding box in reading order."""
    lab, n = ndimage.label(img[:, :, 0] > 0, structure=np.ones((3, 3)))
    return [(lab[sl] == i + 1).astype(np.uint8) for i, sl in enumerate(ndimage.find_objects(lab))]


def iou_loop(a, b):
    """Aligned IoU by explicit translation search."""
    best = 0.0
    ha, wa = a.shape
    hb, wb = b.shape
    for dy in range(-hb + 1, ha):
        for dx in range(-wb + 1, wa):
            inter = 0
            for y in range(hb):
                for x in range(wb):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < ha and 0 <= xx < wa and a[yy, xx] and b[y, x]:
                        inter += 1
            best = max(best, inter / (a.sum() + b.sum() - inter))
    return best


def test_determinism_and_balance():
    a = gen_same_different(4, seed=3)
    b = gen_same_different(4, seed=3)
    assert [s.label for s in a] == [1, 0, 1, 0]
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and x.seed == y.seed


@pytest.mark.parametrize("count", [2, 7, 20])
@pytest.mark.parametrize("gen", [gen_same_different, gen_rmts])
def test_balance_within_one(gen, count):
    labels = [s.label for s in gen(count, seed=1)]
    assert abs(labels.count(1) - labels.count(0)) <= 1


def test_count_precondition():
    with pytest.raises(ConfigError):
        gen_same_different(1)
    with pytest.raises(ConfigError):
        gen_rmts(0)


@pytest.mark.parametrize("family", FAMILIES)
def test_positive_pairs_identical_after_translation(family):
    for s in gen_same_different(20, family, seed=0):
        if s.label != 1:
            continue
        comps = components(s.image)
        # outlines may split into several pieces; group them by the recorded boxes
        masks = [s.image[y:y + h, x:x + w, 0] for y, x, h, w in s.meta["boxes"]]
        assert np.array_equal(masks[0], masks[1])
        assert sum(c.sum() for c in comps) == 2 * masks[0].sum()


def test_positive_pair_components_match():
    # connected components found independently of the generator's bookkeeping
    checked = 0
    for s in gen_same_different(30, "blob", seed=4):
        comps = components(s.image)
        if s.label == 1 and len(comps) == 2:
            assert np.array_equal(comps[0], comps[1])
            checked += 1
    assert checked >= 10


@pytest.mark.parametrize("family", FAMILIES)
def test_negative_pairs_differ(family):
    for s in gen_same_different(20, family, seed=2):
        if s.label != 0:
            continue
        a, b = [s.image[y:y + h, x:x + w, 0] for y, x, h, w in s.meta["boxes"]]
        assert aligned_iou(a, b) < IOU_LIMIT


def test_aligned_iou_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = (rng.random((6, 7)) > 0.5).astype(np.uint8)
        b = (rng.random((5, 6)) > 0.5).astype(np.uint8)
        assert aligned_iou(a, b) == pytest.approx(iou_loop(a, b), abs=1e-12)
    m = render_shape(ShapeSpec("polygon", 9))
    assert aligned_iou(m, m) == 1.0


@pytest.mark.parametrize("family", FAMILIES)
def test_shapes_respect_margin(family):
    for s in gen_same_different(10, family, seed=5) + gen_rmts(6, family, seed=5):
        ys, xs = np.nonzero(s.image[:, :, 0])
        assert ys.min() >= MARGIN and xs.min() >= MARGIN
        assert ys.max() < 64 - MARGIN and xs.max() < 64 - MARGIN


def test_shapes_do_not_overlap():
    for s in gen_same_different(10, seed=6):
        mask = np.zeros((64, 64), int)
        for y, x, h, w in s.meta["boxes"]:
            mask[y:y + h, x:x + w] += 1
        assert mask.max() == 1


def test_images_are_binary_128():
    s = gen_same_different(2, seed=0, image_size=128)[0]
    assert s.image.shape == (128, 128, 1)
    assert set(np.unique(s.image)) <= {0.0, 1.0}


def test_rmts_label_rule():
    for seed in range(20):
        for label in (0, 1):
            s = make_rmts(seed, label)
            assert s.label == int(s.meta["top_same"] == s.meta["bottom_same"])
            boxes = s.meta["boxes"]
            masks = [s.image[y:y + h, x:x + w, 0] for y, x, h, w in boxes]
            assert np.array_equal(masks[0], masks[1]) == s.meta["top_same"]
            assert np.array_equal(masks[2], masks[3]) == s.meta["bottom_same"]
            # two rows: both top shapes above both bottom shapes
            assert max(b[0] + b[2] for b in boxes[:2]) <= min(b[0] for b in boxes[2:])


def test_rmts_covers_all_relation_combinations():
    seen = {(s.meta["top_same"], s.meta["bottom_same"]) for s in gen_rmts(40, seed=0)}
    assert seen == {(True, True), (False, False), (True, False), (False, True)}


def test_ood_split_families_and_seeds():
    train, val, test = gen_ood_split("polygon", "blob", counts=(10, 6, 8), seed=0)
    assert {s.meta["family"] for s in train + val} == {"polygon"}
    assert {s.meta["family"] for s in test} == {"blob"}
    seeds = [{s.seed for s in part} for part in (train, val, test)]
    assert not (seeds[0] & seeds[1]) and not (seeds[0] & seeds[2]) and not (seeds[1] & seeds[2])
    shape_seeds = [{x for s in part for x in s.meta["shape_seeds"]} for part in (train, val, test)]
    assert not (shape_seeds[0] & shape_seeds[2]) and not (shape_seeds[1] & shape_seeds[2])


def test_ood_swap_families():
    a = gen_ood_split("polygon", "blob", counts=(2, 2, 2))
    b = gen_ood_split("blob", "polygon", counts=(2, 2, 2))
    assert a[2][0].meta["family"] == "blob" and b[2][0].meta["family"] == "polygon"


def test_ood_identical_families_rejected():
    with pytest.raises(ConfigError):
        gen_ood_split("blob", "blob")


def test_split_seeds_disjoint():
    train, val, test = gen_split((5, 5, 5), seed=1)
    assert len({s.seed for s in train + val + test}) == 15


def test_placement_failure():
    big = np.ones((40, 40), np.uint8)
    with pytest.raises(GenerationError):
        _place(np.random.default_rng(0), [big, big], 64)


def test_unknown_family():
    with pytest.raises(ConfigError):
        render_shape(ShapeSpec("star", 0))


def test_split_round_trip(tmp_path):
    samples = gen_same_different(4, seed=0)
    save_split(samples, tmp_path / "train")
    back = load_split(tmp_path / "train")
    header = (tmp_path / "train" / "labels.csv").read_text().splitlines()[0]
    assert header == "filename,label,seed"
    assert (tmp_path / "train" / "000000.pgm").read_bytes()[:2] == b"P5"
    for a, b in zip(samples, back):
        assert np.array_equal(a.image, b.image) and a.label == b.label and a.seed == b.seed


def test_dataset_manifest(tmp_path):
    train, val, test = gen_split((2, 2, 2), seed=0)
    save_dataset(tmp_path, {"train": train, "val": val, "test": test}, {"family": "polygon", "seed": 0})
    splits, manifest = load_dataset(tmp_path)
    assert manifest["splits"] == {"train": 2, "val": 2, "test": 2}
    assert json.loads((tmp_path / "manifest.json").read_text())["family"] == "polygon"
    assert len(splits["test"]) == 2
