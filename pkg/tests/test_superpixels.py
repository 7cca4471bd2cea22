import math
from collections import deque

import numpy as np
import pytest

from neutrocaps.errors import ParameterError, ShapeError
from neutrocaps.superpixels import (
    PatchSpec,
    SuperpixelLabeling,
    crop,
    enforce_connectivity,
    rgb_to_lab,
    select_patches,
    slic,
    superpixel_centroids,
)


def lab_oracle(r, g, b):
    """Scalar sRGB -> CIELAB (D65) written out from the published formulas."""
    def lin(c):
        c /= 255.0
        return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4

    R, G, B = lin(float(r)), lin(float(g)), lin(float(b))
    X = (0.4124564 * R + 0.3575761 * G + 0.1804375 * B) / 0.95047
    Y = 0.2126729 * R + 0.7151522 * G + 0.0721750 * B
    Z = (0.0193339 * R + 0.1191920 * G + 0.9503041 * B) / 1.08883

    def f(t):
        return t ** (1 / 3) if t > (6 / 29) ** 3 else t / (3 * (6 / 29) ** 2) + 4 / 29

    return 116 * f(Y) - 16, 500 * (f(X) - f(Y)), 200 * (f(Y) - f(Z))


def components_per_label(labels):
    """BFS count of 4-connected regions for every label id."""
    h, w = labels.shape
    seen = np.zeros_like(labels, dtype=bool)
    count = {}
    for r in range(h):
        for c in range(w):
            if seen[r, c]:
                continue
            v = labels[r, c]
            count[v] = count.get(v, 0) + 1
            queue = deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and not seen[yy, xx] and labels[yy, xx] == v:
                        seen[yy, xx] = True
                        queue.append((yy, xx))
    return count


# ---------------------------------------------------------------- colour
def test_lab_white_black():
    white = rgb_to_lab(np.array([[[255, 255, 255]]], np.uint8))[0, 0]
    assert abs(white[0] - 100) < 1e-3 and abs(white[1]) < 1e-3 and abs(white[2]) < 1e-3
    black = rgb_to_lab(np.array([[[0, 0, 0]]], np.uint8))[0, 0]
    assert np.allclose(black, 0, atol=1e-9)


def test_lab_gray_and_random_vs_formula():
    gray = rgb_to_lab(np.array([[[119, 119, 119]]], np.uint8))[0, 0]
    ref = lab_oracle(119, 119, 119)
    assert abs(gray[0] - ref[0]) < 0.1 and abs(gray[1]) < 1e-3 and abs(gray[2]) < 1e-3
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, size=(50, 3))
    out = rgb_to_lab(px[None].astype(np.uint8))[0]
    for p, o in zip(px, out):
        np.testing.assert_allclose(o, lab_oracle(*p), atol=1e-9)


# ---------------------------------------------------------------- slic
def test_single_superpixel():
    img = np.random.default_rng(1).integers(0, 256, (20, 30, 3), dtype=np.uint8)
    lab = slic(img, 1)
    assert lab.count == 1 and np.all(lab.labels == 0)


def test_too_many_superpixels():
    with pytest.raises(ParameterError):
        slic(np.zeros((4, 4, 3), np.uint8), 17)


def test_uniform_image_regular_cells():
    img = np.full((60, 80, 3), 128, np.uint8)
    k = 48
    lab = slic(img, k, compactness=40)
    areas = np.bincount(lab.labels.ravel())
    mean = img.shape[0] * img.shape[1] / k
    assert areas.min() >= 0.5 * mean and areas.max() <= 2.0 * mean


@pytest.mark.parametrize("seed", range(10))
def test_partition_and_connectivity(seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (40, 50, 3), dtype=np.uint8)
    k = 30
    lab = slic(img, k)
    assert lab.labels.shape == (40, 50)
    ids = np.unique(lab.labels)
    assert ids.tolist() == list(range(len(ids)))
    assert len(ids) <= 1.5 * k
    assert all(v == 1 for v in components_per_label(lab.labels).values())
    assert lab.centroids.shape == (len(ids), 5)


def test_slic_deterministic():
    img = np.random.default_rng(4).integers(0, 256, (30, 40, 3), dtype=np.uint8)
    a, b = slic(img, 20), slic(img, 20)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.centroids, b.centroids)


# ---------------------------------------------------------------- connectivity
def test_connected_labeling_unchanged():
    labels = np.repeat(np.arange(4), 25).reshape(10, 10)
    assert np.array_equal(enforce_connectivity(labels, 4), labels)


def test_stray_pixel_absorbed():
    labels = np.zeros((10, 10), int)
    labels[:, 5:] = 1
    labels[3, 2] = 1
    out = enforce_connectivity(labels, 2)
    assert out[3, 2] == out[0, 0]
    assert len(np.unique(out)) == 2


@pytest.mark.parametrize("seed", range(5))
def test_random_labeling_one_component_per_label(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(-1, 6, (24, 24))
    out = enforce_connectivity(labels, 6)
    assert all(v == 1 for v in components_per_label(out).values())
    assert out.min() == 0 and out.max() < 9


# ---------------------------------------------------------------- patches
def _labeling(centres, shape):
    cents = np.array([[x, y, 0, 0, 0] for x, y in centres], float)
    return SuperpixelLabeling(np.zeros(shape, np.int32), cents, len(centres))


def test_empty_mask_no_patches():
    lab = _labeling([(50, 50)], (100, 100))
    assert select_patches(lab, np.zeros((100, 100)), 32) == []


def test_clamp_to_corner():
    lab = _labeling([(10, 10)], (1000, 1000))
    specs = select_patches(lab, np.ones((1000, 1000)), 224)
    assert specs[0].window == (0, 0, 224, 224)


def test_seven_centroids_enumeration():
    rng = np.random.default_rng(2)
    h, w = 300, 400
    mask = np.zeros((h, w), np.uint8)
    mask[100:200, :] = 1
    inside = [(float(rng.uniform(0, w - 1)), float(rng.uniform(100, 199.4))) for _ in range(7)]
    outside = [(float(rng.uniform(0, w - 1)), float(rng.uniform(0, 99.4))) for _ in range(5)]
    centres = inside + outside
    specs = select_patches(_labeling(centres, (h, w)), mask, 64)
    assert len(specs) == 7
    assert [s.superpixel for s in specs] == list(range(7))
    for s, (cx, cy) in zip(specs, inside):
        left, top, ww, hh = s.window
        assert (ww, hh) == (64, 64)
        assert 0 <= left <= w - 64 and 0 <= top <= h - 64
        x, y = math.floor(cx + 0.5), math.floor(cy + 0.5)
        assert left <= x < left + 64 and top <= y < top + 64


def test_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        select_patches(_labeling([(1, 1)], (10, 10)), np.ones((9, 10)), 4)


def test_patch_larger_than_image():
    with pytest.raises(ParameterError):
        select_patches(_labeling([(1, 1)], (10, 10)), np.ones((10, 10)), 11)


def test_crop_cases():
    img = np.random.default_rng(3).integers(0, 256, (12, 15, 3), dtype=np.uint8)
    assert np.array_equal(crop(img, (0, 0, 15, 12)), img)
    assert np.array_equal(crop(img, (4, 5, 1, 1)), img[5:6, 4:5])
    padded = np.zeros((20, 25, 3), np.uint8)
    padded[3:15, 6:21] = img
    assert np.array_equal(crop(padded, PatchSpec((0, 0), (6, 3, 15, 12), 0)), img)
    with pytest.raises(ParameterError):
        crop(img, (10, 0, 10, 5))


def test_centroids_of_known_labels():
    labels = np.zeros((4, 6), np.int32)
    labels[:, 3:] = 1
    c = superpixel_centroids(labels)
    np.testing.assert_allclose(c[:, :2], [[1.0, 1.5], [4.0, 1.5]])
