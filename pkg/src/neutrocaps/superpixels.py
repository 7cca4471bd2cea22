"""SLIC superpixels and centroid-anchored square patch windows."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components as _graph_components

from .errors import ParameterError, ShapeError

PATCH_SIZE = 224
SUPERPIXEL_PRESETS = (300, 500, 700)

# sRGB (D65) -> XYZ
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """8-bit sRGB (..., 3) -> CIELAB (..., 3) under D65."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB2XYZ.T / _WHITE
    delta = 6.0 / 29.0
    f = np.where(xyz > delta**3, np.cbrt(xyz), xyz / (3 * delta**2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


@dataclass
class SuperpixelLabeling:
    labels: np.ndarray  # HxW int32, ids 0..count-1
    centroids: np.ndarray  # count x 5: x, y, L, a, b
    k: int  # requested number of superpixels

    @property
    def count(self) -> int:
        return len(self.centroids)


@dataclass(frozen=True)
class PatchSpec:
    center: tuple[int, int]  # (x, y)
    window: tuple[int, int, int, int]  # (left, top, width, height)
    superpixel: int

    @property
    def left(self) -> int:
        return self.window[0]

    @property
    def top(self) -> int:
        return self.window[1]


def _grid_seeds(h: int, w: int, k: int) -> tuple[np.ndarray, float]:
    step = math.sqrt(h * w / k)
    ny = max(1, int(round(h / step)))
    nx = max(1, int(round(w / step)))
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gy.ravel(), gx.ravel()], axis=1), step


def _perturb_seeds(lab: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Move each seed to the lowest-gradient pixel of its 3x3 neighbourhood."""
    h, w = lab.shape[:2]
    pad = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    grad = ((pad[2:, 1:-1] - pad[:-2, 1:-1]) ** 2).sum(-1) + ((pad[1:-1, 2:] - pad[1:-1, :-2]) ** 2).sum(-1)
    out = seeds.copy()
    for n, (y, x) in enumerate(seeds.astype(int)):
        y0, y1 = max(0, y - 1), min(h, y + 2)
        x0, x1 = max(0, x - 1), min(w, x + 2)
        block = grad[y0:y1, x0:x1]
        dy, dx = np.unravel_index(np.argmin(block), block.shape)
        out[n] = (y0 + dy, x0 + dx)
    return out


def slic(image: np.ndarray, n_superpixels: int, compactness: float = 10.0,
         iterations: int = 10) -> SuperpixelLabeling:
    """k-means in (L, a, b, x, y) with a 2S x 2S search window per cluster.

    Distance is sqrt(d_lab^2 + (d_xy / S)^2 * compactness^2) with grid step
    S = sqrt(HW / k); the result goes through :func:`enforce_connectivity`.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"slic expects an HxWx3 image, got {image.shape}")
    h, w = image.shape[:2]
    if n_superpixels < 1 or n_superpixels > h * w:
        raise ParameterError(f"n_superpixels={n_superpixels} must lie in [1, {h * w}]")
    if iterations < 1:
        raise ParameterError("iterations must be >= 1")
    lab = rgb_to_lab(image)
    seeds, step = _grid_seeds(h, w, n_superpixels)
    seeds = _perturb_seeds(lab, seeds)
    iy, ix = seeds[:, 0].astype(int), seeds[:, 1].astype(int)
    centers = np.column_stack([seeds, lab[iy, ix]])  # y, x, L, a, b
    weight = (compactness / step) ** 2
    radius = int(math.ceil(step))
    flat_lab = lab.reshape(-1, 3)
    yy = np.repeat(np.arange(h), w).astype(np.float64)
    xx = np.tile(np.arange(w), h).astype(np.float64)

    labels = np.full((h, w), -1, dtype=np.int64)
    for _ in range(iterations):
        dist = np.full((h, w), np.inf)
        labels.fill(-1)
        for c, (cy, cx, cl, ca, cb) in enumerate(centers):
            y0, y1 = max(0, int(cy) - radius), min(h, int(cy) + radius + 1)
            x0, x1 = max(0, int(cx) - radius), min(w, int(cx) + radius + 1)
            if y0 >= y1 or x0 >= x1:
                continue
            win = lab[y0:y1, x0:x1]
            dc = (win[..., 0] - cl) ** 2 + (win[..., 1] - ca) ** 2 + (win[..., 2] - cb) ** 2
            gy = (np.arange(y0, y1) - cy) ** 2
            gx = (np.arange(x0, x1) - cx) ** 2
            d = dc + weight * (gy[:, None] + gx[None, :])
            cur = dist[y0:y1, x0:x1]
            better = d < cur
            cur[better] = d[better]
            labels[y0:y1, x0:x1][better] = c
        flat = labels.ravel()
        valid = flat >= 0
        counts = np.bincount(flat[valid], minlength=len(centers)).astype(np.float64)
        has = counts > 0
        for col, values in enumerate((yy, xx, flat_lab[:, 0], flat_lab[:, 1], flat_lab[:, 2])):
            sums = np.bincount(flat[valid], weights=values[valid], minlength=len(centers))
            centers[has, col] = sums[has] / counts[has]

    final = enforce_connectivity(labels, n_superpixels)
    return SuperpixelLabeling(final, superpixel_centroids(final, lab), n_superpixels)


def superpixel_centroids(labels: np.ndarray, lab: np.ndarray | None = None) -> np.ndarray:
    """Per-label mean (x, y, L, a, b); colour columns are zero when ``lab`` is None."""
    h, w = labels.shape
    flat = labels.ravel()
    count = int(flat.max()) + 1 if flat.size else 0
    n = np.bincount(flat, minlength=count).astype(np.float64)
    out = np.zeros((count, 5))
    ys, xs = np.divmod(np.arange(h * w), w)
    out[:, 0] = np.bincount(flat, weights=xs, minlength=count) / np.maximum(n, 1)
    out[:, 1] = np.bincount(flat, weights=ys, minlength=count) / np.maximum(n, 1)
    if lab is not None:
        flat_lab = lab.reshape(-1, 3)
        for ch in range(3):
            out[:, 2 + ch] = np.bincount(flat, weights=flat_lab[:, ch], minlength=count) / np.maximum(n, 1)
    return out


def _component_graph(labels: np.ndarray):
    """4-connected same-label components and their shared-boundary counts."""
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    right = labels[:, 1:] == labels[:, :-1]
    down = labels[1:, :] == labels[:-1, :]
    rows = np.concatenate([idx[:, :-1][right], idx[:-1, :][down]])
    cols = np.concatenate([idx[:, 1:][right], idx[1:, :][down]])
    graph = sparse.coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(h * w, h * w))
    ncomp, comp = _graph_components(graph, directed=False)
    comp = comp.reshape(h, w)
    a = np.concatenate([comp[:, 1:][~right], comp[1:, :][~down]])
    b = np.concatenate([comp[:, :-1][~right], comp[:-1, :][~down]])
    return ncomp, comp, np.concatenate([a, b]), np.concatenate([b, a])


def enforce_connectivity(labels: np.ndarray, n_superpixels: int | None = None) -> np.ndarray:
    """Make every label one 4-connected region.

    Fragments smaller than (HW / k) / 4, and every pixel labelled -1, merge into the
    neighbour sharing the longest boundary (lowest id on ties). Remaining
    disconnected pieces get ids of their own. Output ids are 0..count-1 in raster
    order of first appearance.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError("labels must be 2-D")
    h, w = labels.shape
    if n_superpixels is None:
        n_superpixels = max(1, len(np.unique(labels[labels >= 0])))
    min_size = (h * w / n_superpixels) / 4.0
    ncomp, comp, src, dst = _component_graph(labels)
    sizes = np.bincount(comp.ravel(), minlength=ncomp)
    orphan = np.zeros(ncomp, dtype=bool)
    orphan[np.unique(comp[labels < 0])] = True

    parent = np.arange(ncomp)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for _ in range(ncomp):
        roots = np.array([find(i) for i in range(ncomp)])
        set_size = np.bincount(roots, weights=sizes, minlength=ncomp)
        set_orphan = np.zeros(ncomp, dtype=bool)
        # a set stays an orphan only while every member is one
        set_orphan[roots] = True
        set_orphan[roots[~orphan]] = False
        rs, rd = roots[src], roots[dst]
        cross = rs != rd
        if not cross.any():
            break
        key = rs[cross] * ncomp + rd[cross]
        pairs, counts = np.unique(key, return_counts=True)
        pa, pb = np.divmod(pairs, ncomp)
        changed = False
        # pairs are sorted by (source, neighbour); pick the longest boundary, lowest id on ties
        order = np.lexsort((pb, -counts, pa))
        first = np.ones(len(order), dtype=bool)
        first[1:] = pa[order][1:] != pa[order][:-1]
        for s, t in zip(pa[order][first], pb[order][first]):
            if set_size[s] < min_size or set_orphan[s]:
                rs_, rt_ = find(int(s)), find(int(t))
                if rs_ != rt_:
                    parent[rs_] = rt_
                    changed = True
        if not changed:
            break

    # cap the count at 1.5k: fold the smallest region into its longest-boundary neighbour
    cap = max(1, int(1.5 * n_superpixels))
    while True:
        roots = np.array([find(i) for i in range(ncomp)])
        live = np.unique(roots)
        if len(live) <= cap:
            break
        set_size = np.bincount(roots, weights=sizes, minlength=ncomp)
        s = live[np.argmin(set_size[live])]
        rs, rd = roots[src], roots[dst]
        hit = (rs == s) & (rd != s)
        if not hit.any():
            break
        nb, counts = np.unique(rd[hit], return_counts=True)
        parent[s] = nb[np.argmax(counts)]

    roots = np.array([find(i) for i in range(ncomp)])
    region = roots[comp].ravel()
    _, first_pos = np.unique(region, return_index=True)
    ranked = np.argsort(first_pos, kind="stable")
    remap = np.empty(ncomp, dtype=np.int64)
    remap[np.unique(region)[ranked]] = np.arange(len(ranked))
    return remap[region].reshape(h, w).astype(np.int32)


def select_patches(labeling: SuperpixelLabeling, sc_mask: np.ndarray,
                   patch_size: int = PATCH_SIZE) -> list[PatchSpec]:
    """One window per superpixel whose rounded centroid pixel lies in the SC mask.

    Windows are centred on the centroid and translated, not padded, to stay in bounds.
    """
    return centroid_windows(labeling.centroids, labeling.labels.shape, sc_mask, patch_size)


def centroid_windows(centroids: np.ndarray, shape: tuple[int, int], sc_mask: np.ndarray,
                     patch_size: int = PATCH_SIZE) -> list[PatchSpec]:
    """``select_patches`` given only the (x, y, ...) centroid rows and the image shape."""
    mask = np.asarray(sc_mask)
    h, w = int(shape[0]), int(shape[1])
    if mask.shape != (h, w):
        raise ShapeError(f"mask {mask.shape} and labels {(h, w)} differ")
    if patch_size < 1 or patch_size > h or patch_size > w:
        raise ParameterError(f"patch size {patch_size} does not fit a {h}x{w} image")
    half = patch_size // 2
    out = []
    for sp, (cx, cy) in enumerate(np.asarray(centroids)[:, :2]):
        x = int(np.clip(np.floor(cx + 0.5), 0, w - 1))
        y = int(np.clip(np.floor(cy + 0.5), 0, h - 1))
        if not mask[y, x]:
            continue
        left = min(max(x - half, 0), w - patch_size)
        top = min(max(y - half, 0), h - patch_size)
        out.append(PatchSpec((x, y), (left, top, patch_size, patch_size), sp))
    return out


def crop(image: np.ndarray, spec: PatchSpec | tuple[int, int, int, int]) -> np.ndarray:
    left, top, width, height = spec.window if isinstance(spec, PatchSpec) else spec
    h, w = image.shape[:2]
    if left < 0 or top < 0 or width < 1 or height < 1 or left + width > w or top + height > h:
        raise ParameterError(f"window {(left, top, width, height)} outside {w}x{h} image")
    return image[top : top + height, left : left + width].copy()
