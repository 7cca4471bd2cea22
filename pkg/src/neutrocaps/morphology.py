"""Binary mask clean-up: hole filling and small-component removal.

Foreground components use 8-connectivity and background components 4-connectivity,
the usual dual pairing that keeps a one-pixel diagonal wall closed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError, ShapeError

MIN_AREA_FRACTION = 0.001

_STRUCT = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass
class LabeledComponents:
    labels: np.ndarray  # 0 on background, 1..count on foreground
    count: int
    areas: np.ndarray  # areas[i] is the pixel count of label i + 1


def _binary(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D mask, got shape {arr.shape}")
    return arr.astype(bool)


def connected_components(mask, connectivity: int = 8) -> LabeledComponents:
    if connectivity not in _STRUCT:
        raise ParameterError("connectivity must be 4 or 8")
    labels, count = ndimage.label(_binary(mask), structure=_STRUCT[connectivity])
    areas = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return LabeledComponents(labels.astype(np.int32), int(count), areas)


def fill_holes(mask) -> np.ndarray:
    """Set background regions that cannot reach the image border to foreground."""
    fg = _binary(mask)
    bg = connected_components(~fg, connectivity=4)
    if bg.count == 0:
        return fg.astype(np.uint8)
    lab = bg.labels
    border = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
    outside = np.isin(lab, border[border > 0])
    return (fg | ((lab > 0) & ~outside)).astype(np.uint8)


def remove_small_components(mask, min_area_fraction: float = MIN_AREA_FRACTION) -> np.ndarray:
    """Drop 8-connected foreground components smaller than the fraction of image area."""
    if not 0.0 <= min_area_fraction <= 1.0:
        raise ParameterError("min_area_fraction must lie in [0, 1]")
    fg = _binary(mask)
    if min_area_fraction == 0.0:
        return fg.astype(np.uint8)
    comps = connected_components(fg, connectivity=8)
    min_area = min_area_fraction * fg.size
    keep = np.concatenate([[False], comps.areas >= min_area])
    return keep[comps.labels].astype(np.uint8)


def postprocess(mask, min_area_fraction: float = MIN_AREA_FRACTION) -> np.ndarray:
    return remove_small_components(fill_holes(mask), min_area_fraction)
