"""Synthetic H&E-like biopsy images with a stratum corneum band, nuclei and neutrophils.

Layout of one image, top to bottom: bare slide, a wavy stratum corneum (SC) band with
keratin lamellae, a nucleated epidermis, then dermis. Parakeratotic nuclei (light blue
ovals) sit in the SC of every image; positive images additionally carry clusters of
neutrophils (small dark blue disks) whose centres lie inside the SC.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParameterError
from .imageio import ensure_dir, read_mask, read_rgb, write_mask, write_rgb
from .autodiff.serialize import atomic_write_bytes
from .rng import XorShift64Star, derive_key

NOISE_LANES = 4096

SLIDE = (243.0, 240.0, 246.0)
SC_COLOR = (232.0, 180.0, 210.0)
EPIDERMIS = (196.0, 112.0, 168.0)
DERMIS = (238.0, 172.0, 198.0)
EPI_NUCLEUS = (122.0, 66.0, 150.0)
PARA_NUCLEUS = (150.0, 164.0, 220.0)
NEUTROPHIL = (50.0, 40.0, 126.0)


@dataclass(frozen=True)
class SynthConfig:
    height: int = 484
    width: int = 646
    band_thickness: tuple[float, float] = (0.07, 0.12)
    tissue_top: tuple[float, float] = (0.10, 0.26)
    neutrophils: tuple[int, int] = (4, 12)
    neutrophil_radius: tuple[float, float] = (3.0, 6.0)
    nuclei: tuple[int, int] = (6, 20)
    epidermal_nuclei: tuple[int, int] = (90, 150)
    noise: float = 6.0
    color_jitter: float = 0.06
    positive_fraction: float = 88 / 273
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.height < 16 or self.width < 16:
            raise ConfigError("synthetic images must be at least 16x16")
        lo, hi = self.band_thickness
        if not 0 < lo <= hi:
            raise ConfigError("band_thickness must satisfy 0 < min <= max")
        if self.tissue_top[1] + hi >= 0.95:
            raise ConfigError("SC band (tissue_top + band_thickness) would exceed the image")
        # thinnest point of the band is 0.85 * min thickness; a neutrophil needs rmax + 1 margins
        if 0.85 * lo * self.height < 2 * (self.neutrophil_radius[1] + 1) + 2:
            raise ConfigError("SC band too thin to hold a neutrophil")
        if self.neutrophils[0] < 1 or self.neutrophils[0] > self.neutrophils[1]:
            raise ConfigError("neutrophils range must satisfy 1 <= min <= max")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ConfigError("positive_fraction must lie in (0, 1)")
        return self

    @classmethod
    def from_dict(cls, values: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
        return cls(**coerced)


@dataclass
class SynthRecord:
    image: np.ndarray  # HxWx3 uint8
    sc_mask: np.ndarray  # HxW uint8 {0,1}
    neutrophils: list[tuple[int, int]]  # (x, y) pixel centres
    positive: bool
    index: int = 0

    @property
    def label(self) -> str:
        return "positive" if self.positive else "negative"

    @property
    def ident(self) -> str:
        return f"{self.index:04d}"


def _band_profile(rng: XorShift64Star, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, w = cfg.height, cfg.width
    x = np.arange(w, dtype=np.float64)
    y0 = rng.uniform1(*cfg.tissue_top) * h
    amp = rng.uniform1(0.01, 0.04) * h
    wave = rng.uniform1(0.6, 1.6) * w
    phase = rng.uniform1(0.0, 2 * math.pi)
    amp2 = rng.uniform1(0.0, 0.012) * h
    phase2 = rng.uniform1(0.0, 2 * math.pi)
    top = y0 + amp * np.sin(2 * math.pi * x / wave + phase) + amp2 * np.sin(
        2 * math.pi * x / (wave / 3.1) + phase2
    )
    t0 = rng.uniform1(*cfg.band_thickness) * h
    thick = t0 * (1.0 + 0.15 * np.sin(2 * math.pi * x / (0.7 * w) + rng.uniform1(0, 2 * math.pi)))
    bottom = top + thick
    epi = bottom + rng.uniform1(0.16, 0.26) * h + 0.02 * h * np.sin(
        2 * math.pi * x / (0.45 * w) + rng.uniform1(0, 2 * math.pi)
    )
    return top, bottom, epi


def _stamp_ellipse(canvas, color, cx, cy, ax, ay, angle, soft=0.8):
    """Alpha-blend a filled ellipse (semi-axes ax, ay) into an HxWx3 float canvas."""
    h, w = canvas.shape[:2]
    r = int(math.ceil(max(ax, ay))) + 2
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(angle), math.sin(angle)
    u = (dx * c + dy * s) / ax
    v = (-dx * s + dy * c) / ay
    dist = np.sqrt(u * u + v * v)
    scale = min(ax, ay)
    alpha = np.clip((1.0 - dist) * scale / soft + 0.5, 0.0, 1.0)[..., None]
    patch = canvas[y0:y1, x0:x1]
    patch[...] = patch * (1 - alpha) + np.asarray(color) * alpha


def _point_in_band(rng, top, bottom, margin, x_range=None):
    w = len(top)
    for _ in range(200):
        lo, hi = x_range if x_range else (0, w - 1)
        x = rng.integer(max(0, lo), min(w - 1, hi))
        t, b = top[x] + margin, bottom[x] - margin
        if b - t < 1:
            continue
        y = int(math.floor(rng.uniform1(t, b)))
        return x, y
    return None


def generate_wsi(config: SynthConfig, index: int, positive: bool | None = None) -> SynthRecord:
    """Render record ``index``; a pure function of (config, index, positive).

    When ``positive`` is None the label is drawn from the index key with
    ``config.positive_fraction``.
    """
    cfg = config.validate()
    h, w = cfg.height, cfg.width
    rng = XorShift64Star(derive_key(cfg.seed, index, 1))
    if positive is None:
        positive = XorShift64Star(derive_key(cfg.seed, index, 3)).uniform1() < cfg.positive_fraction
    top, bottom, epi = _band_profile(rng, cfg)

    yy = np.arange(h, dtype=np.float64)[:, None] + 0.5
    in_sc = (yy >= top[None, :]) & (yy < bottom[None, :])
    in_epi = (yy >= bottom[None, :]) & (yy < epi[None, :])
    in_derm = yy >= epi[None, :]
    sc_mask = in_sc.astype(np.uint8)

    jitter = 1.0 + rng.uniform(3, -cfg.color_jitter, cfg.color_jitter)
    canvas = np.empty((h, w, 3), dtype=np.float64)
    canvas[...] = SLIDE
    lamellae = 9.0 * np.sin(2 * math.pi * (yy - top[None, :]) / rng.uniform1(5.0, 8.0))
    for ch in range(3):
        layer = canvas[..., ch]
        layer[in_sc] = (SC_COLOR[ch] + lamellae)[in_sc] * jitter[ch]
        layer[in_epi] = EPIDERMIS[ch] * jitter[ch]
        layer[in_derm] = DERMIS[ch] * jitter[ch]

    area_scale = (h * w) / (484 * 646)
    n_epi = int(round(rng.integer(*cfg.epidermal_nuclei) * area_scale))
    for _ in range(n_epi):
        pt = _point_in_band(rng, bottom, epi, 3)
        if pt is None:
            break
        ax, ay = rng.uniform1(4.0, 7.0), rng.uniform1(2.5, 4.5)
        _stamp_ellipse(canvas, np.multiply(EPI_NUCLEUS, jitter), pt[0], pt[1], ax, ay,
                       rng.uniform1(0, math.pi))

    n_para = rng.integer(*cfg.nuclei)
    for _ in range(n_para):
        pt = _point_in_band(rng, top, bottom, 4)
        if pt is None:
            break
        ax, ay = rng.uniform1(5.0, 8.0), rng.uniform1(2.5, 4.0)
        # lamellar orientation: mostly horizontal
        _stamp_ellipse(canvas, np.multiply(PARA_NUCLEUS, jitter), pt[0], pt[1], ax, ay,
                       rng.uniform1(-0.4, 0.4))

    centres: list[tuple[int, int]] = []
    if positive:
        total = rng.integer(*cfg.neutrophils)
        clusters = 1 if total < 8 else 2
        rmax = cfg.neutrophil_radius[1]
        anchors = [_point_in_band(rng, top, bottom, rmax + 1) for _ in range(clusters)]
        k = 0
        attempts = 0
        while len(centres) < total and attempts < 50 * total:
            attempts += 1
            ax_, _ = anchors[k % clusters]
            k += 1
            spread = int(max(8, 0.03 * w))
            pt = _point_in_band(rng, top, bottom, rmax + 1, (ax_ - spread, ax_ + spread))
            if pt is None or not sc_mask[pt[1], pt[0]]:
                continue
            if any((pt[0] - q[0]) ** 2 + (pt[1] - q[1]) ** 2 < (2 * rmax) ** 2 for q in centres):
                continue
            centres.append(pt)
        if not centres:  # pragma: no cover - band validated thick enough above
            raise DataError("failed to place a neutrophil inside the SC band")
        for cx, cy in centres:
            r = rng.uniform1(*cfg.neutrophil_radius)
            _stamp_ellipse(canvas, np.multiply(NEUTROPHIL, jitter), cx, cy, r, r * 0.95,
                           rng.uniform1(0, math.pi), soft=0.6)

    noise_rng = XorShift64Star(derive_key(cfg.seed, index, 2), lanes=NOISE_LANES)
    canvas += cfg.noise * noise_rng.normal(h * w * 3).reshape(h, w, 3)
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return SynthRecord(image=image, sc_mask=sc_mask, neutrophils=centres,
                       positive=bool(positive), index=index)


def dataset_labels(n_images: int, positive_fraction: float, seed: int) -> list[bool]:
    """Exactly round(n * fraction) positives, order shuffled by ``seed``."""
    if not 0.0 < positive_fraction < 1.0:
        raise ParameterError("positive_fraction must lie in (0, 1)")
    n_pos = int(round(n_images * positive_fraction))
    if n_pos < 1 or n_pos >= n_images:
        raise ParameterError(f"{n_images} images at fraction {positive_fraction} leave a class empty")
    labels = np.array([True] * n_pos + [False] * (n_images - n_pos))
    perm = XorShift64Star(derive_key(seed, 0xDA7A)).permutation(n_images)
    return [bool(v) for v in labels[perm]]


def generate_dataset(config: SynthConfig, n_images: int,
                     positive_fraction: float | None = None) -> list[SynthRecord]:
    frac = config.positive_fraction if positive_fraction is None else positive_fraction
    labels = dataset_labels(n_images, frac, config.seed)
    return [generate_wsi(config, i, lab) for i, lab in enumerate(labels)]


def derive_patch_labels(neutrophils: Iterable[tuple[int, int]], windows) -> list[bool]:
    """A window (left, top, width, height) is positive iff it contains a centre.

    Bounds are inclusive: columns left .. left+width-1, rows top .. top+height-1.
    """
    pts = np.asarray(list(neutrophils), dtype=np.int64).reshape(-1, 2)
    out = []
    for left, top, width, height in windows:
        if len(pts) == 0:
            out.append(False)
            continue
        inside = (
            (pts[:, 0] >= left) & (pts[:, 0] <= left + width - 1)
            & (pts[:, 1] >= top) & (pts[:, 1] <= top + height - 1)
        )
        out.append(bool(inside.any()))
    return out


# ----------------------------------------------------------------------------
# on-disk datasets
# ----------------------------------------------------------------------------
MANIFEST = "manifest.json"


def write_dataset(out_dir, records: Sequence[SynthRecord], config: SynthConfig,
                  folds: Sequence[int] | None = None) -> dict:
    ensure_dir(os.path.join(out_dir, "images"))
    ensure_dir(os.path.join(out_dir, "masks"))
    entries = []
    for pos, rec in enumerate(records):
        img_rel = f"images/{rec.ident}.png"
        mask_rel = f"masks/{rec.ident}.png"
        write_rgb(os.path.join(out_dir, img_rel), rec.image)
        write_mask(os.path.join(out_dir, mask_rel), rec.sc_mask)
        entry = {
            "id": rec.ident,
            "image": img_rel,
            "mask": mask_rel,
            "label": rec.label,
            "neutrophils": [list(map(int, c)) for c in rec.neutrophils],
        }
        if folds is not None:
            entry["fold"] = int(folds[pos])
        entries.append(entry)
    cfg = asdict(config)
    manifest = {"format": "neutrocaps-wsi", "version": 1, "config": cfg, "images": entries}
    payload = json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8") + b"\n"
    atomic_write_bytes(os.path.join(out_dir, MANIFEST), payload)
    return manifest


def read_manifest(data_dir) -> dict:
    path = os.path.join(data_dir, MANIFEST)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no {MANIFEST} in {data_dir}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed {path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise DataError(f"malformed {path}: top level must be an object")
    return manifest


def load_dataset(data_dir) -> list[SynthRecord]:
    manifest = read_manifest(data_dir)
    if "images" not in manifest:
        raise DataError(f"{data_dir} is not a whole-slide dataset (no 'images' list)")
    records = []
    for pos, entry in enumerate(manifest["images"]):
        try:
            image = read_rgb(os.path.join(data_dir, entry["image"]))
            mask = read_mask(os.path.join(data_dir, entry["mask"]))
            centres = [tuple(int(v) for v in c) for c in entry.get("neutrophils", [])]
            positive = entry["label"] == "positive"
            index = int(entry.get("id", pos))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad manifest entry {pos}: {exc}") from exc
        if image.shape[:2] != mask.shape:
            raise DataError(f"image/mask size mismatch for entry {entry.get('id', pos)}")
        records.append(SynthRecord(image, mask, centres, positive, index))
    if not records:
        raise DataError(f"{data_dir} holds no images")
    return records
