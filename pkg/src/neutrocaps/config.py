"""Run configuration: a flat ``key = value`` text file (or JSON) with a fixed key set.

Text format: one ``key = value`` per line, ``#`` starts a comment, blank lines are
ignored. Lists are comma separated (``superpixels = 300, 500, 700``), sizes are
``HxW`` (``unet.train_size = 192x256``) and the capsule stem is a list of
``filters:kernel:stride`` triples (``caps.stem = 16:5:2, 32:5:2``). JSON files hold
one object with the same keys, either flat (``{"caps.K": 5}``) or nested by section
(``{"caps": {"K": 5}}``). Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Callable

from .capsnet import CapsConfig, CapsTrainConfig
from .errors import ConfigError
from .synth import SynthConfig
from .unet import SegTrainConfig, UNetConfig


@dataclass(frozen=True)
class PipelineConfig:
    superpixels: tuple[int, ...] = (300, 500, 700)
    patch_superpixels: int = 500
    compactness: float = 10.0
    slic_iterations: int = 10
    patch_size: int = 224
    min_area_fraction: float = 0.001
    folds: int = 3
    seg_val_fraction: float = 0.1
    caps_val_fraction: float = 0.2
    max_train_patches: int = 900
    neg_ratio: float = 2.0
    k_values: tuple[int, ...] = ()
    jobs: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)
    caps: CapsConfig = field(default_factory=CapsConfig)
    caps_train: CapsTrainConfig = field(default_factory=CapsTrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> "RunConfig":
        self.unet.validate()
        self.caps.validate()
        self.synth.validate()
        p = self.pipeline
        if p.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not p.superpixels or min(p.superpixels) < 1 or p.patch_superpixels < 1:
            raise ConfigError("superpixel counts must be positive")
        for name in ("seg_val_fraction", "caps_val_fraction"):
            if not 0.0 <= getattr(p, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if p.max_train_patches < 2 or p.neg_ratio <= 0:
            raise ConfigError("max_train_patches must be >= 2 and neg_ratio > 0")
        if p.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if p.patch_size != self.caps.patch_size:
            raise ConfigError("pipeline.patch_size must equal caps.patch_size")
        for k in p.k_values:
            replace(self.caps, K=k).validate()
        for name in ("epochs", "batch_size"):
            if getattr(self.seg, name) < 1 or getattr(self.caps_train, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    @property
    def k_values(self) -> tuple[int, ...]:
        return self.pipeline.k_values or (self.caps.K,)


# ----------------------------------------------------------------------------
# value parsers
# ----------------------------------------------------------------------------
def _bool(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int(v: Any) -> int:
    if isinstance(v, bool):
        raise ValueError("boolean where an integer was expected")
    if isinstance(v, float) and not v.is_integer():
        raise ValueError(f"not an integer: {v!r}")
    return int(str(v).strip()) if not isinstance(v, (int, float)) else int(v)


def _float(v: Any) -> float:
    if isinstance(v, bool):
        raise ValueError("boolean where a number was expected")
    return float(v)


def _items(v: Any) -> list:
    if isinstance(v, (list, tuple)):
        return list(v)
    return [s for s in (x.strip() for x in str(v).split(",")) if s]


def _int_list(v: Any) -> tuple[int, ...]:
    return tuple(_int(x) for x in _items(v))


def _pair(conv: Callable) -> Callable:
    def parse(v: Any):
        items = _items(v)
        if len(items) != 2:
            raise ValueError(f"expected two values, got {v!r}")
        return conv(items[0]), conv(items[1])
    return parse


def _size(v: Any) -> tuple[int, int]:
    if isinstance(v, (list, tuple)):
        items = list(v)
    else:
        items = str(v).lower().replace(" ", "").split("x")
    if len(items) != 2:
        raise ValueError(f"expected HxW, got {v!r}")
    return _int(items[0]), _int(items[1])


def _stem(v: Any) -> tuple[tuple[int, int, int], ...]:
    layers = []
    for item in _items(v):
        parts = item if isinstance(item, (list, tuple)) else str(item).split(":")
        if len(parts) != 3:
            raise ValueError(f"stem layer must be filters:kernel:stride, got {item!r}")
        layers.append(tuple(_int(p) for p in parts))
    return tuple(layers)


# key -> (section attribute on RunConfig or None for top level, field name, parser)
KEYS: dict[str, tuple[str | None, str, Callable]] = {
    "seed": (None, "seed", _int),
    "superpixels": ("pipeline", "superpixels", _int_list),
    "patch_superpixels": ("pipeline", "patch_superpixels", _int),
    "compactness": ("pipeline", "compactness", _float),
    "slic_iterations": ("pipeline", "slic_iterations", _int),
    "patch_size": ("pipeline", "patch_size", _int),
    "min_area_fraction": ("pipeline", "min_area_fraction", _float),
    "folds": ("pipeline", "folds", _int),
    "jobs": ("pipeline", "jobs", _int),
    "seg.val_fraction": ("pipeline", "seg_val_fraction", _float),
    "caps.val_fraction": ("pipeline", "caps_val_fraction", _float),
    "caps.max_train_patches": ("pipeline", "max_train_patches", _int),
    "caps.neg_ratio": ("pipeline", "neg_ratio", _float),
    "caps.k_values": ("pipeline", "k_values", _int_list),
    "unet.depth": ("unet", "depth", _int),
    "unet.base_filters": ("unet", "base_filters", _int),
    "unet.kernel_size": ("unet", "kernel_size", _int),
    "unet.input_channels": ("unet", "input_channels", _int),
    "unet.train_size": ("unet", "train_size", _size),
    "unet.flip": ("unet", "flip", _bool),
    "seg.epochs": ("seg", "epochs", _int),
    "seg.batch_size": ("seg", "batch_size", _int),
    "seg.lr": ("seg", "lr", _float),
    "caps.stem": ("caps", "stem", _stem),
    "caps.capsule_types": ("caps", "capsule_types", _int),
    "caps.capsule_dim": ("caps", "capsule_dim", _int),
    "caps.primary_kernel": ("caps", "primary_kernel", _int),
    "caps.primary_stride": ("caps", "primary_stride", _int),
    "caps.secondary_dim": ("caps", "secondary_dim", _int),
    "caps.routing_iterations": ("caps", "routing_iterations", _int),
    "caps.K": ("caps", "K", _int),
    "caps.epochs": ("caps_train", "epochs", _int),
    "caps.batch_size": ("caps_train", "batch_size", _int),
    "caps.lr": ("caps_train", "lr", _float),
    "caps.flip": ("caps_train", "flip", _bool),
    "synth.height": ("synth", "height", _int),
    "synth.width": ("synth", "width", _int),
    "synth.band_thickness": ("synth", "band_thickness", _pair(_float)),
    "synth.tissue_top": ("synth", "tissue_top", _pair(_float)),
    "synth.neutrophils": ("synth", "neutrophils", _pair(_int)),
    "synth.neutrophil_radius": ("synth", "neutrophil_radius", _pair(_float)),
    "synth.nuclei": ("synth", "nuclei", _pair(_int)),
    "synth.epidermal_nuclei": ("synth", "epidermal_nuclei", _pair(_int)),
    "synth.noise": ("synth", "noise", _float),
    "synth.color_jitter": ("synth", "color_jitter", _float),
    "synth.positive_fraction": ("synth", "positive_fraction", _float),
    "synth.seed": ("synth", "seed", _int),
}


def _flatten(obj: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def from_mapping(values: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    updates: dict[str | None, dict[str, Any]] = {}
    for key, raw in values.items():
        section, name, parse = KEYS[key]
        try:
            updates.setdefault(section, {})[name] = parse(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    if "patch_size" in values:  # one key sizes both the crop and the network input
        updates.setdefault("caps", {})["patch_size"] = updates["pipeline"]["patch_size"]
    top = updates.pop(None, {})
    sections = {s: replace(getattr(cfg, s), **u) for s, u in updates.items()}
    try:
        return replace(cfg, **top, **sections).validate()
    except TypeError as exc:  # pragma: no cover - guarded by KEYS
        raise ConfigError(str(exc)) from exc


def loads(text: str) -> RunConfig:
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON config: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigError("JSON config must be an object")
        return from_mapping(_flatten(obj))
    return from_mapping(parse_text(text))


def load(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return loads(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def dumps(cfg: RunConfig) -> str:
    """Render every key in text form; ``loads(dumps(c)) == c``."""
    lines = []
    for key, (section, name, _) in KEYS.items():
        value = getattr(cfg if section is None else getattr(cfg, section), name)
        if key == "unet.train_size":
            text = f"{value[0]}x{value[1]}"
        elif key == "caps.stem":
            text = ", ".join(":".join(str(x) for x in layer) for layer in value)
        elif isinstance(value, tuple):
            text = ", ".join(str(x) for x in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
