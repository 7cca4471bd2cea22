"""Self-describing model files.

A model file is a CDMM tensor container holding the trained parameters under their
own names plus one scalar tensor per architecture field under ``meta/<field>``.
``meta/kind`` tells the two networks apart (1 = U-Net, 2 = capsule network).
"""

from __future__ import annotations

import numpy as np

from .autodiff.serialize import dumps, load_tensors, save_tensors
from .capsnet import CapsuleNet
from .errors import FormatError
from .unet import UNet

META = "meta/"
_KINDS = {UNet.kind: UNet, CapsuleNet.kind: CapsuleNet}


def model_tensors(model: UNet | CapsuleNet) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {f"{META}kind": np.array(model.kind, dtype=np.float32)}
    for key, value in model.meta().items():
        out[META + key] = np.array(value, dtype=np.float32)
    for key, value in model.state_dict().items():
        out[key] = value
    return out


def model_bytes(model: UNet | CapsuleNet) -> bytes:
    return dumps(model_tensors(model))


def save_model(path, model: UNet | CapsuleNet) -> None:
    save_tensors(path, model_tensors(model))


def model_from_tensors(tensors: dict[str, np.ndarray], expect=None):
    meta = {k[len(META):]: float(v) for k, v in tensors.items() if k.startswith(META)}
    if "kind" not in meta:
        raise FormatError("model file lacks architecture metadata")
    cls = _KINDS.get(meta.pop("kind"))
    if cls is None:
        raise FormatError("model file has an unknown model kind")
    if expect is not None and cls is not expect:
        want = "segmentation" if expect is UNet else "patch classifier"
        raise FormatError(f"expected a {want} model")
    try:
        model = cls.from_meta(meta)
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(META)})
    except (KeyError, ValueError) as exc:
        raise FormatError(f"model parameters do not match their metadata: {exc}") from exc
    return model


def load_model(path, expect=None):
    """Load a U-Net or capsule network; ``expect`` restricts the accepted class."""
    return model_from_tensors(load_tensors(path), expect)
