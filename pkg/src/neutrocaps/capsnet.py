"""Convolutional capsule network scoring 224x224 patches for neutrophils.

conv stem -> primary capsules (16 types x 8 dims, 5x5 stride 2) -> per-location
routing by agreement into one secondary capsule -> capsule length as a probability
map -> mean of the K largest cells as the patch probability.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Adam, Module, Tensor, he_uniform, no_grad
from .autodiff import functional as F
from .errors import ConfigError, DataError, ShapeError
from .metrics import roc_and_auc

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CapsConfig:
    stem: tuple[tuple[int, int, int], ...] = ((16, 5, 2), (32, 5, 2))
    capsule_types: int = 16
    capsule_dim: int = 8
    primary_kernel: int = 5
    primary_stride: int = 2
    secondary_dim: int = 16
    secondary_capsules: int = 1
    routing_iterations: int = 3
    K: int = 5
    input_channels: int = 3
    patch_size: int = 224

    def validate(self) -> "CapsConfig":
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.routing_iterations < 1:
            raise ConfigError("routing_iterations must be >= 1")
        if min(self.capsule_dim, self.secondary_dim, self.capsule_types, self.secondary_capsules) < 1:
            raise ConfigError("capsule sizes must be positive")
        for filters, kernel, stride in self.stem:
            if filters < 1 or kernel < 1 or stride < 1:
                raise ConfigError(f"bad stem layer {(filters, kernel, stride)}")
        side = self.map_size(self.patch_size)
        if side < 1:
            raise ConfigError(f"patch size {self.patch_size} too small for this network")
        if self.K > side * side:
            raise ConfigError(f"K={self.K} exceeds the {side}x{side} probability map")
        return self

    def map_size(self, size: int) -> int:
        for _, kernel, stride in self.stem:
            size = F.conv_output_size(size, kernel, stride, 0)
        return F.conv_output_size(size, self.primary_kernel, self.primary_stride, 0)


def squash(s, axis: int = -1) -> Tensor:
    return F.squash(s, axis=axis)


def dynamic_routing(u_hat: Tensor, iterations: int) -> tuple[Tensor, list[np.ndarray]]:
    """Routing by agreement over predictions ``u_hat`` of shape [..., I, J, D].

    Returns the output capsules [..., J, D] and the coupling coefficients used in
    each iteration.
    """
    if iterations < 1:
        raise ConfigError("routing needs at least one iteration")
    b = F.zeros(u_hat.shape[:-1])
    couplings = []
    v = None
    for it in range(iterations):
        c = F.softmax(b, axis=-1)
        couplings.append(c.data)
        s = F.einsum("...ij,...ijd->...jd", c, u_hat)
        v = F.squash(s, axis=-1)
        if it + 1 < iterations:
            b = F.add(b, F.einsum("...ijd,...jd->...ij", u_hat, v))
    return v, couplings


def route(u, weights, iterations: int = 3) -> np.ndarray:
    """Route the primary capsules of one grid cell.

    ``u``: [I, d_in]; ``weights``: [I, d_in, D] for a single output capsule or
    [I, J, d_in, D]. Returns [D] or [J, D].
    """
    u = np.asarray(u)
    w = np.asarray(weights)
    single = w.ndim == 3
    if single:
        w = w[:, None]
    u_hat = np.einsum("ik,ijkd->ijd", u, w)
    v, _ = dynamic_routing(Tensor(u_hat), iterations)
    return v.data[0] if single else v.data


class CapsuleNet(Module):
    kind = 2.0

    def __init__(self, config: CapsConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = (config or CapsConfig()).validate()
        c = self.config
        rng = np.random.default_rng(seed)
        cin = c.input_channels
        for n, (filters, kernel, _) in enumerate(c.stem):
            fan_in = cin * kernel * kernel
            self.add_param(f"stem{n}.weight", he_uniform(rng, (filters, cin, kernel, kernel), fan_in))
            self.add_param(f"stem{n}.bias", np.zeros(filters))
            cin = filters
        k = c.primary_kernel
        out = c.capsule_types * c.capsule_dim
        self.add_param("primary.weight", he_uniform(rng, (out, cin, k, k), cin * k * k))
        self.add_param("primary.bias", np.zeros(out))
        limit = math.sqrt(6.0 / (c.capsule_dim + c.secondary_dim))
        shape = (c.capsule_types, c.secondary_capsules, c.capsule_dim, c.secondary_dim)
        self.add_param("routing.weight", rng.uniform(-limit, limit, size=shape) / c.capsule_types)

    @property
    def K(self) -> int:
        return self.config.K

    def primary_capsules(self, x: Tensor) -> Tensor:
        """Stem features -> squashed capsules [N, H, W, types, dim]."""
        c = self.config
        h = x
        for n, (_, _, stride) in enumerate(c.stem):
            h = F.relu(F.conv2d(h, self.params[f"stem{n}.weight"], self.params[f"stem{n}.bias"],
                                stride=stride))
        kernel = c.primary_kernel
        if h.shape[2] < kernel or h.shape[3] < kernel:
            raise ShapeError(f"feature map {h.shape[2:]} smaller than primary kernel {kernel}")
        u = F.conv2d(h, self.params["primary.weight"], self.params["primary.bias"],
                     stride=c.primary_stride)
        n, _, gh, gw = u.shape
        u = F.reshape(F.transpose(u, (0, 2, 3, 1)), (n, gh, gw, c.capsule_types, c.capsule_dim))
        return F.squash(u, axis=-1)

    def secondary_capsules(self, u: Tensor) -> tuple[Tensor, list[np.ndarray]]:
        """Per-location routing; returns [N, H, W, J, D] and couplings."""
        u_hat = F.einsum("nhwik,ijkd->nhwijd", u, self.params["routing.weight"])
        return dynamic_routing(u_hat, self.config.routing_iterations)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """[N, 3, H, W] in [0, 1] -> (probability map [N, H', W'], patch probability [N])."""
        c = self.config
        if x.ndim != 4 or x.shape[1] != c.input_channels:
            raise ShapeError(f"expected [N,{c.input_channels},H,W] input, got {x.shape}")
        v, _ = self.secondary_capsules(self.primary_capsules(x))
        n, gh, gw = v.shape[:3]
        first = F.getitem(v, (slice(None), slice(None), slice(None), 0)) if c.secondary_capsules > 1 \
            else F.reshape(v, (n, gh, gw, c.secondary_dim))
        prob = F.vector_norm(first, axis=-1)
        pooled = F.topk_average(F.reshape(prob, (n, gh * gw)), c.K)
        return prob, pooled

    def meta(self) -> dict[str, float]:
        c = self.config
        out = {
            "stem_layers": len(c.stem),
            "capsule_types": c.capsule_types,
            "capsule_dim": c.capsule_dim,
            "primary_kernel": c.primary_kernel,
            "primary_stride": c.primary_stride,
            "secondary_dim": c.secondary_dim,
            "secondary_capsules": c.secondary_capsules,
            "routing_iterations": c.routing_iterations,
            "K": c.K,
            "input_channels": c.input_channels,
            "patch_size": c.patch_size,
        }
        for n, (filters, kernel, stride) in enumerate(c.stem):
            out[f"stem{n}_filters"] = filters
            out[f"stem{n}_kernel"] = kernel
            out[f"stem{n}_stride"] = stride
        return out

    @classmethod
    def from_meta(cls, meta: dict[str, float]) -> "CapsuleNet":
        stem = tuple(
            (int(meta[f"stem{n}_filters"]), int(meta[f"stem{n}_kernel"]), int(meta[f"stem{n}_stride"]))
            for n in range(int(meta["stem_layers"]))
        )
        keys = ("capsule_types", "capsule_dim", "primary_kernel", "primary_stride", "secondary_dim",
                "secondary_capsules", "routing_iterations", "K", "input_channels", "patch_size")
        return cls(CapsConfig(stem=stem, **{k: int(meta[k]) for k in keys}))


def build_capsnet(config: CapsConfig | None = None, seed: int = 0) -> CapsuleNet:
    return CapsuleNet(config, seed)


def count_parameters(model: Module) -> int:
    return model.count_parameters()


def bce_loss(p: Tensor, y) -> Tensor:
    return F.binary_cross_entropy(p, y)


def prepare_patches(patches: np.ndarray) -> np.ndarray:
    """[N, H, W, 3] uint8 -> [N, 3, H, W] float32 in [0, 1] (a transposed view)."""
    arr = np.asarray(patches)
    if arr.ndim == 3:
        arr = arr[None]
    return (arr.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)


def predict_patches(model: CapsuleNet, patches: np.ndarray, batch_size: int = 32,
                    return_maps: bool = False):
    """Patch probabilities for uint8 patches [N, H, W, 3]."""
    patches = np.asarray(patches)
    n = len(patches)
    if n == 0:
        empty = np.zeros(0, dtype=np.float32)
        return (empty, np.zeros((0, 0, 0), np.float32)) if return_maps else empty
    side = model.config.patch_size
    if patches.shape[1:3] != (side, side):
        raise ShapeError(f"patches must be {side}x{side}, got {patches.shape[1:3]}")
    probs, maps = [], []
    with no_grad():
        for start in range(0, n, batch_size):
            prob_map, pooled = model(Tensor(prepare_patches(patches[start : start + batch_size])))
            probs.append(pooled.data)
            if return_maps:
                maps.append(prob_map.data)
    p = np.concatenate(probs)
    return (p, np.concatenate(maps)) if return_maps else p


@dataclass
class CapsTrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    flip: bool = False


def train_patch_classifier(
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    config: CapsConfig | None = None,
    train_config: CapsTrainConfig | None = None,
    seed: int = 0,
    progress: Callable[[dict], None] | None = None,
) -> tuple[CapsuleNet, list[dict]]:
    """Minimise the patch BCE; keep the epoch with the best validation AUC.

    ``train`` and ``val`` are (uint8 patches [N, 224, 224, 3], labels [N]). If the
    validation set is empty or single-class, training accuracy picks the snapshot.
    """
    x_train, y_train = np.asarray(train[0]), np.asarray(train[1], dtype=np.float32)
    x_val, y_val = np.asarray(val[0]), np.asarray(val[1], dtype=np.float32)
    if len(x_train) == 0:
        raise DataError("train_patch_classifier: empty training set")
    if len(x_train) != len(y_train) or len(x_val) != len(y_val):
        raise DataError("patches and labels differ in length")
    tc = train_config or CapsTrainConfig()
    model = CapsuleNet(config, seed=seed)
    opt = Adam(model.parameters(), lr=tc.lr)
    rng = np.random.default_rng(seed + 1)
    use_val = len(x_val) > 0 and 0 < y_val.sum() < len(y_val)
    history: list[dict] = []
    best_score, best_state = -1.0, model.state_dict()

    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(x_train))
        losses, scores = [], np.zeros(len(x_train), dtype=np.float64)
        for start in range(0, len(order), tc.batch_size):
            idx = order[start : start + tc.batch_size]
            batch = x_train[idx]
            if tc.flip:
                flips = rng.random(len(idx)) < 0.5
                batch = np.where(flips[:, None, None, None], batch[:, :, ::-1], batch)
            opt.zero_grad()
            _, p = model(Tensor(prepare_patches(batch)))
            loss = bce_loss(p, y_train[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(idx))
            scores[idx] = p.data
        train_loss = float(np.sum(losses) / len(x_train))
        train_acc = float(np.mean((scores >= 0.5) == (y_train > 0.5)))
        row = {"epoch": epoch, "train_loss": train_loss, "train_acc": train_acc,
               "val_loss": float("nan"), "val_acc": float("nan"), "val_auc": float("nan")}
        if len(x_val):
            pv = predict_patches(model, x_val).astype(np.float64)
            pc = np.clip(pv, 1e-7, 1 - 1e-7)
            row["val_loss"] = float(np.mean(-y_val * np.log(pc) - (1 - y_val) * np.log(1 - pc)))
            row["val_acc"] = float(np.mean((pv >= 0.5) == (y_val > 0.5)))
            if use_val:
                row["val_auc"] = roc_and_auc(pv, y_val).auc
        history.append(row)
        logger.info("caps epoch %d loss %.4f acc %.3f val auc %.4f", epoch, train_loss, train_acc,
                    row["val_auc"])
        if progress:
            progress(row)
        score = row["val_auc"] if use_val else train_acc
        if score > best_score:
            best_score, best_state = score, model.state_dict()

    model.load_state_dict(best_state)
    return model, history
