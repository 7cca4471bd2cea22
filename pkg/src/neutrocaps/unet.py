"""U-Net for stratum corneum segmentation, trained with a dice objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, Module, Tensor, he_uniform, no_grad
from .autodiff import functional as F
from .errors import ConfigError, DataError, ShapeError
from .imageio import resize_bilinear, resize_nearest

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1e-6


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_filters: int = 16
    kernel_size: int = 3
    input_channels: int = 3
    train_size: tuple[int, int] = (192, 256)
    flip: bool = False

    def validate(self) -> "UNetConfig":
        if self.depth < 1:
            raise ConfigError("unet depth must be >= 1")
        if self.base_filters < 1 or self.input_channels < 1:
            raise ConfigError("unet filter and channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("unet kernel_size must be a positive odd integer")
        step = 2**self.depth
        h, w = self.train_size
        if h % step or w % step:
            raise ConfigError(f"train_size {self.train_size} not divisible by 2^depth = {step}")
        return self


def unet_conv_shapes(config: UNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) for every convolution, in forward order."""
    k = config.kernel_size
    widths = [config.base_filters * 2**level for level in range(config.depth + 1)]
    layers = []
    cin = config.input_channels
    for level in range(config.depth):
        layers.append((f"enc{level}.conv1", cin, widths[level], k))
        layers.append((f"enc{level}.conv2", widths[level], widths[level], k))
        cin = widths[level]
    layers.append(("bottleneck.conv1", cin, widths[-1], k))
    layers.append(("bottleneck.conv2", widths[-1], widths[-1], k))
    below = widths[-1]
    for level in reversed(range(config.depth)):
        layers.append((f"dec{level}.conv1", below + widths[level], widths[level], k))
        layers.append((f"dec{level}.conv2", widths[level], widths[level], k))
        below = widths[level]
    layers.append(("head", below, 1, 1))
    return layers


class UNet(Module):
    kind = 1.0

    def __init__(self, config: UNetConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = (config or UNetConfig()).validate()
        rng = np.random.default_rng(seed)
        for name, cin, cout, k in unet_conv_shapes(self.config):
            self.add_param(f"{name}.weight", he_uniform(rng, (cout, cin, k, k), cin * k * k))
            self.add_param(f"{name}.bias", np.zeros(cout))

    def _conv(self, name: str, x: Tensor, relu: bool = True) -> Tensor:
        w = self.params[f"{name}.weight"]
        pad = w.shape[-1] // 2
        y = F.conv2d(x, w, self.params[f"{name}.bias"], stride=1, padding=pad)
        return F.relu(y) if relu else y

    def forward(self, x: Tensor, return_skips: bool = False):
        """[N, C, H, W] in [0, 1] -> [N, 1, H, W] foreground probability."""
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(f"expected [N,{self.config.input_channels},H,W], got {x.shape}")
        step = 2**self.config.depth
        if x.shape[2] % step or x.shape[3] % step:
            raise ShapeError(f"spatial size {x.shape[2:]} not divisible by {step}")
        skips = []
        h = x
        for level in range(self.config.depth):
            h = self._conv(f"enc{level}.conv1", h)
            h = self._conv(f"enc{level}.conv2", h)
            skips.append(h)
            h, _ = F.maxpool2d(h, 2, 2)
        h = self._conv("bottleneck.conv1", h)
        h = self._conv("bottleneck.conv2", h)
        pairs = []
        for level in reversed(range(self.config.depth)):
            up = F.upsample2d_nearest(h, 2)
            pairs.append((up.shape, skips[level].shape))
            h = F.concat_channels(up, skips[level])
            h = self._conv(f"dec{level}.conv1", h)
            h = self._conv(f"dec{level}.conv2", h)
        out = F.sigmoid(self._conv("head", h, relu=False))
        return (out, pairs) if return_skips else out

    def meta(self) -> dict[str, float]:
        c = self.config
        return {
            "depth": c.depth,
            "base_filters": c.base_filters,
            "kernel_size": c.kernel_size,
            "input_channels": c.input_channels,
            "train_height": c.train_size[0],
            "train_width": c.train_size[1],
        }

    @classmethod
    def from_meta(cls, meta: dict[str, float]) -> "UNet":
        cfg = UNetConfig(
            depth=int(meta["depth"]),
            base_filters=int(meta["base_filters"]),
            kernel_size=int(meta["kernel_size"]),
            input_channels=int(meta["input_channels"]),
            train_size=(int(meta["train_height"]), int(meta["train_width"])),
        )
        return cls(cfg)


def build_unet(config: UNetConfig | None = None, seed: int = 0) -> UNet:
    return UNet(config, seed)


# ----------------------------------------------------------------------------
# dice
# ----------------------------------------------------------------------------
def dice_coefficient(pred, gt, smooth: float = DICE_SMOOTH) -> float:
    """Overlap 2*sum(G*S) / (sum(G) + sum(S)), smoothed to stay defined on empty masks."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"dice: prediction {p.shape} vs ground truth {g.shape}")
    p = p.astype(np.float64)
    inter = float((p * g).sum())
    return (2.0 * inter + smooth) / (float(g.sum()) + float(p.sum()) + smooth)


def seg_loss(pred: Tensor, gt, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - dice, differentiable in ``pred``."""
    g = np.asarray(gt, dtype=pred.dtype)
    if g.shape != pred.shape:
        raise ShapeError(f"seg_loss: prediction {pred.shape} vs ground truth {g.shape}")
    gt_t = Tensor(g)
    inter = F.sum(F.mul(pred, gt_t))
    denom = F.add(F.sum(pred), float(g.sum()) + smooth)
    dice = F.div(F.add(F.mul(inter, 2.0), smooth), denom)
    return F.sub(F.full_like(dice, 1.0), dice)


# ----------------------------------------------------------------------------
# data preparation and inference
# ----------------------------------------------------------------------------
def prepare_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """HxWx3 uint8 -> 3xhxw float at the network's working size.

    Each channel is standardised per image, which also cancels global stain shifts.
    """
    small = resize_bilinear(image, size).transpose(2, 0, 1).astype(np.float64) / 255.0
    mean = small.mean(axis=(1, 2), keepdims=True)
    std = small.std(axis=(1, 2), keepdims=True)
    return ((small - mean) / np.maximum(std, 1e-3)).astype(np.float32)


def prepare_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return resize_nearest(np.asarray(mask, dtype=np.uint8), size).astype(np.float32)


def predict_proba(model: UNet, image: np.ndarray) -> np.ndarray:
    """Foreground probability at the model's working size."""
    x = prepare_image(image, model.config.train_size)[None]
    with no_grad():
        x = Tensor(x.astype(model.params["head.weight"].dtype))
        return model(x).data[0, 0]


def upscale_mask(low: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return resize_nearest(np.asarray(low, dtype=np.uint8), size)


def segment(model: UNet, image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary SC mask at the image's own resolution."""
    prob = predict_proba(model, image)
    return upscale_mask(prob >= threshold, image.shape[:2])


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------
@dataclass
class SegTrainConfig:
    epochs: int = 12
    batch_size: int = 2
    lr: float = 3e-4


def train_segmenter(
    train: Sequence[tuple[np.ndarray, np.ndarray]],
    val: Sequence[tuple[np.ndarray, np.ndarray]],
    config: UNetConfig | None = None,
    train_config: SegTrainConfig | None = None,
    seed: int = 0,
    progress: Callable[[dict], None] | None = None,
) -> tuple[UNet, list[dict]]:
    """Fit a U-Net on (image, mask) pairs; returns the best-validation-dice snapshot.

    Without a validation set the snapshot is chosen by training dice instead.
    """
    if not train:
        raise DataError("train_segmenter: empty training set")
    config = (config or UNetConfig()).validate()
    tc = train_config or SegTrainConfig()
    size = config.train_size
    xs = np.stack([prepare_image(img, size) for img, _ in train])
    ys = np.stack([prepare_mask(m, size) for _, m in train])[:, None]
    val_x = [prepare_image(img, size) for img, _ in val]
    val_y = [prepare_mask(m, size) for _, m in val]

    model = UNet(config, seed=seed)
    opt = Adam(model.parameters(), lr=tc.lr)
    rng = np.random.default_rng(seed + 1)
    history: list[dict] = []
    best_score, best_state = -1.0, model.state_dict()

    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(xs))
        losses, hard = [], []
        for start in range(0, len(order), tc.batch_size):
            idx = order[start : start + tc.batch_size]
            bx, by = xs[idx], ys[idx]
            if config.flip:
                flips = rng.random(len(idx)) < 0.5
                bx = np.where(flips[:, None, None, None], bx[..., ::-1], bx)
                by = np.where(flips[:, None, None, None], by[..., ::-1], by)
            opt.zero_grad()
            pred = model(Tensor(np.ascontiguousarray(bx)))
            loss = seg_loss(pred, by)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            hard.extend(dice_coefficient(p >= 0.5, y) for p, y in zip(pred.data, by))
        train_loss = float(np.mean(losses))
        if val_x:
            val_dice = float(np.mean([
                dice_coefficient(_forward_hard(model, x), y) for x, y in zip(val_x, val_y)
            ]))
        else:
            val_dice = float("nan")
        row = {"epoch": epoch, "train_loss": train_loss, "train_dice": float(np.mean(hard)),
               "val_dice": val_dice}
        history.append(row)
        logger.info("seg epoch %d loss %.4f val dice %.4f", epoch, train_loss, val_dice)
        if progress:
            progress(row)
        score = val_dice if val_x else row["train_dice"]
        if score > best_score:
            best_score, best_state = score, model.state_dict()

    model.load_state_dict(best_state)
    return model, history


def _forward_hard(model: UNet, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return (model(Tensor(x[None])).data[0, 0] >= 0.5).astype(np.float32)
