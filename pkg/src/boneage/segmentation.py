"""Bone/soft-tissue segmentation with a small encoder-decoder network.

The network is the usual contracting/expanding shape: each encoder
level doubles the channel count and halves both extents, the bottleneck
doubles channels once more, and each decoder level upsamples, merges
the matching encoder output, and halves the channel count. A final
1x1 convolution plus sigmoid produces a per-pixel bone probability.

The net runs at ``config.input_size`` (default 96x64, same 3:2 aspect
as the 720x480 working size); ``segment`` accepts an image of any size
and returns the soft mask at net resolution plus the masked bone image
at 720x480.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError, TrainingError
from .imaging import GrayImage, resize_bilinear
from .optim import OptimizerConfig, OptimizerState, collect_grads, optimizer_step, zero_grads
from .tensor import Tape, Tensor, add, concat_channels, conv2d, loss, max_pool2d, sigmoid, upsample2x

WORK_WIDTH = 720
WORK_HEIGHT = 480


@dataclass(frozen=True)
class UNetConfig:
    """Geometry of the segmentation network."""

    depth: int = 3
    base_channels: int = 8
    input_size: Tuple[int, int] = (96, 64)
    threshold: float = 0.5

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        w, h = self.input_size
        div = 2 ** self.depth
        if w % div or h % div:
            raise ConfigError(f"input extents {w}x{h} must be divisible by {div}")

    @property
    def width(self) -> int:
        return self.input_size[0]

    @property
    def height(self) -> int:
        return self.input_size[1]

    def level_channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


@dataclass
class SegmentationModel:
    config: UNetConfig
    params: Dict[str, Tensor] = field(default_factory=dict)


def build_unet(config: UNetConfig = UNetConfig(), seed: int = 0) -> SegmentationModel:
    """Initialize the segmentation network's parameters."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    in_ch = 1
    for level in range(config.depth):
        out_ch = config.level_channels(level)
        nn.init_conv_block(params, rng, f"enc{level}", in_ch, out_ch)
        in_ch = out_ch
    nn.init_conv_block(params, rng, "bottleneck", in_ch, config.level_channels(config.depth))
    for level in reversed(range(config.depth)):
        skip_ch = config.level_channels(level)
        up_ch = config.level_channels(level + 1)
        # merged input: upsampled coarse features plus the skip
        nn.init_conv_block(params, rng, f"dec{level}", up_ch + skip_ch, skip_ch)
    nn.init_conv(params, rng, "head", 1, config.base_channels, k=1)
    return SegmentationModel(config=config, params=params)


def unet_forward(model: SegmentationModel, x: Tensor) -> Tensor:
    """Per-pixel bone probability, shape (N, 1, height, width)."""
    cfg = model.config
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise DimensionError(f"expected (N, 1, H, W) input, got {x.shape}")
    if x.data.shape[2] != cfg.height or x.data.shape[3] != cfg.width:
        raise DimensionError(
            f"expected {cfg.height}x{cfg.width} input plane, got "
            f"{x.data.shape[2]}x{x.data.shape[3]}"
        )
    p = model.params
    skips = []
    t = x
    for level in range(cfg.depth):
        t = nn.conv_block(t, p, f"enc{level}")
        skips.append(t)
        t = max_pool2d(t)
    t = nn.conv_block(t, p, "bottleneck")
    for level in reversed(range(cfg.depth)):
        t = concat_channels(upsample2x(t), skips[level])
        t = nn.conv_block(t, p, f"dec{level}")
    logits = conv2d(t, p["head.w"], p["head.b"], stride=1, padding=0)
    return sigmoid(logits)


def segment(model: SegmentationModel, img: GrayImage) -> Tuple[GrayImage, GrayImage]:
    """Isolate bone: returns (soft mask, bone image).

    The mask is the sigmoid output at net resolution. The bone image
    keeps the pixels where the binarized mask fires, zeroes the rest,
    and is resized to the 720x480 working size.
    """
    cfg = model.config
    small = resize_bilinear(img, cfg.width, cfg.height)
    out = unet_forward(model, Tensor(small.pixels[None, None, :, :]))
    mask = GrayImage(out.data[0, 0])
    hard = (mask.pixels >= cfg.threshold).astype(np.float32)
    bone = GrayImage(small.pixels * hard)
    return mask, resize_bilinear(bone, WORK_WIDTH, WORK_HEIGHT)


def dice_score(pred, target, threshold: float = 0.5) -> float:
    """Overlap of two masks: 2|A.B| / (|A| + |B|); 1.0 if both empty."""
    a = pred.pixels if isinstance(pred, GrayImage) else np.asarray(pred)
    b = target.pixels if isinstance(target, GrayImage) else np.asarray(target)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    ah = a >= threshold
    bh = b >= threshold
    total = ah.sum() + bh.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(ah, bh).sum() / total)


def _training_arrays(
    model: SegmentationModel, dataset: Sequence[Tuple[GrayImage, GrayImage]]
) -> Tuple[np.ndarray, np.ndarray]:
    cfg = model.config
    images = np.empty((len(dataset), 1, cfg.height, cfg.width), dtype=np.float32)
    masks = np.empty_like(images)
    for i, (img, mask) in enumerate(dataset):
        if (img.width, img.height) != (mask.width, mask.height):
            raise DimensionError(
                f"sample {i}: image {img.width}x{img.height} but mask "
                f"{mask.width}x{mask.height}"
            )
        if (img.width, img.height) != cfg.input_size:
            img = resize_bilinear(img, cfg.width, cfg.height)
            mask = GrayImage(
                (resize_bilinear(mask, cfg.width, cfg.height).pixels >= 0.5).astype(np.float32)
            )
        bad = np.setdiff1d(np.unique(mask.pixels), [0.0, 1.0])
        if bad.size:
            raise TrainingError(f"sample {i}: mask is not binary (found {bad[:4]})")
        images[i, 0] = img.pixels
        masks[i, 0] = mask.pixels
    return images, masks


def train_segmentation(
    model: SegmentationModel,
    dataset: Sequence[Tuple[GrayImage, GrayImage]],
    epochs: int = 40,
    optimizer: Optional[OptimizerConfig] = None,
    seed: int = 0,
    stop_loss: Optional[float] = None,
    log_fn=None,
) -> Tuple[SegmentationModel, List[float]]:
    """Fit on (image, binary mask) pairs; both are resized to net size.

    The loss is cross-entropy plus overlap loss, equally weighted.
    Training stops early once the epoch mean drops below ``stop_loss``
    (when given). Returns the model and the mean loss per epoch.
    """
    if not dataset:
        raise TrainingError("segmentation training needs at least one sample")
    optimizer = optimizer or OptimizerConfig(kind="adaptive", learning_rate=1e-3, batch_size=16)
    images, masks = _training_arrays(model, dataset)

    rng = np.random.default_rng(seed)
    state = OptimizerState(learning_rate=optimizer.learning_rate)
    history: List[float] = []
    for epoch in range(epochs):
        total = 0.0
        batches = 0
        for idx in nn.minibatches(len(dataset), optimizer.batch_size, rng):
            zero_grads(model.params)
            with Tape() as tape:
                pred = unet_forward(model, Tensor(images[idx]))
                target = Tensor(masks[idx])
                l = add(loss(pred, target, "bce"), loss(pred, target, "dice"))
                tape.backward(l)
            value = float(l.data)
            if not np.isfinite(value):
                raise TrainingError(
                    f"segmentation loss became {value} at epoch {epoch}, batch {batches}"
                )
            optimizer_step(model.params, collect_grads(model.params), state, kind=optimizer.kind)
            total += value
            batches += 1
        history.append(total / batches)
        if log_fn is not None:
            log_fn(f"seg epoch {epoch + 1}/{epochs} loss {history[-1]:.5f}")
        if stop_loss is not None and history[-1] < stop_loss:
            break
    return model, history
