#!/usr/bin/env python3
"""
Tubule Net - the tubule-sensitive 3-D U-Net: feature recalibration,
decoder-side attention distillation, Dice+Focal losses and postprocessing.

Scales are numbered 0 (input resolution) to 4 (bottleneck). Every scale of
the encoder and decoder ends with a recalibration module. Decoders 1-4 run
from coarse (scale 3) to fine (scale 0); their recalibrated outputs are the
features the distillation loss compares, each coarser map pulled toward the
next finer one.

Usage:
    cfg = ModelConfig(task="airway", channels=(4, 8, 16, 32, 64), patch_size=(32, 32, 32))
    model = TubuleNet(cfg)
    out = model(Tensor(patch[np.newaxis, np.newaxis]))
    terms = total_losses(out, label, cfg)
    terms.total.backward()
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml
from scipy import ndimage

from autodiff import (
    Function,
    Module,
    Parameter,
    Tensor,
    abs_pow,
    avg_pool,
    channel_max,
    channel_mean,
    channel_softmax,
    channel_sum,
    concat,
    conv3d,
    frobenius_sq,
    instance_norm,
    max_pool,
    no_grad,
    relu,
    sigmoid,
    spatial_softmax,
    take_channel,
    trilinear_resize,
)
from errors import DataError, NumericError
from volume_core import ARTERY, AV_ALPHABET, BACKGROUND, MASK_ALPHABET, NON_DETERMINED, VEIN, LabelMap, Volume

logger = logging.getLogger("tubule_seg.tubule_net")

TASKS = ("airway", "artery-vein")
SCALES = 5
FOCAL_CLAMP = 1e-7


# ==============================================================================
# CONFIGURATION
# ==============================================================================

@dataclass(frozen=True)
class ModelConfig:
    """Architecture and loss hyper-parameters."""

    task: str = "airway"
    channels: tuple = (16, 32, 64, 128, 256)
    r: int = 2
    p: float = 2.0
    alpha: float = 0.1
    patch_size: tuple = (80, 192, 304)
    use_coordinate_map: bool = True
    use_aux_vessel_head: bool = True
    use_distillation: bool = True
    recalibration: str = "fr"
    attention_mapping: str = "sum"
    pooling: str = "max"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "patch_size", tuple(int(s) for s in self.patch_size))
        if self.task not in TASKS:
            raise DataError(f"Unknown task {self.task!r}; expected one of {TASKS}")
        if len(self.channels) != SCALES:
            raise DataError(f"channel ladder needs {SCALES} scales, got {len(self.channels)}")
        if min(self.channels) < 1 or self.r < 1:
            raise DataError("channel counts and r must be positive")
        if self.recalibration not in RECALIBRATIONS:
            raise DataError(f"Unknown recalibration {self.recalibration!r}; expected one of {sorted(RECALIBRATIONS)}")
        if self.recalibration != "none":
            bad = [c for c in self.channels if c % self.r]
            if bad:
                raise DataError(f"r={self.r} does not divide channel counts {bad}")
        if self.attention_mapping not in ATTENTION_MAPPINGS:
            raise DataError(f"Unknown attention mapping {self.attention_mapping!r}")
        if self.pooling not in ("max", "avg"):
            raise DataError(f"pooling must be 'max' or 'avg', got {self.pooling!r}")
        if self.alpha < 0 or self.p < 1:
            raise DataError(f"need alpha >= 0 and p >= 1, got alpha={self.alpha}, p={self.p}")
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise DataError(f"patch_size must be 3 positive ints, got {self.patch_size}")

    @property
    def in_channels(self) -> int:
        # artery-vein input: CT, lung context map, distance transform map
        return 1 if self.task == "airway" else 3

    @property
    def out_channels(self) -> int:
        return 1 if self.task == "airway" else 3

    def scale_dims(self) -> list:
        dims = [self.patch_size]
        for _ in range(SCALES - 1):
            dims.append(tuple((n + 1) // 2 for n in dims[-1]))
        return dims

    def to_dict(self) -> dict:
        out = asdict(self)
        out["channels"] = list(self.channels)
        out["patch_size"] = list(self.patch_size)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def save_model_config(cfg: ModelConfig, path: Union[str, Path]):
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)


def load_model_config(path: Union[str, Path]) -> ModelConfig:
    try:
        with open(path) as f:
            values = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise DataError(f"Cannot read model config {path}: {e}") from e
    return ModelConfig.from_dict(values)


# ==============================================================================
# LAYERS
# ==============================================================================

def _kaiming(rng: np.random.Generator, shape: tuple) -> Parameter:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Conv(Module):
    def __init__(self, ci: int, co: int, size: int, rng: np.random.Generator):
        super().__init__()
        self.weight = _kaiming(rng, (co, ci, size, size, size))
        self.bias = Parameter(np.zeros(co))
        self.padding = size // 2

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, padding=self.padding)


class InstanceNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gamma, self.beta)


class ConvBlock(Module):
    """Two (conv 3x3x3, instance norm, ReLU) layers."""

    def __init__(self, ci: int, co: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv(ci, co, 3, rng)
        self.norm1 = InstanceNorm(co)
        self.conv2 = Conv(co, co, 3, rng)
        self.norm2 = InstanceNorm(co)

    def forward(self, x: Tensor) -> Tensor:
        x = relu(self.norm1(self.conv1(x)))
        return relu(self.norm2(self.conv2(x)))


# ==============================================================================
# RECALIBRATION
# ==============================================================================

class Recalibration(Module):
    """Channel gate U computed from a spatial summary Z: output = U * A."""

    def __init__(self, channels: int, dims: tuple, r: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.dims = tuple(dims)
        self.excite_down = Conv(channels, channels // r, 1, rng)
        self.excite_up = Conv(channels // r, channels, 1, rng)

    def summary(self, a: Tensor) -> Tensor:
        """Spatial integration Z, broadcastable to A."""
        raise NotImplementedError

    def _check(self, a: Tensor):
        if a.ndim != 5 or a.shape[1] != self.channels or tuple(a.shape[2:]) != self.dims:
            raise DataError(f"{type(self).__name__} expects [N, {self.channels}, {self.dims}], got {a.shape}")

    def gate(self, a: Tensor) -> Tensor:
        self._check(a)
        return sigmoid(self.excite_up(relu(self.excite_down(self.summary(a)))))

    def forward(self, a: Tensor) -> Tensor:
        return self.gate(a) * a


class FeatureRecalibration(Recalibration):
    """Directional summaries with learnable combination weights d, h, w per axis."""

    def __init__(self, channels: int, dims: tuple, r: int, rng: np.random.Generator):
        super().__init__(channels, dims, r, rng)
        depth, height, width = self.dims
        self.d = Parameter(np.full(depth, 1.0 / depth))
        self.h = Parameter(np.full(height, 1.0 / height))
        self.w = Parameter(np.full(width, 1.0 / width))

    def summary(self, a: Tensor) -> Tensor:
        depth, height, width = self.dims
        d = self.d.reshape(1, 1, depth, 1, 1)
        h = self.h.reshape(1, 1, 1, height, 1)
        w = self.w.reshape(1, 1, 1, 1, width)
        z_depth = (a * h * w).sum(axis=(3, 4), keepdims=True)
        z_height = (a * d * w).sum(axis=(2, 4), keepdims=True)
        z_width = (a * d * h).sum(axis=(2, 3), keepdims=True)
        return z_depth + z_height + z_width


class ProjectExcite(Recalibration):
    """Directional summaries with fixed uniform weights (axis means)."""

    def summary(self, a: Tensor) -> Tensor:
        return a.mean(axis=(3, 4), keepdims=True) + a.mean(axis=(2, 4), keepdims=True) + a.mean(axis=(2, 3), keepdims=True)


class ChannelSqueezeExcite(Recalibration):
    """Global average pooling summary."""

    def summary(self, a: Tensor) -> Tensor:
        return a.mean(axis=(2, 3, 4), keepdims=True)


class NoRecalibration(Module):
    def __init__(self, channels: int, dims: tuple, r: int, rng: np.random.Generator):
        super().__init__()

    def forward(self, a: Tensor) -> Tensor:
        return a


RECALIBRATIONS = {
    "fr": FeatureRecalibration,
    "pe": ProjectExcite,
    "cse": ChannelSqueezeExcite,
    "none": NoRecalibration,
}


# ==============================================================================
# ATTENTION DISTILLATION
# ==============================================================================

class AttentionMapping(ABC):
    """Reduces |A|^p over channels to a single-channel attention map."""

    name: str = "base"

    @abstractmethod
    def reduce(self, powered: Tensor) -> Tensor:
        pass

    def __call__(self, features: Tensor, p: float) -> Tensor:
        return self.reduce(abs_pow(features, p))


class SumMapping(AttentionMapping):
    name = "sum"

    def reduce(self, powered: Tensor) -> Tensor:
        return channel_sum(powered)


class MaxMapping(AttentionMapping):
    name = "max"

    def reduce(self, powered: Tensor) -> Tensor:
        return channel_max(powered)


class MeanMapping(AttentionMapping):
    name = "mean"

    def reduce(self, powered: Tensor) -> Tensor:
        return channel_mean(powered)


ATTENTION_MAPPINGS = {
    "sum": SumMapping,
    "max": MaxMapping,
    "mean": MeanMapping,
}


def get_attention_mapping(name: str = "sum") -> AttentionMapping:
    if name not in ATTENTION_MAPPINGS:
        available = ", ".join(ATTENTION_MAPPINGS)
        raise DataError(f"Unknown attention mapping '{name}'. Available: {available}")
    return ATTENTION_MAPPINGS[name]()


def attention_maps_and_distill_loss(features: list, p: float = 2.0, mapping: str = "sum",
                                    targets: Optional[list] = None) -> tuple[list, Tensor]:
    """Normalized attention maps of decoder features (coarse to fine) and the distillation loss.

    Each map is resized to the finest resolution and spatially softmaxed; every
    pair contributes ||G_m - G_{m+1}||_F^2 with the finer map detached.
    ``targets`` replaces the finer maps by fixed arrays, one per pair, so that
    perturbed evaluations of the loss share the same targets.
    """
    if len(features) < 2:
        raise DataError("attention distillation needs at least two decoder features")
    reduce = get_attention_mapping(mapping)
    finest = tuple(features[-1].shape[2:])
    maps = [spatial_softmax(trilinear_resize(reduce(a, p), finest)) for a in features]
    if targets is None:
        fixed = [fine.detach() for fine in maps[1:]]
    else:
        if len(targets) != len(maps) - 1:
            raise DataError(f"expected {len(maps) - 1} distillation targets, got {len(targets)}")
        fixed = [Tensor(np.asarray(target)) for target in targets]
    loss = None
    for coarse, fine in zip(maps[:-1], fixed):
        term = frobenius_sq(coarse - fine)
        loss = term if loss is None else loss + term
    return maps, loss


def distillation_targets(features: list, p: float = 2.0, mapping: str = "sum") -> list:
    """Copies of the finer attention maps, for use as fixed ``targets``."""
    with no_grad():
        maps, _ = attention_maps_and_distill_loss(features, p, mapping)
    return [m.data.copy() for m in maps[1:]]


# ==============================================================================
# LOSSES
# ==============================================================================

class DiceFocal(Function):
    """-(soft Dice + mean (1-p_t)^2 log p_t) over the voxels selected by mask."""

    def forward(self, p, y=None, mask=None, eps=1e-7):
        if p.shape != y.shape:
            raise DataError(f"prediction shape {p.shape} does not match label shape {y.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0 or p.max() > 1:
            raise NumericError("probabilities must be finite and within [0, 1]")
        weight = np.ones_like(p) if mask is None else mask.astype(p.dtype)
        count = max(float(weight.sum()), 1.0)
        s1 = float((p * y * weight).sum())
        s2 = float(((p + y) * weight).sum()) + eps
        pt = np.where(y > 0, p, 1.0 - p)
        ptc = np.clip(pt, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)
        focal = float(((1.0 - ptc) ** 2 * np.log(ptc) * weight).sum()) / count
        self.save(p, y, weight, pt, ptc, s1, s2, count)
        return np.asarray(-(2.0 * s1 / s2 + focal))

    def backward(self, grad):
        p, y, weight, pt, ptc, s1, s2, count = self.saved
        d_dice = (2.0 * y / s2 - 2.0 * s1 / (s2 * s2)) * weight
        inside = (pt > FOCAL_CLAMP) & (pt < 1.0 - FOCAL_CLAMP)
        d_focal_pt = (-2.0 * (1.0 - ptc) * np.log(ptc) + (1.0 - ptc) ** 2 / ptc) * inside
        sign = np.where(y > 0, 1.0, -1.0)
        d_focal = d_focal_pt * sign * weight / count
        return (-(d_dice + d_focal) * grad,)


def dice_focal_loss(p: Tensor, y, eps: float = 1e-7, mask: Optional[np.ndarray] = None) -> Tensor:
    """Dice + Focal loss of probabilities p against a binary label (array or LabelMap)."""
    labels = y.data if isinstance(y, LabelMap) else np.asarray(y)
    target = (labels > 0).astype(p.data.dtype)
    if target.shape != p.shape:
        if target.size != p.data.size:
            raise DataError(f"label shape {target.shape} does not match prediction shape {p.shape}")
        target = target.reshape(p.shape)
    if mask is not None:
        mask = np.asarray(mask).reshape(p.shape)
    return DiceFocal.apply(p, y=target, mask=mask, eps=eps)


@dataclass
class NetOutput:
    """Probabilities per head plus the decoder features used for distillation."""

    seg: Tensor                  # [N, 1|3, D, H, W] sigmoid (airway) or softmax (artery-vein)
    vessel: Optional[Tensor]     # [N, 1, D, H, W] auxiliary vessel probability (artery-vein only)
    features: list               # recalibrated decoder 1..4 outputs, coarse to fine


@dataclass
class LossTerms:
    total: Tensor
    segmentation: Tensor
    distill: Optional[Tensor]

    def values(self) -> dict:
        return {
            "total": self.total.item(),
            "segmentation": self.segmentation.item(),
            "distill": self.distill.item() if self.distill is not None else 0.0,
        }


def total_losses(outputs: NetOutput, labels, cfg: ModelConfig,
                 distill_targets: Optional[list] = None) -> LossTerms:
    """Airway: Dice+Focal + alpha*distill. Artery-vein: class-mean Dice+Focal + vessel term + alpha*distill.

    ``distill_targets`` fixes the finer attention maps (see distillation_targets).
    """
    labels = labels.data if isinstance(labels, LabelMap) else np.asarray(labels)
    seg = outputs.seg
    labels = labels.reshape((seg.shape[0], 1) + tuple(seg.shape[2:]))
    if cfg.task == "airway":
        if seg.shape[1] != 1 or outputs.vessel is not None:
            raise DataError("airway task expects a single sigmoid channel and no vessel head")
        segmentation = dice_focal_loss(seg, labels > 0)
    else:
        if seg.shape[1] != 3 or outputs.vessel is None:
            raise DataError("artery-vein task expects 3 softmax channels and a vessel head")
        determined = labels != NON_DETERMINED
        class_terms = None
        for cls in (BACKGROUND, ARTERY, VEIN):
            term = dice_focal_loss(take_channel(seg, cls), labels == cls, mask=determined)
            class_terms = term if class_terms is None else class_terms + term
        vessel_label = (labels == ARTERY) | (labels == VEIN)
        segmentation = class_terms * (1.0 / 3.0) + dice_focal_loss(outputs.vessel, vessel_label, mask=determined)

    distill = None
    total = segmentation
    if cfg.use_distillation and len(outputs.features) >= 2:
        _, distill = attention_maps_and_distill_loss(outputs.features, cfg.p, cfg.attention_mapping,
                                                     distill_targets)
        if cfg.alpha > 0:
            total = segmentation + distill * cfg.alpha
    return LossTerms(total=total, segmentation=segmentation, distill=distill)


# ==============================================================================
# NETWORK
# ==============================================================================

def coordinate_map(volume_dims: tuple, offset: tuple, patch_dims: tuple) -> np.ndarray:
    """[3, *patch_dims] voxel coordinates normalized by (dim - 1) of the full volume, clipped to [0, 1]."""
    axes = []
    for v, o, n in zip(volume_dims, offset, patch_dims):
        index = (o + np.arange(n)).astype(np.float64)
        axes.append(np.clip(index / (v - 1), 0.0, 1.0) if v > 1 else np.zeros(n))
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack(grids)


class TubuleNet(Module):
    """3-D U-Net with recalibration after every scale and decoder attention taps."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        dims = cfg.scale_dims()
        self.dims = dims
        recal = RECALIBRATIONS[cfg.recalibration]

        self.encoders = []
        self.encoder_recal = []
        for s in range(SCALES):
            ci = cfg.in_channels if s == 0 else c[s - 1]
            self.encoders.append(self.add_module(f"enc{s}", ConvBlock(ci, c[s], rng)))
            self.encoder_recal.append(self.add_module(f"enc{s}_recal", recal(c[s], dims[s], cfg.r, rng)))

        self.decoders = []
        self.decoder_recal = []
        for j in range(1, SCALES):
            s = SCALES - 1 - j
            ci = c[s + 1] + c[s] + (3 if j == SCALES - 1 and cfg.use_coordinate_map else 0)
            self.decoders.append(self.add_module(f"dec{j}", ConvBlock(ci, c[s], rng)))
            self.decoder_recal.append(self.add_module(f"dec{j}_recal", recal(c[s], dims[s], cfg.r, rng)))

        self.head = Conv(c[0], cfg.out_channels, 1, rng)
        self.vessel_head = Conv(3, 1, 1, rng) if cfg.task == "artery-vein" and cfg.use_aux_vessel_head else None
        logger.debug(f"Built {cfg.task} network with {self.parameter_count()} parameters")

    def _pool(self, x: Tensor) -> Tensor:
        return max_pool(x) if self.cfg.pooling == "max" else avg_pool(x)

    def forward(self, x: Tensor, coords: Optional[np.ndarray] = None) -> NetOutput:
        cfg = self.cfg
        if x.ndim != 5 or x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != cfg.patch_size:
            raise DataError(f"expected input [N, {cfg.in_channels}, {cfg.patch_size}], got {x.shape}")

        skips = []
        h = x
        for s in range(SCALES):
            if s > 0:
                h = self._pool(h)
            h = self.encoder_recal[s](self.encoders[s](h))
            skips.append(h)

        features = []
        for j in range(1, SCALES):
            s = SCALES - 1 - j
            parts = [trilinear_resize(h, self.dims[s]), skips[s]]
            if j == SCALES - 1 and cfg.use_coordinate_map:
                grid = coords if coords is not None else coordinate_map(cfg.patch_size, (0, 0, 0), cfg.patch_size)
                grid = np.broadcast_to(np.asarray(grid)[np.newaxis], (x.shape[0], 3) + cfg.patch_size)
                parts.append(Tensor(grid))
            h = self.decoder_recal[j - 1](self.decoders[j - 1](concat(parts, axis=1)))
            features.append(h)

        logits = self.head(h)
        if cfg.task == "airway":
            return NetOutput(seg=sigmoid(logits), vessel=None, features=features)
        probs = channel_softmax(logits)
        if self.vessel_head is not None:
            vessel = sigmoid(self.vessel_head(logits))
        else:
            vessel = 1.0 - take_channel(probs, BACKGROUND)
        return NetOutput(seg=probs, vessel=vessel, features=features)


def build_model(cfg: ModelConfig) -> TubuleNet:
    return TubuleNet(cfg)


# ==============================================================================
# POSTPROCESSING
# ==============================================================================

def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 26-connected component (ties: the one found first in scan order)."""
    labels, count = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    if count <= 1:
        return labels > 0
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def postprocess_airway(prob: Volume, th: float = 0.5) -> LabelMap:
    binary = np.asarray(prob.data) >= th
    return LabelMap(largest_component(binary), prob.spacing, prob.origin, MASK_ALPHABET)


def postprocess_av(probs: list) -> LabelMap:
    """Per-voxel argmax over (background, artery, vein); ties go to the lower class."""
    if len(probs) != 3:
        raise DataError(f"artery-vein postprocessing needs 3 probability channels, got {len(probs)}")
    stack = np.stack([np.asarray(p.data) for p in probs])
    return LabelMap(np.argmax(stack, axis=0).astype(np.uint8), probs[0].spacing, probs[0].origin, AV_ALPHABET)


def postprocess(outputs: list, task: str, th: float = 0.5) -> LabelMap:
    if task == "airway":
        if len(outputs) != 1:
            raise DataError(f"airway postprocessing needs one probability volume, got {len(outputs)}")
        return postprocess_airway(outputs[0], th)
    return postprocess_av(outputs)
