#!/usr/bin/env python3
"""
Training - Adam with a plateau learning-rate rule, the seeded training loop,
and sliding-window inference.

Training is deterministic on one thread: sample order, augmentation draws
and patch positions all derive from TrainConfig.seed.

Usage:
    samples = [Sample([normalize_hu(ct)], label) for ct, label in phantoms]
    model, history = train(model, samples, TrainConfig(epochs=30))
    history.write_csv("history.csv")
"""

import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd

from autodiff import Tensor, no_grad
from errors import DataError, NumericError
from tubule_net import TubuleNet, coordinate_map, total_losses
from volume_core import (
    BACKGROUND,
    AugmentConfig,
    LabelMap,
    Volume,
    augment,
    augment_config_for,
    check_geometry,
    crop,
    crop_to_mask_bbox,
    normalize_hu,
    uncrop,
)

logger = logging.getLogger("tubule_seg.training")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    plateau_patience: int = 10
    lr_factor: float = 0.1
    batch_size: int = 1
    epochs: int = 60
    seed: int = 0
    augment: Optional[AugmentConfig] = None

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.plateau_patience < 0:
            raise DataError("lr and batch_size must be positive; epochs and plateau_patience non-negative")
        if not 0 < self.lr_factor < 1:
            raise DataError(f"lr_factor must be in (0, 1), got {self.lr_factor}")

    @classmethod
    def from_settings(cls, train: dict, augment_section: Optional[dict] = None) -> "TrainConfig":
        known = {k: v for k, v in train.items() if k in cls.__dataclass_fields__ and k != "augment"}
        aug = AugmentConfig.from_settings(augment_section, seed=int(known.get("seed", 0))) if augment_section else None
        return cls(augment=aug, **known)


class Adam:
    """Adam with bias correction, updating Parameter.data in place."""

    def __init__(self, params: list, lr: float = 3e-3, betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, scale: float = 1.0):
        self.t += 1
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


class PlateauScheduler:
    """Multiply the lr by factor once the monitored loss fails to improve for more than patience epochs."""

    def __init__(self, lr: float, patience: int = 10, factor: float = 0.1, threshold: float = 1e-4):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, metric: float) -> bool:
        """Record one epoch; True when the lr was reduced."""
        if metric < self.best - self.threshold * abs(self.best) or self.best == float("inf"):
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            logger.info(f"Loss plateaued at {self.best:.6f}; lr reduced to {self.lr:.3g}")
            return True
        return False


@dataclass
class LossHistory:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "total", "segmentation", "distill", "lr", "seconds")

    def append(self, **row):
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(self.COLUMNS))

    def write_csv(self, path: Union[str, Path]):
        self.to_frame().drop(columns=["seconds"]).to_csv(path, index=False, float_format="%.9g")


def model_inputs(ct: Volume, context: Optional[LabelMap] = None,
                 distance: Optional[Volume] = None) -> list:
    """Network input channels: normalized CT, then (artery-vein) context / 3 and max-scaled distance."""
    channels = [normalize_hu(ct)]
    if context is None and distance is None:
        return channels
    if context is None or distance is None:
        raise DataError("artery-vein inputs need both the context map and the distance map")
    check_geometry(ct, context, "CT and context map")
    check_geometry(ct, distance, "CT and distance map")
    dist = np.asarray(distance.data, dtype=np.float64)
    peak = float(dist.max())
    channels.append(ct.with_data(np.asarray(context.data, dtype=np.float64) / 3.0))
    channels.append(ct.with_data(dist / peak if peak > 0 else dist))
    return channels


@dataclass
class Sample:
    """Input channels (CT first, then priors) and the label on one grid."""

    channels: list
    label: LabelMap

    def __post_init__(self):
        if not self.channels:
            raise DataError("a training sample needs at least one input channel")
        for vol in self.channels:
            check_geometry(vol, self.label, "sample channel and label")


def sample_patch(channels: np.ndarray, label: np.ndarray, patch: tuple,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, tuple]:
    """Random patch of [C, D, H, W] inputs and [D, H, W] labels; short axes are zero-padded."""
    spatial = channels.shape[1:]
    if label.shape != spatial:
        raise DataError(f"label shape {label.shape} does not match input {spatial}")
    offset = tuple(int(rng.integers(0, max(n - p, 0) + 1)) for n, p in zip(spatial, patch))
    pads = [(0, max(p - n, 0)) for n, p in zip(spatial, patch)]
    if any(b for _, b in pads):
        channels = np.pad(channels, [(0, 0)] + pads)
        label = np.pad(label, pads)
    window = tuple(slice(o, o + p) for o, p in zip(offset, patch))
    return channels[(slice(None),) + window], label[window], offset


def _augmented(sample: Sample, cfg: Optional[AugmentConfig]) -> tuple[np.ndarray, np.ndarray]:
    if cfg is None:
        return np.stack([np.asarray(v.data, dtype=np.float64) for v in sample.channels]), np.asarray(sample.label.data)
    first, label = augment(sample.channels[0], sample.label, cfg)
    # priors follow the same flip and shift but are neither smoothed nor jittered
    geometric = replace(cfg, smooth_prob=0.0, jitter_prob=0.0)
    rest = [augment(v, sample.label, geometric)[0] for v in sample.channels[1:]]
    return np.stack([np.asarray(v.data, dtype=np.float64) for v in [first] + rest]), np.asarray(label.data)


def train(model: TubuleNet, samples: list, tc: TrainConfig) -> tuple[TubuleNet, LossHistory]:
    """Adam over the task loss; returns the (updated) model and the per-epoch loss history."""
    if not samples:
        raise DataError("training set is empty")
    cfg = model.cfg
    history = LossHistory()
    if tc.epochs == 0:
        return model, history

    optimizer = Adam(model.parameters(), lr=tc.lr)
    scheduler = PlateauScheduler(tc.lr, tc.plateau_patience, tc.lr_factor)
    patch = cfg.patch_size

    for epoch in range(tc.epochs):
        started = time.perf_counter()
        rng = np.random.default_rng([tc.seed, epoch])
        order = rng.permutation(len(samples))
        totals = {"total": 0.0, "segmentation": 0.0, "distill": 0.0}
        optimizer.zero_grad()
        pending = 0

        for step, index in enumerate(order):
            sample = samples[int(index)]
            aug = augment_config_for(tc.augment, epoch, int(index)) if tc.augment is not None else None
            channels, label = _augmented(sample, aug)
            x, y, offset = sample_patch(channels, label, patch, rng)
            coords = coordinate_map(label.shape, offset, patch) if cfg.use_coordinate_map else None

            out = model(Tensor(x[np.newaxis]), coords)
            terms = total_losses(out, y[np.newaxis, np.newaxis], cfg)
            values = terms.values()
            if not all(np.isfinite(v) for v in values.values()):
                raise NumericError(f"non-finite loss at epoch {epoch}, sample {int(index)}: {values}")
            terms.total.backward()
            for key in totals:
                totals[key] += values[key]

            pending += 1
            if pending == tc.batch_size or step == len(order) - 1:
                optimizer.step(scale=1.0 / pending)
                optimizer.zero_grad()
                pending = 0

        means = {k: v / len(samples) for k, v in totals.items()}
        history.append(epoch=epoch, lr=optimizer.lr, seconds=time.perf_counter() - started, **means)
        logger.info(
            f"Epoch {epoch + 1}/{tc.epochs}: loss={means['total']:.6f} "
            f"seg={means['segmentation']:.6f} distill={means['distill']:.6f} lr={optimizer.lr:.3g}")
        if scheduler.step(means["total"]):
            optimizer.lr = scheduler.lr

    return model, history


# ==============================================================================
# SLIDING-WINDOW INFERENCE
# ==============================================================================

def window_starts(size: int, patch: int, stride: int) -> list:
    """0, s, 2s, ... up to the first window that reaches the end of the axis.

    A stride longer than the patch is clamped to the patch so no voxel falls
    between two windows.
    """
    if patch < 1 or stride < 1:
        raise DataError(f"patch and stride must be positive, got patch={patch}, stride={stride}")
    step = min(stride, patch)
    starts = [0]
    while starts[-1] + patch < size:
        starts.append(starts[-1] + step)
    return starts


def sliding_window_infer(predict: Callable, inputs: np.ndarray, patch: tuple, stride: int = 64,
                         lateral_stride: Optional[int] = None, threads: int = 1) -> np.ndarray:
    """Average per-window predictions over a [C, D, H, W] input; returns [K, D, H, W].

    ``predict(window, offset)`` gets a zero-padded [C, *patch] window and its
    start index and returns [K, *patch] probabilities. Windows are accumulated
    in tiling order regardless of ``threads``.
    """
    spatial = inputs.shape[1:]
    strides = (stride,) + ((lateral_stride,) * 2 if lateral_stride else tuple(patch[1:]))
    starts = [window_starts(n, p, s) for n, p, s in zip(spatial, patch, strides)]
    padded_dims = tuple(st[-1] + p for st, p in zip(starts, patch))
    pads = [(0, 0)] + [(0, max(pd_ - n, 0)) for pd_, n in zip(padded_dims, spatial)]
    padded = np.pad(inputs, pads)
    offsets = list(itertools.product(*starts))

    def run(offset: tuple) -> np.ndarray:
        window = tuple(slice(o, o + p) for o, p in zip(offset, patch))
        return np.asarray(predict(padded[(slice(None),) + window], offset), dtype=np.float64)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = pool.map(run, offsets)
            return _accumulate(offsets, results, padded_dims, patch, spatial)
    return _accumulate(offsets, map(run, offsets), padded_dims, patch, spatial)


def _accumulate(offsets, results, padded_dims, patch, spatial) -> np.ndarray:
    total = None
    counts = np.zeros(padded_dims, dtype=np.float64)
    for offset, probs in zip(offsets, results):
        if total is None:
            total = np.zeros((probs.shape[0],) + tuple(padded_dims), dtype=np.float64)
        window = tuple(slice(o, o + p) for o, p in zip(offset, patch))
        total[(slice(None),) + window] += probs
        counts[window] += 1
    crop = tuple(slice(0, n) for n in spatial)
    return total[(slice(None),) + crop] / counts[crop]


def model_predictor(model: TubuleNet, volume_dims: tuple) -> Callable:
    """predict(window, offset) for sliding_window_infer: segmentation probabilities of one window."""
    cfg = model.cfg

    def predict(window: np.ndarray, offset: tuple) -> np.ndarray:
        coords = coordinate_map(volume_dims, offset, cfg.patch_size) if cfg.use_coordinate_map else None
        with no_grad():
            out = model(Tensor(window[np.newaxis]), coords)
        return out.seg.data[0]

    return predict


def infer_volume(model: TubuleNet, channels: list, stride: int = 64,
                 lateral_stride: Optional[int] = None, threads: int = 1,
                 lung: Optional[LabelMap] = None, margin: int = 0) -> list:
    """Probability Volumes (one per output channel) on the geometry of channels[0].

    Coordinate maps are relative to the grid the network sees. Given ``lung``,
    the channels are first cropped to its bounding box grown by ``margin``;
    outside the box the output is background (probability 1 for the
    artery-vein background channel, 0 elsewhere).
    """
    ref = channels[0]
    for vol in channels[1:]:
        check_geometry(ref, vol, "inference channels")
    if lung is not None:
        check_geometry(ref, lung, "CT and lung mask")
        _, record = crop_to_mask_bbox(ref, lung, margin)
        logger.debug(f"Inference box {record.crop_dims} at {record.offset} of {record.original_dims}")
        probs = infer_volume(model, [crop(v, record) for v in channels], stride, lateral_stride, threads)
        artery_vein = model.cfg.task != "airway"
        fills = [1.0 if artery_vein and k == BACKGROUND else 0.0 for k in range(len(probs))]
        return [uncrop(p, record, fill) for p, fill in zip(probs, fills)]
    inputs = np.stack([np.asarray(v.data, dtype=np.float64) for v in channels])
    probs = sliding_window_infer(model_predictor(model, ref.dims), inputs, model.cfg.patch_size,
                                 stride, lateral_stride, threads)
    return [Volume(p.astype(np.float32), ref.spacing, ref.origin) for p in probs]
