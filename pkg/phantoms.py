#!/usr/bin/env python3
"""
Phantoms - seeded synthetic CT volumes with exactly known tubular labels.

An airway phantom is a binary tree of capsules (cylinders with rounded
ends) of air (-1000 HU) inside parenchyma. An artery-vein phantom holds two
interleaved trees of contrast-filled vessels on a lung background, wrapped
in a soft-tissue shell, plus an air-filled companion tube running beside the
artery tree.
"""

import logging
from dataclasses import dataclass

import numpy as np

from errors import DataError
from volume_core import ARTERY, AV_ALPHABET, MASK_ALPHABET, VEIN, LabelMap, Volume

logger = logging.getLogger("tubule_seg.phantoms")


@dataclass(frozen=True)
class PhantomConfig:
    task: str = "airway"                 # airway, artery-vein
    dims: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    branch_levels: int = 2               # 0 = one straight tube along z
    radius_range: tuple = (1.0, 3.0)     # mm, (thinnest, root)
    noise_std: float = 20.0              # HU
    air_hu: float = -1000.0
    parenchyma_hu: float = -200.0
    lung_hu: float = -850.0
    vessel_hu: float = 40.0
    shell: int = 2                       # soft-tissue voxels on the y/x faces (artery-vein only)

    def __post_init__(self):
        if self.task not in ("airway", "artery-vein"):
            raise DataError(f"Unknown phantom task {self.task!r}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise DataError(f"phantom dims must be 3 positive ints, got {self.dims}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise DataError(f"radius_range must satisfy 0 < min <= max, got {self.radius_range}")
        if self.branch_levels < 0 or self.noise_std < 0:
            raise DataError("branch_levels and noise_std must be non-negative")


@dataclass(frozen=True)
class Capsule:
    start: np.ndarray   # physical (z, y, x), mm
    end: np.ndarray
    radius: float


def capsule_mask(capsule: Capsule, dims: tuple, spacing: tuple) -> np.ndarray:
    """Voxels whose centers lie within radius of the capsule's axis segment."""
    spacing_arr = np.asarray(spacing, dtype=np.float64)
    lo = np.maximum(np.floor((np.minimum(capsule.start, capsule.end) - capsule.radius) / spacing_arr).astype(int), 0)
    hi = np.minimum(np.ceil((np.maximum(capsule.start, capsule.end) + capsule.radius) / spacing_arr).astype(int) + 1, dims)
    mask = np.zeros(dims, dtype=bool)
    if np.any(hi <= lo):
        return mask
    grid = np.stack(np.meshgrid(*[np.arange(a, b) * s for a, b, s in zip(lo, hi, spacing_arr)], indexing="ij"), axis=-1)
    axis = capsule.end - capsule.start
    length_sq = float(axis @ axis)
    if length_sq == 0:
        t = np.zeros(grid.shape[:-1])
    else:
        t = np.clip(((grid - capsule.start) @ axis) / length_sq, 0.0, 1.0)
    nearest = capsule.start + t[..., np.newaxis] * axis
    dist_sq = ((grid - nearest) ** 2).sum(axis=-1)
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = dist_sq <= capsule.radius ** 2 + 1e-9
    return mask


def _perpendicular(rng: np.random.Generator, direction: np.ndarray) -> np.ndarray:
    v = rng.normal(size=3)
    v -= (v @ direction) * direction
    norm = np.linalg.norm(v)
    if norm < 1e-9:
        v = np.array([0.0, 1.0, 0.0]) if abs(direction[1]) < 0.9 else np.array([0.0, 0.0, 1.0])
        v -= (v @ direction) * direction
        norm = np.linalg.norm(v)
    return v / norm


def grow_tree(rng: np.random.Generator, start: np.ndarray, direction: np.ndarray, length: float,
              radius: float, levels: int, min_radius: float, low: np.ndarray, high: np.ndarray) -> list:
    """Capsules of a random binary tree; every endpoint stays inside [low + r, high - r]."""
    capsules = []
    stack = [(start, direction, length, radius, 0)]
    while stack:
        s, d, length_mm, r, level = stack.pop(0)
        end = np.clip(s + d * length_mm, low + r, high - r)
        capsules.append(Capsule(s, end, r))
        if level >= levels:
            continue
        child_radius = max(r * 0.75, min_radius)
        for sign in (1.0, -1.0):
            theta = np.deg2rad(rng.uniform(25.0, 45.0))
            child = np.cos(theta) * d + sign * np.sin(theta) * _perpendicular(rng, d)
            stack.append((end, child / np.linalg.norm(child), length_mm * 0.7, child_radius, level + 1))
    return capsules


def _rasterize(capsules: list, dims: tuple, spacing: tuple) -> np.ndarray:
    mask = np.zeros(dims, dtype=bool)
    for capsule in capsules:
        mask |= capsule_mask(capsule, dims, spacing)
    return mask


def _tree(rng: np.random.Generator, cfg: PhantomConfig, root_yx: np.ndarray,
          low: np.ndarray, high: np.ndarray) -> list:
    min_radius, max_radius = cfg.radius_range
    extent = high - low
    if cfg.branch_levels == 0:
        start = np.array([0.0, root_yx[0], root_yx[1]])
        end = np.array([(cfg.dims[0] - 1) * cfg.spacing[0], root_yx[0], root_yx[1]])
        return [Capsule(start, end, max_radius)]
    start = np.array([low[0] + max_radius, root_yx[0], root_yx[1]])
    return grow_tree(rng, start, np.array([1.0, 0.0, 0.0]), 0.4 * extent[0], max_radius,
                     cfg.branch_levels, min_radius, low, high)


def _check_fit(cfg: PhantomConfig, low: np.ndarray, high: np.ndarray, tubes: int = 1):
    extent = high - low
    needed = 2.0 * cfg.radius_range[1] * tubes + cfg.spacing[2] * (tubes - 1)
    if min(extent[1], extent[2]) < needed or extent[0] < 2.0 * cfg.radius_range[1]:
        raise DataError(f"tubes of radius {cfg.radius_range[1]} mm do not fit a {cfg.dims} grid")


def _finish_ct(rng: np.random.Generator, hu: np.ndarray, cfg: PhantomConfig) -> Volume:
    if cfg.noise_std > 0:
        hu = hu + rng.normal(0.0, cfg.noise_std, size=hu.shape)
    return Volume(np.clip(np.rint(hu), -32768, 32767).astype(np.int16), cfg.spacing)


def make_phantom(seed: int, cfg: PhantomConfig) -> tuple:
    """(ct, airway label) or (ct, artery-vein label, companion airway label); deterministic per seed."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(n) for n in cfg.dims)
    spacing = np.asarray(cfg.spacing, dtype=np.float64)
    top = (np.asarray(dims) - 1) * spacing

    if cfg.task == "airway":
        low, high = np.zeros(3), top
        _check_fit(cfg, low, high)
        capsules = _tree(rng, cfg, top[1:] / 2.0, low, high)
        airway = _rasterize(capsules, dims, cfg.spacing)
        hu = np.where(airway, cfg.air_hu, cfg.parenchyma_hu)
        logger.debug(f"Airway phantom seed={seed}: {len(capsules)} capsules, {int(airway.sum())} voxels")
        return _finish_ct(rng, hu, cfg), LabelMap(airway, cfg.spacing, alphabet=MASK_ALPHABET)

    inset = (cfg.shell + 1) * spacing
    inset[0] = 0.0
    low, high = inset, top - inset
    _check_fit(cfg, low, high, tubes=3)
    center = (low[1:] + high[1:]) / 2.0
    quarter = (high[2] - low[2]) / 4.0
    artery_caps = _tree(rng, cfg, center + np.array([0.0, -quarter]), low, high)
    vein_caps = _tree(rng, cfg, center + np.array([0.0, quarter]), low, high)

    # the companion airway follows the artery tree at a fixed lateral offset
    offset = np.array([0.0, 0.0, 2.0 * cfg.radius_range[1] + spacing[2]])
    companion_caps = [
        Capsule(np.clip(c.start + offset, low + c.radius, high - c.radius),
                np.clip(c.end + offset, low + c.radius, high - c.radius), c.radius)
        for c in artery_caps
    ]
    artery = _rasterize(artery_caps, dims, cfg.spacing)
    vein = _rasterize(vein_caps, dims, cfg.spacing) & ~artery
    companion = _rasterize(companion_caps, dims, cfg.spacing) & ~(artery | vein)

    labels = np.zeros(dims, dtype=np.uint8)
    labels[artery] = ARTERY
    labels[vein] = VEIN
    hu = np.full(dims, cfg.lung_hu)
    hu[artery | vein] = cfg.vessel_hu
    hu[companion] = cfg.air_hu
    if cfg.shell > 0:
        hu[:, :cfg.shell, :] = cfg.vessel_hu
        hu[:, -cfg.shell:, :] = cfg.vessel_hu
        hu[:, :, :cfg.shell] = cfg.vessel_hu
        hu[:, :, -cfg.shell:] = cfg.vessel_hu
    logger.debug(f"Artery-vein phantom seed={seed}: {int(artery.sum())} artery, {int(vein.sum())} vein voxels")
    return (
        _finish_ct(rng, hu, cfg),
        LabelMap(labels, cfg.spacing, alphabet=AV_ALPHABET),
        LabelMap(companion, cfg.spacing, alphabet=MASK_ALPHABET),
    )
