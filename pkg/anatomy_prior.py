#!/usr/bin/env python3
"""
Anatomy Prior - lung segmentation, airway-wall extraction, lung context map
and distance transform map for artery-vein segmentation.

Pipeline (see build_anatomy_prior):
1. segment_lungs: Otsu binarization, removal of exterior air, two largest
   26-connected components, hole filling, slice-wise convex hull
2. extract_airway_wall: dilation of the lumen by an 18-neighborhood sphere
   (radius 1.5 voxels) minus the lumen
3. context map {0 outside, 1 lumen, 2 wall, 3 lung} and the Euclidean
   distance (mm) to the nearest wall voxel, zeroed outside the lung
"""

import logging
import math

import numpy as np
from scipy import ndimage
from skimage.morphology import convex_hull_image

from errors import DataError
from volume_core import CONTEXT_ALPHABET, MASK_ALPHABET, LabelMap, Volume, check_geometry

logger = logging.getLogger("tubule_seg.anatomy_prior")

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)

# Context map classes
OUTSIDE, LUMEN, WALL, LUNG_FIELD = 0, 1, 2, 3


def sphere_element(radius: float = 1.5) -> np.ndarray:
    """Structuring element of all integer offsets with Euclidean norm <= radius."""
    r = int(math.floor(radius))
    grid = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1]
    return (grid ** 2).sum(axis=0) <= radius * radius


# ==============================================================================
# LUNG SEGMENTATION
# ==============================================================================

def otsu_threshold(vol: Volume, bins: int = 256) -> float:
    """Bin-edge threshold maximizing between-class variance (ties -> lower edge).

    Voxels strictly below the returned value form the low class.
    """
    if bins < 2:
        raise DataError(f"bins must be at least 2, got {bins}")
    values = np.asarray(vol.data, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        raise DataError("constant volume has no separable intensity classes")

    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    total = counts.sum()

    # split k puts bins [0, k) in the low class, k = 1 .. bins-1
    w0 = np.cumsum(counts)[:-1] / total
    w1 = 1.0 - w0
    cum_mass = np.cumsum(counts * centers)[:-1]
    mu_total = (counts * centers).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = cum_mass / (w0 * total)
        mu1 = (mu_total - cum_mass) / (w1 * total)
        between = w0 * w1 * (mu0 - mu1) ** 2
    between = np.where((w0 > 0) & (w1 > 0), between, -1.0)
    k = int(np.argmax(between)) + 1
    return float(edges[k])


def _fill_holes(mask: np.ndarray) -> np.ndarray:
    """Fill background pockets not connected to the border: per z-slice, then in 3-D."""
    filled = np.empty_like(mask)
    for z in range(mask.shape[0]):
        filled[z] = ndimage.binary_fill_holes(mask[z])
    return ndimage.binary_fill_holes(filled)


def _segment_lattice_points(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    step = q - p
    g = math.gcd(int(abs(step[0])), int(abs(step[1])))
    if g == 0:
        return p[np.newaxis]
    unit = step // g
    return p + np.arange(g + 1)[:, np.newaxis] * unit


def slice_convex_hull(mask2d: np.ndarray) -> np.ndarray:
    """2-D convex hull of pixel centers, including pixels on the hull boundary."""
    coords = np.argwhere(mask2d)
    if len(coords) == 0:
        return np.zeros_like(mask2d, dtype=bool)
    centered = coords - coords.mean(axis=0)
    if len(coords) < 3 or np.linalg.matrix_rank(centered) < 2:
        # collinear: the hull is the segment between the extreme pixels
        order = np.lexsort((coords[:, 1], coords[:, 0]))
        points = _segment_lattice_points(coords[order[0]], coords[order[-1]])
        hull = np.zeros_like(mask2d, dtype=bool)
        hull[points[:, 0], points[:, 1]] = True
        return hull
    return convex_hull_image(mask2d, offset_coordinates=False)


def segment_lungs(ct_normalized: Volume) -> LabelMap:
    """Binary lung mask from a HU-windowed, [0, 1]-normalized CT volume."""
    threshold = otsu_threshold(ct_normalized)
    low = np.asarray(ct_normalized.data) < threshold

    labels, count = ndimage.label(low, structure=CONNECTIVITY_26)
    if count == 0:
        raise DataError("no low-intensity region found")

    # components touching the y/x faces are air outside the body
    exterior = np.unique(np.concatenate([
        labels[:, 0, :].ravel(), labels[:, -1, :].ravel(),
        labels[:, :, 0].ravel(), labels[:, :, -1].ravel(),
    ]))
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    sizes[0] = 0
    sizes[exterior] = 0
    candidates = [int(i) for i in np.argsort(sizes, kind="stable")[::-1][:2] if sizes[i] > 0]
    if not candidates:
        raise DataError("no low-intensity component inside the body; cannot separate lungs from exterior air")
    logger.debug(f"Otsu threshold {threshold:.4f}; lung components {[int(sizes[c]) for c in candidates]}")

    lungs = np.zeros(low.shape, dtype=bool)
    for component in candidates:
        filled = _fill_holes(labels == component)
        # one hull per lung and slice so the mediastinum is never bridged
        for z in range(filled.shape[0]):
            if filled[z].any():
                lungs[z] |= slice_convex_hull(filled[z])

    return LabelMap(lungs, ct_normalized.spacing, ct_normalized.origin, MASK_ALPHABET)


# ==============================================================================
# AIRWAY WALL AND DISTANCE MAP
# ==============================================================================

def dilate(mask: np.ndarray, radius: float = 1.5) -> np.ndarray:
    """Binary dilation with a spherical structuring element (border stays 0)."""
    return ndimage.binary_dilation(mask, structure=sphere_element(radius))


def extract_airway_wall(lumen: LabelMap, radius: float = 1.5) -> LabelMap:
    """Airway wall = dilate(lumen) minus lumen."""
    inside = lumen.mask()
    wall = dilate(inside, radius) & ~inside
    return lumen.with_data(wall, MASK_ALPHABET)


def _envelope_pass(f: np.ndarray, spacing: float) -> np.ndarray:
    """Exact 1-D squared distance transform of every row of f (lower envelope of parabolas).

    All rows are processed in lockstep; each row keeps its own envelope stack.
    """
    rows_count, n = f.shape
    if n == 1:
        return f.copy()
    s2 = spacing * spacing
    rows = np.arange(rows_count)
    v = np.zeros((rows_count, n), dtype=np.int64)
    z = np.empty((rows_count, n + 1), dtype=np.float64)
    z[:, 0] = -np.inf
    z[:, 1] = np.inf
    k = np.zeros(rows_count, dtype=np.int64)

    def intersection(q: int) -> np.ndarray:
        vk = v[rows, k]
        return ((f[:, q] + s2 * q * q) - (f[rows, vk] + s2 * vk * vk)) / (2.0 * s2 * (q - vk))

    for q in range(1, n):
        active = np.ones(rows_count, dtype=bool)
        s = intersection(q)
        while True:
            pop = active & (s <= z[rows, k])
            if not pop.any():
                break
            k = np.where(pop, k - 1, k)
            s = intersection(q)
            active = pop
        k = k + 1
        v[rows, k] = q
        z[rows, k] = s
        z[rows, k + 1] = np.inf

    out = np.empty_like(f)
    k = np.zeros(rows_count, dtype=np.int64)
    for q in range(n):
        while True:
            advance = z[rows, k + 1] < q
            if not advance.any():
                break
            k = np.where(advance, k + 1, k)
        vk = v[rows, k]
        out[:, q] = s2 * (q - vk) ** 2 + f[rows, vk]
    return out


def squared_distance_transform(seed: np.ndarray, spacing) -> np.ndarray:
    """Exact squared Euclidean distance (physical units) to the nearest True voxel."""
    if not seed.any():
        raise DataError("distance transform needs a non-empty seed set")
    extent = sum((n * s) ** 2 for n, s in zip(seed.shape, spacing))
    # finite stand-in for "no seed on this line", larger than any real value
    far = 4.0 * extent + 1.0
    sq = np.where(seed, 0.0, far)
    for axis in (2, 1, 0):
        moved = np.moveaxis(sq, axis, -1)
        shape = moved.shape
        passed = _envelope_pass(np.ascontiguousarray(moved).reshape(-1, shape[-1]), float(spacing[axis]))
        sq = np.moveaxis(passed.reshape(shape), -1, axis)
    return sq


def euclidean_distance_map(seed: LabelMap) -> Volume:
    """Euclidean distance in mm from every voxel to the nearest seed voxel."""
    sq = squared_distance_transform(seed.mask(), seed.spacing)
    return Volume(np.sqrt(sq), seed.spacing, seed.origin)


def build_anatomy_prior(ct: Volume, airway_lumen: LabelMap, lung: LabelMap) -> tuple[LabelMap, Volume]:
    """Lung context map and wall-distance map for one scan."""
    check_geometry(ct, airway_lumen, "CT and airway lumen")
    check_geometry(ct, lung, "CT and lung mask")
    lumen = airway_lumen.mask()
    if not lumen.any():
        raise DataError("airway lumen is empty; the distance map is undefined")
    for name, grid in (("airway lumen", airway_lumen), ("lung mask", lung)):
        if grid.data.max() > 1:
            raise DataError(f"{name} must be binary")

    wall_map = extract_airway_wall(airway_lumen)
    wall = wall_map.mask()
    if not wall.any():
        raise DataError("airway wall is empty (lumen fills the volume)")
    lung_mask = lung.mask()

    context = np.zeros(ct.dims, dtype=np.uint8)
    context[lung_mask] = LUNG_FIELD
    context[wall] = WALL
    context[lumen] = LUMEN

    distance = euclidean_distance_map(wall_map).data * lung_mask
    return (
        LabelMap(context, ct.spacing, ct.origin, CONTEXT_ALPHABET),
        Volume(distance.astype(np.float32), ct.spacing, ct.origin),
    )
