#!/usr/bin/env python3
"""
Volume Core - geometric volume representation, MetaImage I/O, intensity
preprocessing and training-time augmentation.

All grids are stored z-major: ``data.shape == (dims_z, dims_y, dims_x)`` and
``spacing``/``origin`` are kept in the same (z, y, x) order. MetaImage headers
list DimSize/ElementSpacing/Offset as (x, y, z); reversing that order is done
here and nowhere else.

Usage:
    from volume_core import read_metaimage, normalize_hu, write_metaimage

    ct = read_metaimage("scan.mha")
    write_metaimage(normalize_hu(ct), "scan_norm.mha")
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from errors import DataError, MetaImageError, NumericError

logger = logging.getLogger("tubule_seg.volume_core")


# ==============================================================================
# DOMAIN TYPES
# ==============================================================================

MASK_ALPHABET = frozenset({0, 1})
CONTEXT_ALPHABET = frozenset({0, 1, 2, 3})
AV_ALPHABET = frozenset({0, 1, 2})
AV_REFERENCE_ALPHABET = frozenset({0, 1, 2, 255})

BACKGROUND, ARTERY, VEIN, NON_DETERMINED = 0, 1, 2, 255

# Volume payload types; anything else is promoted to float64
VOLUME_DTYPES = (np.dtype(np.int16), np.dtype(np.float32), np.dtype(np.float64))


def _as_triple(values, name: str, cast=float) -> tuple:
    triple = tuple(cast(v) for v in values)
    if len(triple) != 3:
        raise DataError(f"{name} must have 3 components, got {len(triple)}")
    return triple


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3-D scalar grid with physical geometry (CT, probabilities, distances)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"Volume data must be a non-empty 3-D array, got shape {data.shape}")
        if data.dtype not in VOLUME_DTYPES:
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise NumericError("Volume contains non-finite values")
        spacing = _as_triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise DataError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume":
        """New Volume with the same geometry and different voxel values."""
        return Volume(data, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """A 3-D small-integer grid (masks, context maps, artery/vein classes)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    alphabet: Optional[frozenset] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"LabelMap data must be a non-empty 3-D array, got shape {data.shape}")
        if data.dtype == np.bool_:
            data = data.astype(np.uint8)
        if data.size and (data.min() < 0 or data.max() > 255):
            raise DataError("LabelMap values must fit in an unsigned byte")
        data = data.astype(np.uint8)
        if self.alphabet is not None:
            present = set(np.unique(data).tolist())
            extra = present - set(self.alphabet)
            if extra:
                raise DataError(f"LabelMap values {sorted(extra)} outside alphabet {sorted(self.alphabet)}")
        spacing = _as_triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise DataError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape)

    def with_data(self, data: np.ndarray, alphabet: Optional[frozenset] = None) -> "LabelMap":
        return LabelMap(data, self.spacing, self.origin, alphabet)

    def mask(self) -> np.ndarray:
        """Boolean array of nonzero voxels."""
        return self.data > 0


Grid = Union[Volume, LabelMap]


@dataclass(frozen=True)
class CropRecord:
    """Where a crop came from, so results can be re-embedded exactly."""

    offset: tuple        # (z, y, x) start index in the original grid
    crop_dims: tuple     # (z, y, x) size of the crop
    original_dims: tuple


@dataclass(frozen=True)
class AugmentConfig:
    """On-the-fly augmentation parameters (flip along x, shift, smoothing, jitter)."""

    flip_prob: float = 0.5
    shift_max: tuple = (2, 8, 8)
    smooth_sigma: float = 1.0
    smooth_prob: float = 0.5
    jitter_amp: float = 0.05
    jitter_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "smooth_prob", "jitter_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DataError(f"{name} must be in [0, 1], got {value}")
        shift = _as_triple(self.shift_max, "shift_max", int)
        if min(shift) < 0:
            raise DataError(f"shift_max must be non-negative, got {shift}")
        object.__setattr__(self, "shift_max", shift)
        if self.smooth_sigma < 0 or self.jitter_amp < 0:
            raise DataError("smooth_sigma and jitter_amp must be non-negative")

    @classmethod
    def from_settings(cls, section: dict, seed: int = 0) -> "AugmentConfig":
        known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        known["seed"] = seed
        if "shift_max" in known:
            known["shift_max"] = tuple(known["shift_max"])
        return cls(**known)


def check_geometry(a: Grid, b: Grid, what: str = "grids"):
    """Raise DataError unless two grids share dims, spacing and origin."""
    if a.dims != b.dims:
        raise DataError(f"{what} have different dims: {a.dims} vs {b.dims}")
    if not (np.allclose(a.spacing, b.spacing, rtol=1e-6, atol=1e-9)
            and np.allclose(a.origin, b.origin, rtol=1e-6, atol=1e-6)):
        raise DataError(f"{what} have different spacing/origin")


# ==============================================================================
# METAIMAGE I/O
# ==============================================================================

ELEMENT_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}
DTYPE_TO_ELEMENT = {
    np.dtype(np.uint8): "MET_UCHAR",
    np.dtype(np.int16): "MET_SHORT",
    np.dtype(np.float32): "MET_FLOAT",
    np.dtype(np.float64): "MET_DOUBLE",
}
REQUIRED_KEYS = ("NDims", "DimSize", "ElementType", "ElementDataFile")


def _format_reals(values) -> str:
    # repr round-trips float64 exactly
    return " ".join(repr(float(v)) for v in values)


def _parse_header(text: str, path: Path) -> dict:
    header: dict = {}
    for raw_line in text.splitlines():
        line = raw_line.strip()
        if not line:
            continue
        if "=" not in line:
            raise MetaImageError(f"{path}: malformed header line {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in header:
            raise MetaImageError(f"{path}: duplicate header key {key}")
        header[key] = value
    for key in REQUIRED_KEYS:
        if key not in header:
            raise MetaImageError(f"{path}: missing required header key {key}")
    return header


def _split_header(raw: bytes, path: Path) -> tuple[str, bytes]:
    marker = raw.find(b"ElementDataFile")
    if marker < 0:
        raise MetaImageError(f"{path}: missing required header key ElementDataFile")
    end = raw.find(b"\n", marker)
    if end < 0:
        return raw.decode("ascii", errors="replace"), b""
    try:
        text = raw[: end + 1].decode("ascii")
    except UnicodeDecodeError as e:
        raise MetaImageError(f"{path}: header is not ASCII text") from e
    return text, raw[end + 1:]


def _read_raw(path: Path) -> tuple[dict, np.ndarray]:
    """Parse a MetaImage file; return (header, array in z,y,x[,c] order)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e

    text, payload = _split_header(raw, path)
    header = _parse_header(text, path)

    if int(header["NDims"]) != 3:
        raise MetaImageError(f"{path}: only NDims = 3 is supported")
    if header.get("CompressedData", "False").lower() == "true":
        raise MetaImageError(f"{path}: compressed payloads are not supported")

    element = header["ElementType"]
    if element not in ELEMENT_TYPES:
        raise MetaImageError(f"{path}: unsupported ElementType {element}")
    dtype = ELEMENT_TYPES[element]
    if header.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        dtype = dtype.newbyteorder(">")

    try:
        dim_xyz = [int(v) for v in header["DimSize"].split()]
        spacing_xyz = [float(v) for v in header.get("ElementSpacing", "1 1 1").split()]
        offset_xyz = [float(v) for v in header.get("Offset", "0 0 0").split()]
        channels = int(header.get("ElementNumberOfChannels", "1"))
    except ValueError as e:
        raise MetaImageError(f"{path}: non-numeric geometry field ({e})") from e
    if len(dim_xyz) != 3 or min(dim_xyz) < 1:
        raise MetaImageError(f"{path}: DimSize must be 3 positive integers")
    if len(spacing_xyz) != 3 or min(spacing_xyz) <= 0:
        raise MetaImageError(f"{path}: ElementSpacing must be 3 positive reals")
    if len(offset_xyz) != 3:
        raise MetaImageError(f"{path}: Offset must have 3 components")

    data_file = header["ElementDataFile"]
    if data_file != "LOCAL":
        try:
            payload = (path.parent / data_file).read_bytes()
        except OSError as e:
            raise DataError(f"{path}: cannot read data file {data_file}: {e}") from e

    count = dim_xyz[0] * dim_xyz[1] * dim_xyz[2] * channels
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise MetaImageError(
            f"{path}: data byte count {len(payload)} does not match "
            f"DimSize x sizeof({element}) = {expected}"
        )

    shape = (dim_xyz[2], dim_xyz[1], dim_xyz[0]) + ((channels,) if channels > 1 else ())
    array = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    header["_spacing"] = tuple(reversed(spacing_xyz))
    header["_origin"] = tuple(reversed(offset_xyz))
    return header, array


def read_metaimage(path: Union[str, Path]) -> Grid:
    """Read a MetaImage file: MET_UCHAR -> LabelMap, other types -> Volume."""
    header, array = _read_raw(Path(path))
    if array.ndim != 3:
        raise MetaImageError(f"{path}: multi-channel file; use read_probability_stack")
    if header["ElementType"] == "MET_UCHAR":
        return LabelMap(array, header["_spacing"], header["_origin"])
    return Volume(array, header["_spacing"], header["_origin"])


def _header_bytes(dims_zyx, spacing_zyx, origin_zyx, element: str, channels: int = 1) -> bytes:
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "DimSize = " + " ".join(str(int(d)) for d in reversed(dims_zyx)),
        "ElementSpacing = " + _format_reals(reversed(spacing_zyx)),
        "Offset = " + _format_reals(reversed(origin_zyx)),
    ]
    if channels > 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    lines += [f"ElementType = {element}", "ElementDataFile = LOCAL"]
    return ("\n".join(lines) + "\n").encode("ascii")


def write_metaimage(grid: Grid, path: Union[str, Path]):
    """Write a grid as a single-file MetaImage with a LOCAL little-endian payload."""
    data = np.asarray(grid.data)
    if not np.all(np.isfinite(data)):
        raise NumericError("refusing to write a grid with non-finite values")
    element = DTYPE_TO_ELEMENT.get(data.dtype)
    if element is None:
        raise DataError(f"unsupported voxel dtype {data.dtype}")
    payload = np.ascontiguousarray(data, dtype=ELEMENT_TYPES[element]).tobytes()
    header = _header_bytes(grid.dims, grid.spacing, grid.origin, element)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
    logger.debug(f"Wrote {element} grid {grid.dims} to {path}")


def write_probability_stack(volumes: list, path: Union[str, Path]):
    """Write same-geometry probability volumes as one multi-channel MET_FLOAT file."""
    if not volumes:
        raise DataError("probability stack is empty")
    for other in volumes[1:]:
        check_geometry(volumes[0], other, "probability channels")
    stack = np.stack([np.asarray(v.data, dtype=np.float32) for v in volumes], axis=-1)
    if not np.all(np.isfinite(stack)):
        raise NumericError("refusing to write a stack with non-finite values")
    first = volumes[0]
    header = _header_bytes(first.dims, first.spacing, first.origin, "MET_FLOAT", len(volumes))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(stack, dtype="<f4").tobytes())


def read_probability_stack(path: Union[str, Path]) -> list:
    """Read a (possibly multi-channel) file as a list of per-channel Volumes."""
    header, array = _read_raw(Path(path))
    if header["ElementType"] == "MET_UCHAR":
        raise MetaImageError(f"{path}: probability stacks must be real-valued")
    if array.ndim == 3:
        array = array[..., np.newaxis]
    return [Volume(array[..., c], header["_spacing"], header["_origin"]) for c in range(array.shape[-1])]


# ==============================================================================
# PREPROCESSING
# ==============================================================================

def normalize_hu(ct: Volume, lo: float = -1000.0, hi: float = 400.0) -> Volume:
    """Clamp to the HU window [lo, hi] and map linearly onto [0, 1]."""
    if lo >= hi:
        raise DataError(f"HU window requires lo < hi, got [{lo}, {hi}]")
    values = np.clip(ct.data.astype(np.float64), lo, hi)
    return ct.with_data(((values - lo) / (hi - lo)).astype(np.float32))


def mask_bbox(mask: np.ndarray) -> tuple[tuple, tuple]:
    """Tight (start, stop) index bounds of the nonzero voxels."""
    coords = np.argwhere(mask)
    if coords.size == 0:
        raise DataError("mask is empty")
    return tuple(int(v) for v in coords.min(axis=0)), tuple(int(v) + 1 for v in coords.max(axis=0))


def crop(grid: Grid, record: CropRecord) -> Grid:
    """Cut the region described by a CropRecord out of a grid."""
    if grid.dims != record.original_dims:
        raise DataError(f"grid dims {grid.dims} do not match crop source {record.original_dims}")
    slices = tuple(slice(o, o + n) for o, n in zip(record.offset, record.crop_dims))
    origin = tuple(o + i * s for o, i, s in zip(grid.origin, record.offset, grid.spacing))
    if isinstance(grid, LabelMap):
        return LabelMap(grid.data[slices], grid.spacing, origin, grid.alphabet)
    return Volume(grid.data[slices], grid.spacing, origin)


def crop_to_mask_bbox(vol: Volume, mask: LabelMap, margin: int = 0) -> tuple[Volume, CropRecord]:
    """Crop to the bounding box of mask > 0 grown by ``margin`` voxels (clipped)."""
    if margin < 0:
        raise DataError(f"margin must be non-negative, got {margin}")
    check_geometry(vol, mask, "volume and mask")
    start, stop = mask_bbox(mask.mask())
    start = tuple(max(0, s - margin) for s in start)
    stop = tuple(min(d, e + margin) for d, e in zip(vol.dims, stop))
    record = CropRecord(offset=start, crop_dims=tuple(e - s for s, e in zip(start, stop)), original_dims=vol.dims)
    return crop(vol, record), record


def uncrop(grid: Grid, record: CropRecord, fill: float = 0) -> Grid:
    """Embed a cropped grid back into its original geometry."""
    if grid.dims != record.crop_dims:
        raise DataError(f"grid dims {grid.dims} do not match crop dims {record.crop_dims}")
    full = np.full(record.original_dims, fill, dtype=grid.data.dtype)
    slices = tuple(slice(o, o + n) for o, n in zip(record.offset, record.crop_dims))
    full[slices] = grid.data
    origin = tuple(o - i * s for o, i, s in zip(grid.origin, record.offset, grid.spacing))
    if isinstance(grid, LabelMap):
        return LabelMap(full, grid.spacing, origin, grid.alphabet)
    return Volume(full, grid.spacing, origin)


# ==============================================================================
# AUGMENTATION
# ==============================================================================

def _shift(array: np.ndarray, shifts, fill=0) -> np.ndarray:
    """Integer translation with constant fill (no wrap-around)."""
    out = np.full_like(array, fill)
    src, dst = [], []
    for s, n in zip(shifts, array.shape):
        if s >= 0:
            src.append(slice(0, n - s))
            dst.append(slice(s, n))
        else:
            src.append(slice(-s, n))
            dst.append(slice(0, n + s))
    out[tuple(dst)] = array[tuple(src)]
    return out


def augment(vol: Volume, label: LabelMap, cfg: AugmentConfig) -> tuple[Volume, LabelMap]:
    """Apply one random augmentation draw; a fixed cfg.seed gives a fixed result."""
    check_geometry(vol, label, "volume and label")
    if any(m >= d for m, d in zip(cfg.shift_max, vol.dims)):
        raise DataError(f"shift_max {cfg.shift_max} must be smaller than dims {vol.dims}")

    rng = np.random.default_rng(cfg.seed)
    # Draw every random quantity unconditionally so the stream layout is fixed
    do_flip = rng.random() < cfg.flip_prob
    shifts = tuple(int(rng.integers(-m, m + 1)) for m in cfg.shift_max)
    do_smooth = rng.random() < cfg.smooth_prob
    do_jitter = rng.random() < cfg.jitter_prob
    noise = rng.uniform(-cfg.jitter_amp, cfg.jitter_amp, size=vol.dims)

    values = vol.data.astype(np.float64)
    labels = label.data
    if do_flip:
        values = values[:, :, ::-1]
        labels = labels[:, :, ::-1]
    if any(shifts):
        values = _shift(values, shifts, 0.0)
        labels = _shift(labels, shifts, 0)

    touched = False
    if do_smooth and cfg.smooth_sigma > 0:
        values = ndimage.gaussian_filter(values, cfg.smooth_sigma, truncate=3.0, mode="constant", cval=0.0)
        touched = True
    if do_jitter and cfg.jitter_amp > 0:
        values = values + noise
        touched = True
    if touched:
        values = np.clip(values, 0.0, 1.0)

    out_vol = vol.with_data(values.astype(vol.data.dtype if vol.data.dtype != np.int16 else np.float32))
    out_label = label.with_data(np.ascontiguousarray(labels), label.alphabet)
    return out_vol, out_label


def augment_config_for(cfg: AugmentConfig, epoch: int, index: int) -> AugmentConfig:
    """Derive the per-sample config used inside the training loop."""
    seed = int(np.random.SeedSequence([cfg.seed, epoch, index]).generate_state(1, dtype=np.uint64)[0])
    return replace(cfg, seed=seed)
