#!/usr/bin/env python3
"""
Preview - PNG snapshots of one axial slice, for eyeballing inputs and
predictions without a viewer.

Usage:
    save_slice_preview(ct, "slice.png", label=pred, z=40)
"""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from errors import DataError
from volume_core import LabelMap, Volume, check_geometry

logger = logging.getLogger("tubule_seg.preview")

# Overlay colors per label value (RGB); unlisted nonzero values use the last entry
LABEL_COLORS = {
    1: (220, 40, 40),      # airway / artery
    2: (40, 90, 230),      # vein / lung field
    3: (40, 200, 90),
    255: (230, 200, 40),   # non-determined
}
DEFAULT_COLOR = (230, 200, 40)


def window_slice(values: np.ndarray, level: float = -600.0, width: float = 1500.0) -> np.ndarray:
    """Map a 2-D slice to uint8 with a CT display window."""
    lo = level - width / 2.0
    scaled = (np.asarray(values, dtype=np.float64) - lo) / width
    return np.rint(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_slice(vol: Volume, z: Optional[int] = None, label: Optional[LabelMap] = None,
                 level: float = -600.0, width: float = 1500.0, opacity: float = 0.5) -> Image.Image:
    """RGB image of axial slice z (default: middle), with label colors blended on top."""
    z = vol.dims[0] // 2 if z is None else z
    if not 0 <= z < vol.dims[0]:
        raise DataError(f"slice {z} outside 0..{vol.dims[0] - 1}")
    if not 0.0 <= opacity <= 1.0:
        raise DataError(f"opacity must be in [0, 1], got {opacity}")
    gray = window_slice(vol.data[z], level, width)
    rgb = np.repeat(gray[..., np.newaxis], 3, axis=-1).astype(np.float64)
    if label is not None:
        check_geometry(vol, label, "preview volume and label")
        plane = label.data[z]
        for value in np.unique(plane[plane > 0]):
            color = np.asarray(LABEL_COLORS.get(int(value), DEFAULT_COLOR), dtype=np.float64)
            hit = plane == value
            rgb[hit] = (1.0 - opacity) * rgb[hit] + opacity * color
    return Image.fromarray(np.rint(rgb).astype(np.uint8))


def save_slice_preview(vol: Volume, path: Union[str, Path], z: Optional[int] = None,
                       label: Optional[LabelMap] = None, **kwargs) -> Path:
    path = Path(path)
    render_slice(vol, z, label, **kwargs).save(path, format="PNG")
    logger.debug(f"Wrote slice preview {path}")
    return path
