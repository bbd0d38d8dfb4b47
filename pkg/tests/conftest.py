"""
Pytest configuration and shared fixtures for the tubule segmentation tests.
"""

import logging
import sys
import tempfile
from pathlib import Path
from typing import Generator

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from autodiff import precision  # noqa: E402
from volume_core import MASK_ALPHABET, LabelMap, Volume  # noqa: E402


@pytest.fixture
def temp_dir() -> Generator[Path, None, None]:
    """Create a temporary directory for test files."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator so every run draws the same cases."""
    return np.random.default_rng(20240611)


@pytest.fixture
def f64():
    """Build tensors in float64 for the duration of a test."""
    with precision("f64"):
        yield


@pytest.fixture
def small_ct(rng: np.random.Generator) -> Volume:
    """A 6x7x8 int16 CT with anisotropic spacing and a non-zero origin."""
    data = rng.integers(-1024, 400, size=(6, 7, 8)).astype(np.int16)
    return Volume(data, spacing=(2.5, 0.7, 0.8), origin=(-10.0, 3.5, 0.25))


@pytest.fixture
def tube_label() -> LabelMap:
    """A straight 3x3 tube along z through the middle of a 12^3 grid."""
    data = np.zeros((12, 12, 12), dtype=np.uint8)
    data[1:11, 5:8, 5:8] = 1
    return LabelMap(data, alphabet=MASK_ALPHABET)


@pytest.fixture(autouse=True)
def _quiet_logging():
    """Keep library loggers from propagating handlers between tests."""
    yield
    logging.getLogger("tubule_seg").handlers.clear()
