"""
Tests for the synthetic phantom generator.
"""

import numpy as np
import pytest

from errors import DataError
from phantoms import Capsule, PhantomConfig, capsule_mask, make_phantom
from skeleton_metrics import component_count
from volume_core import ARTERY, BACKGROUND, VEIN


def brute_force_capsule(capsule: Capsule, dims, spacing) -> np.ndarray:
    """Distance from every voxel center to the capsule axis, one voxel at a time."""
    out = np.zeros(dims, dtype=bool)
    a, b = capsule.start, capsule.end
    for index in np.ndindex(*dims):
        point = np.asarray(index, dtype=np.float64) * np.asarray(spacing)
        ab = b - a
        t = 0.0 if not ab.any() else min(max(float((point - a) @ ab / (ab @ ab)), 0.0), 1.0)
        out[index] = np.sum((point - (a + t * ab)) ** 2) <= capsule.radius ** 2 + 1e-9
    return out


class TestCapsule:
    """Tests for capsule rasterization."""

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        """Test the windowed rasterizer against a per-voxel distance check."""
        rng = np.random.default_rng(seed)
        dims = (7, 8, 9)
        spacing = tuple(float(s) for s in rng.uniform(0.5, 1.5, size=3))
        capsule = Capsule(rng.uniform(-1, 8, size=3), rng.uniform(-1, 8, size=3), float(rng.uniform(0.5, 3.0)))
        np.testing.assert_array_equal(capsule_mask(capsule, dims, spacing), brute_force_capsule(capsule, dims, spacing))

    def test_degenerate_capsule_is_a_ball(self):
        """Test equal endpoints rasterize a sphere."""
        point = np.array([3.0, 3.0, 3.0])
        mask = capsule_mask(Capsule(point, point, 1.0), (7, 7, 7), (1.0, 1.0, 1.0))
        assert mask.sum() == 7

    def test_outside_grid(self):
        """Test a capsule beyond the grid marks nothing."""
        far = np.array([50.0, 50.0, 50.0])
        assert not capsule_mask(Capsule(far, far + 1, 1.0), (5, 5, 5), (1.0, 1.0, 1.0)).any()


class TestPhantomConfig:
    """Tests for phantom parameter validation."""

    @pytest.mark.parametrize("overrides", [
        {"task": "heart"},
        {"dims": (32, 32)},
        {"radius_range": (3.0, 1.0)},
        {"radius_range": (0.0, 1.0)},
        {"branch_levels": -1},
        {"noise_std": -5.0},
    ])
    def test_rejects_bad_values(self, overrides):
        """Test invalid settings are data errors."""
        with pytest.raises(DataError):
            PhantomConfig(**overrides)

    def test_tube_too_thick(self):
        """Test a tube that cannot fit the grid is refused."""
        with pytest.raises(DataError):
            make_phantom(0, PhantomConfig(dims=(8, 8, 8), radius_range=(1.0, 5.0)))


class TestAirwayPhantom:
    """Tests for airway phantoms."""

    def test_deterministic(self):
        """Test the same seed gives the same volume and labels."""
        cfg = PhantomConfig(dims=(24, 24, 24))
        ct_a, label_a = make_phantom(3, cfg)
        ct_b, label_b = make_phantom(3, cfg)
        np.testing.assert_array_equal(ct_a.data, ct_b.data)
        np.testing.assert_array_equal(label_a.data, label_b.data)
        ct_c, _ = make_phantom(4, cfg)
        assert not np.array_equal(ct_a.data, ct_c.data)

    def test_label_is_the_air(self):
        """Test without noise the label is exactly the air voxels."""
        cfg = PhantomConfig(dims=(24, 24, 24), noise_std=0.0)
        ct, label = make_phantom(1, cfg)
        assert ct.data.dtype == np.int16
        np.testing.assert_array_equal(ct.data == -1000, label.mask())
        assert set(np.unique(ct.data).tolist()) == {-1000, -200}

    @pytest.mark.parametrize("seed", range(5))
    def test_tree_is_connected(self, seed):
        """Test the branching tree is one 26-connected component."""
        _, label = make_phantom(seed, PhantomConfig(dims=(32, 32, 32), branch_levels=2))
        assert component_count(label.mask()) == 1

    def test_straight_tube(self):
        """Test zero branch levels give one tube through every slice."""
        _, label = make_phantom(0, PhantomConfig(dims=(16, 16, 16), branch_levels=0, radius_range=(2.0, 2.0)))
        mask = label.mask()
        for z in range(16):
            np.testing.assert_array_equal(mask[z], mask[0])
        assert mask[0].sum() > 0

    def test_keeps_spacing(self):
        """Test the CT and label carry the configured spacing."""
        cfg = PhantomConfig(dims=(16, 20, 20), spacing=(2.0, 1.0, 1.0))
        ct, label = make_phantom(0, cfg)
        assert ct.spacing == label.spacing == (2.0, 1.0, 1.0)


class TestArteryVeinPhantom:
    """Tests for artery-vein phantoms."""

    CFG = PhantomConfig(task="artery-vein", dims=(24, 40, 40), radius_range=(1.0, 2.0), noise_std=0.0)

    def test_labels_and_intensities(self):
        """Test vessels are contrast-bright, the companion tube is air and labels are disjoint."""
        ct, label, companion = make_phantom(2, self.CFG)
        data = label.data
        assert set(np.unique(data).tolist()) <= {BACKGROUND, ARTERY, VEIN}
        assert (data == ARTERY).any() and (data == VEIN).any()
        assert np.all(ct.data[data > 0] == 40)
        comp = companion.mask()
        assert comp.any()
        assert not (comp & (data > 0)).any()
        assert np.all(ct.data[comp] == -1000)

    def test_soft_tissue_shell(self):
        """Test the y/x faces are a soft-tissue border."""
        ct, _, _ = make_phantom(2, self.CFG)
        shell = self.CFG.shell
        assert np.all(ct.data[:, :shell, :] == 40)
        assert np.all(ct.data[:, :, -shell:] == 40)
        inner = ct.data[:, shell:-shell, shell:-shell]
        assert (inner == -850).any()

    def test_vessels_stay_off_the_shell(self):
        """Test no labeled vessel touches the border band."""
        _, label, _ = make_phantom(5, self.CFG)
        band = self.CFG.shell
        data = label.data
        assert not data[:, :band, :].any() and not data[:, -band:, :].any()
        assert not data[:, :, :band].any() and not data[:, :, -band:].any()
