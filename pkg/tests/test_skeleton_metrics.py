"""
Tests for the skeleton metrics module.
"""

import numpy as np
import pandas as pd
import pytest
from scipy import ndimage

from anatomy_prior import sphere_element
from errors import DataError
from skeleton_metrics import (
    AIRWAY_COLUMNS,
    AVScanScores,
    AirwayScores,
    aggregate_airway_scores,
    aggregate_av_scores,
    airway_scores,
    av_scores,
    build_skeleton_graph,
    component_count,
    error_breakdown,
    format_report,
    prune_spurs,
    skeletonize,
    threshold_at_fpr,
    write_metric_table,
)
from volume_core import ARTERY, BACKGROUND, MASK_ALPHABET, NON_DETERMINED, VEIN, LabelMap, Volume

SHAPE = (10, 11, 11)
STEM = [(z, 5, 5) for z in range(5)]
ARM_LEFT = [(4, 5, 5)] + [(4 + k, 5, 5 - k) for k in range(1, 5)]
ARM_RIGHT = [(4, 5, 5)] + [(4 + k, 5, 5 + k) for k in range(1, 5)]
Y_BRANCHES = [STEM, ARM_LEFT, ARM_RIGHT]


def y_centerline() -> np.ndarray:
    mask = np.zeros(SHAPE, dtype=bool)
    for branch in Y_BRANCHES:
        for v in branch:
            mask[v] = True
    return mask


def y_airway() -> np.ndarray:
    return ndimage.binary_dilation(y_centerline(), structure=sphere_element(1.5))


def line_mask(shape, axis_index: tuple) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[axis_index] = True
    return mask


def oracle_tree_detection(branches, covered, keep, spacing=(1.0, 1.0, 1.0)):
    """Branch and length detection counted directly from hand-listed branch paths."""
    detected = counted = 0
    l_seg = l_ref = 0.0
    for path in branches:
        kept = [v for v in path if keep[v]]
        if kept:
            counted += 1
            detected += any(covered[v] for v in kept)
        for a, b in zip(path[:-1], path[1:]):
            step = float(np.sqrt(sum(((p - q) * s) ** 2 for p, q, s in zip(a, b, spacing))))
            for v in (a, b):
                if keep[v]:
                    l_ref += 0.5 * step
                    l_seg += 0.5 * step * bool(covered[v])
    return 100.0 * detected / counted, 100.0 * l_seg / l_ref


class TestSkeletonize:
    """Tests for 3-D thinning."""

    @pytest.mark.parametrize("seed", range(30))
    def test_thinning_properties(self, seed):
        """Test the centerline is a thin subset with the same component count."""
        rng = np.random.default_rng(seed)
        shape = tuple(int(n) for n in rng.integers(6, 17, size=3))
        blob = ndimage.gaussian_filter(rng.random(shape), 1.5) > rng.uniform(0.5, 0.52)
        label = LabelMap(blob)
        thin = skeletonize(label).mask()
        assert not (thin & ~blob).any()
        assert component_count(thin) == component_count(blob)
        m = thin.astype(np.uint8)
        cubes = (m[:-1, :-1, :-1] & m[1:, :-1, :-1] & m[:-1, 1:, :-1] & m[:-1, :-1, 1:]
                 & m[1:, 1:, :-1] & m[1:, :-1, 1:] & m[:-1, 1:, 1:] & m[1:, 1:, 1:])
        assert not cubes.any()

    def test_empty_mask(self):
        """Test an empty mask thins to nothing."""
        assert skeletonize(LabelMap(np.zeros((3, 3, 3), dtype=np.uint8))).data.sum() == 0

    def test_keeps_geometry(self):
        """Test spacing and origin carry over."""
        label = LabelMap(y_airway(), spacing=(0.5, 0.6, 0.7), origin=(1.0, 2.0, 3.0))
        thin = skeletonize(label)
        assert thin.spacing == (0.5, 0.6, 0.7)
        assert thin.origin == (1.0, 2.0, 3.0)


class TestSkeletonGraph:
    """Tests for the centerline graph."""

    def test_y_shape(self):
        """Test a thin Y has one bifurcation, three terminals and three branches."""
        graph = build_skeleton_graph(LabelMap(y_centerline()))
        assert len(graph.bifurcations()) == 1
        assert len(graph.terminals()) == 3
        assert len(graph.branches) == 3
        junction = graph.nodes.index(graph.bifurcations()[0])
        assert graph.incident_count(junction) == 3
        assert graph.total_length() == pytest.approx(4.0 + 8.0 * np.sqrt(2.0))

    def test_skeleton_of_y_phantom(self):
        """Test thinning a thick Y keeps one connected branching tree."""
        centerline = skeletonize(LabelMap(y_airway()))
        graph = build_skeleton_graph(centerline)
        assert component_count(centerline.mask()) == 1
        assert len(graph.bifurcations()) >= 1
        assert len(graph.terminals()) >= 3

    def test_line_lengths_use_spacing(self):
        """Test branch length is physical."""
        mask = line_mask((3, 3, 10), (1, 1, slice(None)))
        graph = build_skeleton_graph(LabelMap(mask, spacing=(1.0, 1.0, 0.5)))
        assert len(graph.branches) == 1
        assert graph.total_length() == pytest.approx(4.5)
        weights = graph.voxel_weights()
        assert weights.sum() == pytest.approx(4.5)
        assert weights[1, 1, 0] == pytest.approx(0.25)

    def test_isolated_voxel(self):
        """Test a lone voxel is one node with a one-voxel branch."""
        mask = np.zeros((3, 3, 3), dtype=bool)
        mask[1, 1, 1] = True
        graph = build_skeleton_graph(LabelMap(mask))
        assert [n.kind for n in graph.nodes] == ["isolated"]
        assert len(graph.branches) == 1

    def test_rejects_thick_input(self):
        """Test a filled 2x2x2 block is refused."""
        with pytest.raises(DataError):
            build_skeleton_graph(LabelMap(np.ones((2, 2, 2), dtype=np.uint8)))

    def test_prune_spur(self):
        """Test a short side spur is removed and the stem becomes one branch."""
        mask = line_mask((7, 11, 11), (slice(0, 7), 5, 5))
        mask[3, 6, 6] = mask[3, 7, 7] = True
        graph = build_skeleton_graph(LabelMap(mask))
        assert len(graph.bifurcations()) == 1
        assert len(graph.branches) == 3
        pruned = prune_spurs(graph, min_length=2.0)
        assert len(pruned.bifurcations()) == 0
        assert len(pruned.terminals()) == 2
        assert len(pruned.branches) == 1
        assert not pruned.mask[3, 7, 7]

    def test_prune_keeps_long_branches(self):
        """Test pruning below every branch length changes nothing."""
        graph = build_skeleton_graph(LabelMap(y_centerline()))
        assert prune_spurs(graph, min_length=1.0) is graph


class TestAirwayScores:
    """Tests for BD/TD/TPR/FPR/DSC."""

    def test_half_covered_line(self):
        """Test a 10-voxel centerline with its first 5 voxels covered scores TD 50 and BD 100."""
        ref = line_mask((3, 3, 10), (1, 1, slice(None)))
        pred = np.zeros_like(ref)
        pred[1, 1, :5] = True
        graph = build_skeleton_graph(LabelMap(ref))
        scores = airway_scores(LabelMap(pred), LabelMap(ref), graph)
        assert scores.td == pytest.approx(50.0)
        assert scores.bd == pytest.approx(100.0)
        assert scores.tpr == pytest.approx(50.0)
        assert scores.fpr == pytest.approx(0.0)
        assert scores.dsc == pytest.approx(100.0 * 10 / 15)

    def test_perfect_prediction(self):
        """Test a prediction equal to the reference scores 100/100/100/0/100."""
        ref = LabelMap(y_airway())
        graph = build_skeleton_graph(LabelMap(y_centerline()))
        scores = airway_scores(ref, ref, graph)
        assert scores.as_dict() == pytest.approx({"bd": 100.0, "td": 100.0, "tpr": 100.0, "fpr": 0.0, "dsc": 100.0})

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_direct_counting(self, seed):
        """Test every score against brute-force voxel counting."""
        rng = np.random.default_rng(seed)
        ref = y_airway()
        pred = (ref & (rng.random(SHAPE) < rng.uniform(0.1, 0.9))) | (rng.random(SHAPE) < rng.uniform(0, 0.1))
        trachea = np.zeros(SHAPE, dtype=bool)
        trachea[: int(rng.integers(0, 3))] = True
        keep = ~trachea
        graph = build_skeleton_graph(LabelMap(y_centerline()))
        scores = airway_scores(LabelMap(pred), LabelMap(ref), graph, LabelMap(trachea))

        bd, td = oracle_tree_detection(Y_BRANCHES, pred, keep)
        tp = fp = fn = n_pos = n_neg = fp_kept = tp_kept = 0
        for index in np.ndindex(SHAPE):
            p, r = bool(pred[index]), bool(ref[index])
            tp += p and r
            fp += p and not r
            fn += r and not p
            if keep[index]:
                n_pos += r
                n_neg += not r
                tp_kept += p and r
                fp_kept += p and not r
        assert scores.bd == pytest.approx(bd, abs=1e-9)
        assert scores.td == pytest.approx(td, abs=1e-9)
        assert scores.tpr == pytest.approx(100.0 * tp_kept / n_pos, abs=1e-9)
        assert scores.fpr == pytest.approx(100.0 * fp_kept / n_neg, abs=1e-9)
        assert scores.dsc == pytest.approx(100.0 * 2 * tp / (2 * tp + fp + fn), abs=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_bd_td_monotone_in_prediction(self, seed):
        """Test growing the prediction never lowers BD or TD."""
        rng = np.random.default_rng(seed)
        ref = y_airway()
        small = ref & (rng.random(SHAPE) < 0.3)
        large = small | (ref & (rng.random(SHAPE) < 0.3))
        graph = build_skeleton_graph(LabelMap(y_centerline()))
        a = airway_scores(LabelMap(small), LabelMap(ref), graph)
        b = airway_scores(LabelMap(large), LabelMap(ref), graph)
        assert b.bd >= a.bd
        assert b.td >= a.td

    def test_empty_reference(self):
        """Test an empty reference is refused."""
        graph = build_skeleton_graph(LabelMap(y_centerline()))
        empty = LabelMap(np.zeros(SHAPE, dtype=np.uint8))
        with pytest.raises(DataError):
            airway_scores(empty, empty, graph)

    def test_graph_shape_mismatch(self):
        """Test the centerline graph must come from the reference grid."""
        graph = build_skeleton_graph(LabelMap(line_mask((3, 3, 10), (1, 1, slice(None)))))
        ref = LabelMap(y_airway())
        with pytest.raises(DataError):
            airway_scores(ref, ref, graph)

    def test_aggregate_mean_and_std(self):
        """Test per-metric mean and sample standard deviation over scans."""
        scans = [AirwayScores(bd=50.0, td=40.0, tpr=60.0, fpr=0.1, dsc=70.0),
                 AirwayScores(bd=100.0, td=80.0, tpr=60.0, fpr=0.3, dsc=90.0)]
        summary = aggregate_airway_scores(scans)
        assert summary["bd_mean"] == pytest.approx(75.0)
        assert summary["bd_std"] == pytest.approx(np.std([50.0, 100.0], ddof=1))
        assert summary["tpr_std"] == 0.0
        assert summary["scans"] == 2

    def test_aggregate_single_scan(self):
        """Test one scan has zero spread and no scans is refused."""
        summary = aggregate_airway_scores([AirwayScores(bd=1.0, td=2.0, tpr=3.0, fpr=4.0, dsc=5.0)])
        assert summary["dsc_mean"] == 5.0 and summary["dsc_std"] == 0.0
        with pytest.raises(DataError):
            aggregate_airway_scores([])


class TestThresholdAtFpr:
    """Tests for the fixed-FPR threshold search."""

    @pytest.mark.parametrize("target", [0.0, 1.0, 5.0, 25.0])
    def test_smallest_threshold_meeting_target(self, rng, target):
        """Test the threshold meets the FPR target and nothing lower does."""
        ref = rng.random((8, 8, 8)) < 0.2
        prob = Volume(rng.random((8, 8, 8)).astype(np.float32))
        th = threshold_at_fpr(prob, LabelMap(ref), target)
        negatives = np.asarray(prob.data, dtype=np.float64)[~ref]

        def fpr(t):
            return 100.0 * np.count_nonzero(negatives >= t) / negatives.size

        assert fpr(th) <= target
        below = negatives[negatives < th]
        if below.size:
            assert fpr(below.max()) > target


class TestArteryVeinScores:
    """Tests for artery-vein scan scores, aggregation and error types."""

    SHAPE = (6, 10, 10)

    def _case(self, rng):
        ref = rng.choice([BACKGROUND, ARTERY, VEIN, NON_DETERMINED], size=self.SHAPE, p=[0.5, 0.2, 0.2, 0.1])
        ref[2, 2, :] = ARTERY
        ref[4, 7, :] = VEIN
        pred = rng.choice([BACKGROUND, ARTERY, VEIN], size=self.SHAPE, p=[0.4, 0.3, 0.3])
        return pred.astype(np.uint8), ref.astype(np.uint8)

    def _graphs(self):
        artery = build_skeleton_graph(LabelMap(line_mask(self.SHAPE, (2, 2, slice(None)))))
        vein = build_skeleton_graph(LabelMap(line_mask(self.SHAPE, (4, 7, slice(None)))))
        return artery, vein

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_direct_counting(self, seed):
        """Test ACC, TPR, FPR, DSC, BD and TD against direct counting."""
        rng = np.random.default_rng(seed)
        pred, ref = self._case(rng)
        scores = av_scores(LabelMap(pred), LabelMap(ref), self._graphs())

        labeled = (ref == ARTERY) | (ref == VEIN)
        correct = int(np.sum(labeled & (pred == ref)))
        tp = int(np.sum(labeled & (pred > 0)))
        fp = int(np.sum((ref == BACKGROUND) & (pred > 0)))
        keep = np.ones(self.SHAPE, dtype=bool)
        artery_path = [(2, 2, x) for x in range(10)]
        vein_path = [(4, 7, x) for x in range(10)]
        a_bd, a_td = oracle_tree_detection([artery_path], pred == ARTERY, keep)
        v_bd, v_td = oracle_tree_detection([vein_path], pred == VEIN, keep)

        assert scores.acc == pytest.approx(100.0 * correct / labeled.sum())
        assert scores.tpr == pytest.approx(100.0 * tp / labeled.sum())
        assert scores.fpr == pytest.approx(100.0 * fp / np.sum(ref == BACKGROUND))
        assert scores.dsc == pytest.approx(100.0 * 2 * tp / (tp + fp + labeled.sum()))
        assert scores.artery_bd == pytest.approx(a_bd)
        assert scores.vein_td == pytest.approx(v_td)
        assert scores.bd == pytest.approx(0.5 * (a_bd + v_bd))
        assert scores.td == pytest.approx(0.5 * (a_td + v_td))

    def test_class_matched_branch_detection(self):
        """Test BD averages the artery and vein detection rates with class-matched coverage."""
        shape = (8, 12, 12)
        artery_lines = [(2, y, slice(2, 10)) for y in (1, 4, 7)]
        vein_lines = [(5, y, slice(2, 10)) for y in (1, 4, 7, 10)]
        ref = np.zeros(shape, dtype=np.uint8)
        artery_centerline = np.zeros(shape, dtype=bool)
        vein_centerline = np.zeros(shape, dtype=bool)
        for line in artery_lines:
            ref[line] = ARTERY
            artery_centerline[line] = True
        for line in vein_lines:
            ref[line] = VEIN
            vein_centerline[line] = True
        pred = ref.copy()
        pred[artery_lines[2]] = VEIN
        graphs = (build_skeleton_graph(LabelMap(artery_centerline)), build_skeleton_graph(LabelMap(vein_centerline)))
        assert [len(g.branches) for g in graphs] == [3, 4]

        scores = av_scores(LabelMap(pred), LabelMap(ref), graphs)
        assert scores.artery_bd == pytest.approx(200.0 / 3.0)
        assert scores.vein_bd == pytest.approx(100.0)
        assert scores.bd == pytest.approx(83.33, abs=0.005)
        assert scores.acc == pytest.approx(100.0 * 48 / 56)

    def test_non_determined_ignored(self, rng):
        """Test predictions on non-determined voxels do not change any score."""
        pred, ref = self._case(rng)
        other = pred.copy()
        other[ref == NON_DETERMINED] = (other[ref == NON_DETERMINED] + 1) % 3
        a = av_scores(LabelMap(pred), LabelMap(ref), self._graphs())
        b = av_scores(LabelMap(other), LabelMap(ref), self._graphs())
        assert a.as_dict() == b.as_dict()

    def test_prediction_alphabet(self, rng):
        """Test a prediction holding 255 is refused."""
        pred, ref = self._case(rng)
        pred[0, 0, 0] = NON_DETERMINED
        with pytest.raises(DataError):
            av_scores(LabelMap(pred), LabelMap(ref), self._graphs())

    @pytest.mark.parametrize("seed", range(10))
    def test_error_types(self, seed):
        """Test the five error types and the confusion matrix against direct counting."""
        rng = np.random.default_rng(seed)
        pred, ref = self._case(rng)
        breakdown = error_breakdown(LabelMap(pred), LabelMap(ref))
        pairs = {
            "T1": [(BACKGROUND, ARTERY), (BACKGROUND, VEIN)],
            "T2": [(ARTERY, BACKGROUND)],
            "T3": [(ARTERY, VEIN)],
            "T4": [(VEIN, BACKGROUND)],
            "T5": [(VEIN, ARTERY)],
        }
        raw = {k: sum(int(np.sum((ref == r) & (pred == p))) for r, p in cells) for k, cells in pairs.items()}
        total = sum(raw.values())
        for name, n in raw.items():
            assert breakdown.types[name] == pytest.approx(100.0 * n / total)
        assert sum(breakdown.types.values()) == pytest.approx(100.0)
        np.testing.assert_allclose(breakdown.confusion.sum(axis=1), 1.0)
        assert breakdown.counts.sum() == np.sum(ref != NON_DETERMINED)

    def _scan(self, acc: float) -> AVScanScores:
        return AVScanScores(acc=acc, tpr=90.0, fpr=1.0, dsc=80.0, bd=70.0, td=60.0,
                            artery_bd=70.0, vein_bd=70.0, artery_td=60.0, vein_td=60.0)

    def test_aggregate_confidence_intervals(self):
        """Test CIs bracket the mean and median."""
        scans = [self._scan(a) for a in (85.0, 88.0, 90.0, 91.0, 93.0, 95.0, 96.0)]
        summary = aggregate_av_scores(scans, seed=0, resamples=2000)
        assert summary.acc_mean == pytest.approx(np.mean([85, 88, 90, 91, 93, 95, 96]))
        assert summary.acc_median == 91.0
        assert summary.acc_mean_ci[0] < summary.acc_mean < summary.acc_mean_ci[1]
        assert summary.acc_median_ci[0] <= summary.acc_median <= summary.acc_median_ci[1]
        assert summary.scans == 7
        assert summary.dsc == pytest.approx(80.0)

    def test_aggregate_is_seeded(self):
        """Test the bootstrap interval is reproducible for a seed."""
        scans = [self._scan(a) for a in (80.0, 84.0, 90.0, 97.0)]
        a = aggregate_av_scores(scans, seed=3, resamples=500)
        b = aggregate_av_scores(scans, seed=3, resamples=500)
        assert a.acc_median_ci == b.acc_median_ci

    def test_aggregate_single_scan(self):
        """Test one scan gives point intervals."""
        summary = aggregate_av_scores([self._scan(88.0)])
        assert summary.acc_mean_ci == (88.0, 88.0)
        assert summary.acc_median_ci == (88.0, 88.0)

    def test_aggregate_empty(self):
        """Test aggregation needs scans."""
        with pytest.raises(DataError):
            aggregate_av_scores([])


class TestReports:
    """Tests for text and tabular reports."""

    def test_format_report(self):
        """Test reals get six decimals and other values print as-is."""
        assert format_report({"bd": 96.2, "scans": 3}) == "bd=96.200000\nscans=3"

    def test_metric_table(self, temp_dir):
        """Test the CSV keeps the column order and six decimals."""
        path = temp_dir / "scores.csv"
        write_metric_table([{"case": "a", "bd": 1.0, "td": 2.5, "tpr": 3.0, "fpr": 0.1, "dsc": 99.1234567}],
                           path, AIRWAY_COLUMNS)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(AIRWAY_COLUMNS)
        assert lines[1] == "a,1.000000,2.500000,3.000000,0.100000,99.123457"
        assert list(pd.read_csv(path).columns) == AIRWAY_COLUMNS


def test_mask_alphabet_of_centerline():
    """Test the centerline is a binary mask on the input grid."""
    thin = skeletonize(LabelMap(y_airway()))
    assert thin.alphabet == MASK_ALPHABET
    assert thin.dims == SHAPE
