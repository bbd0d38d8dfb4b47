#!/usr/bin/env python3
"""
Skeleton Metrics - centerline extraction and evaluation of airway and
artery-vein segmentations.

Airway metrics (trachea excluded except for DSC):
    BD   branches detected       N_seg / N_ref * 100
    TD   tree length detected    L_seg / L_ref * 100
    TPR  true positive rate      N_TP / N_P * 100
    FPR  false positive rate     N_FP / N_N * 100
    DSC  Dice similarity         2 N_TP / (N_TP + N_FP + N_P) * 100

Artery-vein metrics: voxel accuracy on labeled vessels (non-determined
voxels excluded everywhere), vessel-level TPR/FPR/DSC, and BD/TD averaged
over the artery and vein reference trees.

Usage:
    centerline = skeletonize(ref)
    graph = build_skeleton_graph(centerline)
    scores = airway_scores(pred, ref, graph, trachea)
    print(format_report(scores.as_dict()))
"""

import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from scipy import ndimage, stats
from skimage.morphology import skeletonize as _skimage_skeletonize

from errors import DataError
from volume_core import ARTERY, BACKGROUND, MASK_ALPHABET, NON_DETERMINED, VEIN, LabelMap, Volume, check_geometry

logger = logging.getLogger("tubule_seg.skeleton_metrics")

NEIGHBOR_OFFSETS = [
    (dz, dy, dx)
    for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
    if (dz, dy, dx) != (0, 0, 0)
]

AIRWAY_COLUMNS = ["case", "bd", "td", "tpr", "fpr", "dsc"]
AV_COLUMNS = ["case", "acc", "tpr", "fpr", "dsc", "bd", "td", "artery_bd", "vein_bd", "artery_td", "vein_td"]


# ==============================================================================
# CENTERLINES
# ==============================================================================

def skeletonize(mask: LabelMap) -> LabelMap:
    """Topology-preserving 3-D thinning (directional simple-point deletion) to a 1-voxel centerline."""
    inside = mask.mask()
    if not inside.any():
        return mask.with_data(np.zeros(mask.dims, dtype=np.uint8), MASK_ALPHABET)
    thin = _skimage_skeletonize(inside, method="lee")
    return mask.with_data(np.asarray(thin) > 0, MASK_ALPHABET)


def component_count(mask: np.ndarray) -> int:
    """Number of 26-connected components."""
    return int(ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))[1])


@dataclass
class SkeletonNode:
    kind: str        # terminal, bifurcation, isolated, cycle
    voxels: list     # (z, y, x) tuples; bifurcation nodes may span several voxels

    @property
    def position(self) -> tuple:
        return self.voxels[0]


@dataclass
class Branch:
    path: list       # ordered (z, y, x) voxels, endpoints included
    start: int       # node index
    end: int
    length: float    # mm


@dataclass
class SkeletonGraph:
    """Nodes and branches of a centerline, with the spacing used for lengths."""

    nodes: list
    branches: list
    spacing: tuple
    shape: tuple
    mask: np.ndarray = field(repr=False)

    def terminals(self) -> list:
        return [n for n in self.nodes if n.kind in ("terminal", "isolated")]

    def bifurcations(self) -> list:
        return [n for n in self.nodes if n.kind == "bifurcation"]

    def incident_count(self, node_index: int) -> int:
        return sum((b.start == node_index) + (b.end == node_index) for b in self.branches)

    def total_length(self) -> float:
        return float(sum(b.length for b in self.branches))

    def voxel_weights(self) -> np.ndarray:
        """Per-voxel share of tree length: each step's length split between its two voxels."""
        weights = np.zeros(self.shape, dtype=np.float64)
        for branch in self.branches:
            if len(branch.path) == 1:
                weights[branch.path[0]] += branch.length
                continue
            for a, b in zip(branch.path[:-1], branch.path[1:]):
                step = _step_length(a, b, self.spacing)
                weights[a] += 0.5 * step
                weights[b] += 0.5 * step
        return weights


def _step_length(a, b, spacing) -> float:
    return float(np.sqrt(sum(((p - q) * s) ** 2 for p, q, s in zip(a, b, spacing))))


def _path_length(path: list, spacing) -> float:
    if len(path) == 1:
        return float(np.mean(spacing))
    return sum(_step_length(a, b, spacing) for a, b in zip(path[:-1], path[1:]))


def _has_full_cube(mask: np.ndarray) -> bool:
    if min(mask.shape) < 2:
        return False
    m = mask.astype(np.uint8)
    cube = (m[:-1, :-1, :-1] & m[1:, :-1, :-1] & m[:-1, 1:, :-1] & m[:-1, :-1, 1:]
            & m[1:, 1:, :-1] & m[1:, :-1, 1:] & m[:-1, 1:, 1:] & m[1:, 1:, 1:])
    return bool(cube.any())


class _GraphBuilder:
    """Path decomposition of a thin 26-connected voxel set."""

    def __init__(self, mask: np.ndarray, spacing):
        self.mask = mask
        self.spacing = spacing
        self.voxels = [tuple(int(c) for c in v) for v in np.argwhere(mask)]
        voxel_set = set(self.voxels)
        self.adj = {
            v: [n for n in ((v[0] + dz, v[1] + dy, v[2] + dx) for dz, dy, dx in NEIGHBOR_OFFSETS) if n in voxel_set]
            for v in self.voxels
        }
        self.nodes: list = []
        self.branches: list = []
        self.node_of: dict = {}

    def _add_node(self, kind: str, voxels: list) -> int:
        self.nodes.append(SkeletonNode(kind, sorted(voxels)))
        index = len(self.nodes) - 1
        for v in voxels:
            self.node_of[v] = index
        return index

    def _add_branch(self, path: list, start: int, end: int):
        self.branches.append(Branch(path, start, end, _path_length(path, self.spacing)))

    def build(self) -> tuple[list, list]:
        degree = {v: len(n) for v, n in self.adj.items()}

        # bifurcation voxels merge into one node per 26-connected cluster
        junction = np.zeros(self.mask.shape, dtype=bool)
        for v, d in degree.items():
            if d >= 3:
                junction[v] = True
        clusters, count = ndimage.label(junction, structure=np.ones((3, 3, 3), dtype=bool))
        for c in range(1, count + 1):
            self._add_node("bifurcation", [tuple(int(i) for i in v) for v in np.argwhere(clusters == c)])
        for v in self.voxels:
            if degree[v] == 1:
                self._add_node("terminal", [v])
            elif degree[v] == 0:
                self._add_node("isolated", [v])

        self._trace_from_nodes()
        self._trace_cycles()
        self._resolve_node_kinds()
        return self.nodes, self.branches

    def _trace_from_nodes(self):
        visited: set = set()
        direct: set = set()
        for index in range(len(self.nodes)):
            for u in self.nodes[index].voxels:
                for w in self.adj[u]:
                    owner = self.node_of.get(w)
                    if owner == index:
                        continue
                    if owner is not None:
                        key = frozenset((u, w))
                        if key not in direct:
                            direct.add(key)
                            self._add_branch([u, w], index, owner)
                        continue
                    if w in visited:
                        continue
                    path, end = self._walk(u, w, visited)
                    self._add_branch(path, index, end)

    def _walk(self, start: tuple, first: tuple, visited: set) -> tuple[list, int]:
        path = [start, first]
        visited.add(first)
        prev, cur = start, first
        while True:
            candidates = [n for n in self.adj[cur] if n != prev]
            if len(candidates) != 1:
                raise DataError(f"centerline is not thin near voxel {cur}")
            nxt = candidates[0]
            path.append(nxt)
            owner = self.node_of.get(nxt)
            if owner is not None:
                return path, owner
            if nxt in visited:
                raise DataError(f"centerline path decomposition failed at voxel {nxt}")
            visited.add(nxt)
            prev, cur = cur, nxt

    def _trace_cycles(self):
        on_branch = {v for b in self.branches for v in b.path}
        for v in self.voxels:
            if v in on_branch or v in self.node_of:
                continue
            # a closed loop of degree-2 voxels: anchor it with a synthetic node
            index = self._add_node("cycle", [v])
            path = [v]
            prev, cur = None, v
            while True:
                candidates = [n for n in self.adj[cur] if n != prev]
                nxt = candidates[0] if prev is not None else min(candidates)
                path.append(nxt)
                if nxt == v:
                    break
                prev, cur = cur, nxt
            on_branch.update(path)
            self._add_branch(path, index, index)

    def _resolve_node_kinds(self):
        changed = True
        while changed:
            changed = False
            for index, node in enumerate(self.nodes):
                if node.kind != "bifurcation":
                    continue
                ends = [b for b in self.branches if b.start == index or b.end == index]
                count = sum((b.start == index) + (b.end == index) for b in ends)
                if count == 2 and len(ends) == 2:
                    self._splice(index, ends[0], ends[1])
                    changed = True
                    break
                if count == 2:
                    node.kind = "cycle"
                elif count == 1:
                    node.kind = "terminal"
                elif count == 0:
                    node.kind = "isolated"
        for index, node in enumerate(self.nodes):
            if node.kind == "isolated" and not any(b.start == index for b in self.branches):
                self._add_branch([node.position], index, index)
        self._compact()

    def _inner_path(self, node: SkeletonNode, a: tuple, b: tuple) -> list:
        members = set(node.voxels)
        parent = {a: None}
        queue = deque([a])
        while queue:
            cur = queue.popleft()
            if cur == b:
                break
            for n in self.adj[cur]:
                if n in members and n not in parent:
                    parent[n] = cur
                    queue.append(n)
        path = [b]
        while parent[path[-1]] is not None:
            path.append(parent[path[-1]])
        return path[::-1]

    def _splice(self, index: int, first: Branch, second: Branch):
        """Join two branches through a junction cluster that only has two exits."""
        node = self.nodes[index]
        p1 = first.path if first.end == index else first.path[::-1]
        p2 = second.path if second.start == index else second.path[::-1]
        other1 = first.start if first.end == index else first.end
        other2 = second.end if second.start == index else second.start
        inner = self._inner_path(node, p1[-1], p2[0])
        path = p1[:-1] + inner + p2[1:]
        self.branches = [b for b in self.branches if b is not first and b is not second]
        self._add_branch(path, other1, other2)
        node.kind = "removed"

    def _compact(self):
        keep = [i for i, n in enumerate(self.nodes) if n.kind != "removed"]
        remap = {old: new for new, old in enumerate(keep)}
        self.nodes = [self.nodes[i] for i in keep]
        for b in self.branches:
            b.start, b.end = remap[b.start], remap[b.end]


def build_skeleton_graph(centerline: LabelMap) -> SkeletonGraph:
    """Decompose a thin centerline into terminal/bifurcation nodes and branches."""
    mask = centerline.mask()
    if _has_full_cube(mask):
        raise DataError("centerline is not thin (contains a filled 2x2x2 block)")
    nodes, branches = _GraphBuilder(mask, centerline.spacing).build()
    logger.debug(f"Skeleton graph: {len(nodes)} nodes, {len(branches)} branches")
    return SkeletonGraph(nodes, branches, centerline.spacing, centerline.dims, mask.copy())


def prune_spurs(graph: SkeletonGraph, min_length: float) -> SkeletonGraph:
    """Remove terminal branches shorter than min_length (mm) hanging off bifurcations."""
    mask = graph.mask.copy()
    removed = False
    for branch in graph.branches:
        kinds = {graph.nodes[branch.start].kind, graph.nodes[branch.end].kind}
        if kinds == {"terminal", "bifurcation"} and branch.length < min_length:
            junction = graph.nodes[branch.start] if graph.nodes[branch.start].kind == "bifurcation" else graph.nodes[branch.end]
            keep = set(junction.voxels)
            for v in branch.path:
                if v not in keep:
                    mask[v] = False
            removed = True
    if not removed:
        return graph
    return build_skeleton_graph(LabelMap(mask, graph.spacing))


# ==============================================================================
# AIRWAY METRICS
# ==============================================================================

@dataclass
class AirwayScores:
    bd: float
    td: float
    tpr: float
    fpr: float
    dsc: float

    def as_dict(self) -> dict:
        return asdict(self)


def _percent(num: float, den: float) -> float:
    return 100.0 * num / den if den > 0 else 0.0


def _check_graph(graph: SkeletonGraph, grid: LabelMap):
    if tuple(graph.shape) != grid.dims:
        raise DataError(f"skeleton graph shape {graph.shape} does not match grid {grid.dims}")


def tree_detection(graph: SkeletonGraph, covered: np.ndarray, keep: Optional[np.ndarray] = None,
                   min_voxels: int = 1) -> tuple[int, int, float, float]:
    """(detected branches, counted branches, covered length, total length) restricted to keep."""
    if keep is None:
        keep = np.ones(graph.shape, dtype=bool)
    weights = graph.voxel_weights() * keep
    detected = counted = 0
    for branch in graph.branches:
        voxels = [v for v in branch.path if keep[v]]
        if not voxels:
            continue
        counted += 1
        if sum(bool(covered[v]) for v in voxels) >= min_voxels:
            detected += 1
    return detected, counted, float((weights * covered).sum()), float(weights.sum())


def airway_scores(pred: LabelMap, ref: LabelMap, ref_centerline_graph: SkeletonGraph,
                  exclude: Optional[LabelMap] = None, detection_min_voxels: int = 1) -> AirwayScores:
    """BD/TD/TPR/FPR with the trachea excluded; DSC over the whole volume."""
    check_geometry(pred, ref, "prediction and reference")
    _check_graph(ref_centerline_graph, ref)
    reference = ref.mask()
    predicted = pred.mask()
    if not reference.any():
        raise DataError("reference segmentation is empty")
    if exclude is not None:
        check_geometry(ref, exclude, "reference and exclusion mask")
        keep = ~exclude.mask()
    else:
        keep = np.ones(ref.dims, dtype=bool)

    positives = reference & keep
    negatives = ~reference & keep
    if not positives.any():
        raise DataError("reference is empty outside the excluded region")

    detected, counted, l_seg, l_ref = tree_detection(
        ref_centerline_graph, predicted, keep, detection_min_voxels)
    if counted == 0:
        raise DataError("reference centerline is empty outside the excluded region")

    tp_all = int((predicted & reference).sum())
    fp_all = int((predicted & ~reference).sum())
    return AirwayScores(
        bd=_percent(detected, counted),
        td=_percent(l_seg, l_ref),
        tpr=_percent(int((predicted & positives).sum()), int(positives.sum())),
        fpr=_percent(int((predicted & negatives).sum()), int(negatives.sum())),
        dsc=_percent(2 * tp_all, tp_all + fp_all + int(reference.sum())),
    )


def aggregate_airway_scores(scans: list) -> dict:
    """Mean and sample standard deviation of every airway metric over scans."""
    if not scans:
        raise DataError("no scans to aggregate")
    frame = pd.DataFrame([s.as_dict() for s in scans])
    std = frame.std(ddof=1).fillna(0.0)
    out: dict = {}
    for column in frame.columns:
        out[f"{column}_mean"] = float(frame[column].mean())
        out[f"{column}_std"] = float(std[column])
    out["scans"] = len(scans)
    return out


def threshold_at_fpr(prob: Volume, ref: LabelMap, target_fpr: float,
                     exclude: Optional[LabelMap] = None) -> float:
    """Smallest threshold th with FPR(prob >= th) <= target_fpr (percent)."""
    check_geometry(prob, ref, "probabilities and reference")
    keep = ~exclude.mask() if exclude is not None else np.ones(ref.dims, dtype=bool)
    negative_probs = np.sort(np.asarray(prob.data, dtype=np.float64)[~ref.mask() & keep])[::-1]
    total = negative_probs.size
    if total == 0:
        return 0.0
    allowed = int(np.floor(target_fpr / 100.0 * total + 1e-12))
    if allowed >= total:
        return float(min(0.0, negative_probs[-1]))
    return float(np.nextafter(negative_probs[allowed], np.inf))


# ==============================================================================
# ARTERY-VEIN METRICS
# ==============================================================================

@dataclass
class AVScanScores:
    """Per-scan artery-vein scores (percentages)."""

    acc: float
    tpr: float
    fpr: float
    dsc: float
    bd: float
    td: float
    artery_bd: float
    vein_bd: float
    artery_td: float
    vein_td: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class AVScores:
    """Artery-vein scores aggregated over scans."""

    acc_mean: float
    acc_mean_ci: tuple
    acc_median: float
    acc_median_ci: tuple
    tpr: float
    fpr: float
    dsc: float
    bd: float
    td: float
    scans: int

    def as_dict(self) -> dict:
        return {
            "acc_mean": self.acc_mean,
            "acc_mean_ci_low": self.acc_mean_ci[0],
            "acc_mean_ci_high": self.acc_mean_ci[1],
            "acc_median": self.acc_median,
            "acc_median_ci_low": self.acc_median_ci[0],
            "acc_median_ci_high": self.acc_median_ci[1],
            "tpr": self.tpr,
            "fpr": self.fpr,
            "dsc": self.dsc,
            "bd": self.bd,
            "td": self.td,
            "scans": self.scans,
        }


def _check_av_inputs(pred: LabelMap, ref: LabelMap):
    check_geometry(pred, ref, "prediction and reference")
    if np.isin(pred.data, [BACKGROUND, ARTERY, VEIN], invert=True).any():
        raise DataError("artery-vein prediction must only contain {0, 1, 2}")
    if np.isin(ref.data, [BACKGROUND, ARTERY, VEIN, NON_DETERMINED], invert=True).any():
        raise DataError("artery-vein reference must only contain {0, 1, 2, 255}")


def av_scores(pred: LabelMap, ref: LabelMap, ref_graphs: tuple,
              detection_min_voxels: int = 1) -> AVScanScores:
    """Scores of one artery-vein scan; ref_graphs = (artery graph, vein graph)."""
    _check_av_inputs(pred, ref)
    artery_graph, vein_graph = ref_graphs
    _check_graph(artery_graph, ref)
    _check_graph(vein_graph, ref)
    p, r = pred.data, ref.data
    if not (r == ARTERY).any() or not (r == VEIN).any():
        raise DataError("reference needs both artery and vein voxels")

    labeled = (r == ARTERY) | (r == VEIN)
    negatives = r == BACKGROUND
    vessel = p > 0
    acc = 100.0 * float((p[labeled] == r[labeled]).mean())
    tp = int((vessel & labeled).sum())
    fp = int((vessel & negatives).sum())

    per_class = {}
    for name, graph, cls in (("artery", artery_graph, ARTERY), ("vein", vein_graph, VEIN)):
        detected, counted, l_seg, l_ref = tree_detection(graph, p == cls, None, detection_min_voxels)
        if counted == 0:
            raise DataError(f"{name} reference centerline is empty")
        per_class[name] = (_percent(detected, counted), _percent(l_seg, l_ref))

    return AVScanScores(
        acc=acc,
        tpr=_percent(tp, int(labeled.sum())),
        fpr=_percent(fp, int(negatives.sum())),
        dsc=_percent(2 * tp, tp + fp + int(labeled.sum())),
        bd=0.5 * (per_class["artery"][0] + per_class["vein"][0]),
        td=0.5 * (per_class["artery"][1] + per_class["vein"][1]),
        artery_bd=per_class["artery"][0],
        vein_bd=per_class["vein"][0],
        artery_td=per_class["artery"][1],
        vein_td=per_class["vein"][1],
    )


def av_reference_graphs(ref: LabelMap) -> tuple[SkeletonGraph, SkeletonGraph]:
    """Centerline graphs of the artery and vein reference trees."""
    graphs = []
    for cls in (ARTERY, VEIN):
        centerline = skeletonize(ref.with_data(ref.data == cls, MASK_ALPHABET))
        graphs.append(build_skeleton_graph(centerline))
    return graphs[0], graphs[1]


def _bootstrap_median_ci(values: np.ndarray, confidence: float, resamples: int, seed: int) -> tuple:
    rng = np.random.default_rng(seed)
    kwargs = dict(n_resamples=resamples, confidence_level=confidence, method="percentile", vectorized=True)
    try:
        result = stats.bootstrap((values,), np.median, rng=rng, **kwargs)
    except TypeError:
        # scipy < 1.15 names the generator argument random_state
        result = stats.bootstrap((values,), np.median, random_state=rng, **kwargs)
    return float(result.confidence_interval.low), float(result.confidence_interval.high)


def _mean_ci(values: np.ndarray, confidence: float) -> tuple:
    mean = float(values.mean())
    sem = float(stats.sem(values))
    if sem == 0.0:
        return mean, mean
    low, high = stats.t.interval(confidence, df=len(values) - 1, loc=mean, scale=sem)
    return float(low), float(high)


def aggregate_av_scores(scans: list, seed: int = 0, resamples: int = 10000,
                        confidence: float = 0.95) -> AVScores:
    """Mean/median ACC with 95% CIs (t-interval / bootstrap percentile) over scans."""
    if not scans:
        raise DataError("no scans to aggregate")
    acc = np.array([s.acc for s in scans], dtype=np.float64)
    mean, median = float(acc.mean()), float(np.median(acc))
    if len(acc) < 2 or np.all(acc == acc[0]):
        mean_ci, median_ci = (mean, mean), (median, median)
    else:
        mean_ci = _mean_ci(acc, confidence)
        low, high = _bootstrap_median_ci(acc, confidence, resamples, seed)
        median_ci = (min(low, median), max(high, median))

    def avg(name: str) -> float:
        return float(np.mean([getattr(s, name) for s in scans]))

    return AVScores(
        acc_mean=mean, acc_mean_ci=mean_ci, acc_median=median, acc_median_ci=median_ci,
        tpr=avg("tpr"), fpr=avg("fpr"), dsc=avg("dsc"), bd=avg("bd"), td=avg("td"), scans=len(scans),
    )


@dataclass
class ErrorBreakdown:
    confusion: np.ndarray   # 3x3, rows = reference class, row-normalized
    counts: np.ndarray      # 3x3 raw counts
    types: dict             # T1..T5 -> percentage of all errors

    def as_dict(self) -> dict:
        out = {k.lower(): v for k, v in self.types.items()}
        for i in range(3):
            for j in range(3):
                out[f"cm_{i}{j}"] = float(self.confusion[i, j])
        return out


ERROR_TYPES = {
    "T1": ((BACKGROUND, ARTERY), (BACKGROUND, VEIN)),
    "T2": ((ARTERY, BACKGROUND),),
    "T3": ((ARTERY, VEIN),),
    "T4": ((VEIN, BACKGROUND),),
    "T5": ((VEIN, ARTERY),),
}


def error_breakdown(pred: LabelMap, ref: LabelMap) -> ErrorBreakdown:
    """Row-normalized confusion matrix and five-type error percentages."""
    _check_av_inputs(pred, ref)
    determined = ref.data != NON_DETERMINED
    r = ref.data[determined].astype(np.int64)
    p = pred.data[determined].astype(np.int64)
    counts = np.bincount(r * 3 + p, minlength=9).reshape(3, 3)
    rows = counts.sum(axis=1, keepdims=True)
    confusion = np.divide(counts, rows, out=np.zeros((3, 3)), where=rows > 0)

    raw = {name: int(sum(counts[i, j] for i, j in cells)) for name, cells in ERROR_TYPES.items()}
    total = sum(raw.values())
    types = {name: _percent(n, total) for name, n in raw.items()}
    return ErrorBreakdown(confusion=confusion, counts=counts, types=types)


# ==============================================================================
# REPORTS
# ==============================================================================

def format_report(scores: dict) -> str:
    """Line-delimited key=value text, reals with 6 decimals."""
    lines = []
    for key, value in scores.items():
        if isinstance(value, (float, np.floating)):
            lines.append(f"{key}={float(value):.6f}")
        else:
            lines.append(f"{key}={value}")
    return "\n".join(lines)


def write_metric_table(rows: list, path: Union[str, Path], columns: list):
    """Comma-separated table with a fixed column order and 6 decimal places."""
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(path, index=False, float_format="%.6f")
    logger.info(f"Wrote {len(rows)} metric rows to {path}")
