#!/usr/bin/env python3
"""
Graph-cut refinement of artery-vein predictions and union fusion.

Each vessel voxel becomes a node. Terminal capacities are the renormalized
class probabilities (source = artery, sink = vein); 6-connected vessel
neighbors are joined by kappa * exp(-(I_A - I_B)^2 / sigma) on raw HU.
The cut is solved exactly with PyMaxflow (Boykov-Kolmogorov); nodes left
free by the solver stay on the source (artery) side.
"""

import logging
from dataclasses import dataclass

import maxflow
import numpy as np

from errors import DataError, NumericError
from volume_core import ARTERY, AV_ALPHABET, BACKGROUND, VEIN, LabelMap, Volume, check_geometry

logger = logging.getLogger("tubule_seg.graphcut_refine")

FUSE_MODES = ("union1", "union2")


@dataclass
class FlowNetwork:
    """Capacitated s-t network over vessel voxels."""

    source_caps: np.ndarray     # (n,) capacity source -> node
    sink_caps: np.ndarray       # (n,) capacity node -> sink
    edge_u: np.ndarray          # (m,) node indices
    edge_v: np.ndarray
    edge_caps: np.ndarray       # (m,) capacity u -> v
    edge_rev_caps: np.ndarray   # (m,) capacity v -> u
    voxels: np.ndarray          # (n, 3) grid index of each node; empty for abstract networks

    def __post_init__(self):
        n = len(self.source_caps)
        if len(self.sink_caps) != n:
            raise DataError("source and sink capacity arrays differ in length")
        caps = [self.source_caps, self.sink_caps, self.edge_caps, self.edge_rev_caps]
        if any(np.any(~np.isfinite(c)) or np.any(c < 0) for c in caps):
            raise DataError("capacities must be finite and non-negative")
        if len(self.edge_u) and (np.any(self.edge_u == self.edge_v)
                                 or min(self.edge_u.min(), self.edge_v.min()) < 0
                                 or max(self.edge_u.max(), self.edge_v.max()) >= n):
            raise DataError("edges must join two distinct existing nodes")

    @property
    def node_count(self) -> int:
        return len(self.source_caps)

    @classmethod
    def from_edges(cls, source_caps, sink_caps, edges=()) -> "FlowNetwork":
        """Abstract network from (u, v, cap_uv, cap_vu) tuples."""
        edges = list(edges)
        columns = list(zip(*edges)) if edges else [(), (), (), ()]
        return cls(
            np.asarray(source_caps, dtype=np.float64), np.asarray(sink_caps, dtype=np.float64),
            np.asarray(columns[0], dtype=np.int64), np.asarray(columns[1], dtype=np.int64),
            np.asarray(columns[2], dtype=np.float64), np.asarray(columns[3], dtype=np.float64),
            np.zeros((0, 3), dtype=np.int64))

    def cut_capacity(self, sink_side: np.ndarray) -> float:
        """Capacity of the cut that puts the given nodes on the sink side."""
        sink_side = np.asarray(sink_side, dtype=bool)
        total = float(self.source_caps[sink_side].sum() + self.sink_caps[~sink_side].sum())
        if len(self.edge_u):
            su, sv = sink_side[self.edge_u], sink_side[self.edge_v]
            total += float(self.edge_caps[~su & sv].sum() + self.edge_rev_caps[su & ~sv].sum())
        return total


@dataclass
class CutAssignment:
    sink_side: np.ndarray   # (n,) True = vein
    flow: float

    def labels(self) -> np.ndarray:
        return np.where(self.sink_side, VEIN, ARTERY).astype(np.uint8)


def _probability_stack(probs) -> np.ndarray:
    if isinstance(probs, (list, tuple)):
        if len(probs) != 3:
            raise DataError(f"expected 3 probability channels, got {len(probs)}")
        return np.stack([np.asarray(p.data, dtype=np.float64) for p in probs])
    return np.asarray(probs, dtype=np.float64)


def build_vessel_graph(probs, ct: Volume, vessel_mask: LabelMap,
                       kappa: float = 8.0, sigma: float = 100.0) -> FlowNetwork:
    """Network over mask voxels: renormalized artery/vein terminals, HU-similarity neighbor links."""
    if kappa < 0 or sigma <= 0:
        raise DataError(f"need kappa >= 0 and sigma > 0, got kappa={kappa}, sigma={sigma}")
    check_geometry(ct, vessel_mask, "CT and vessel mask")
    if isinstance(probs, (list, tuple)):
        for p in probs:
            check_geometry(ct, p, "CT and probabilities")
    stack = _probability_stack(probs)
    if stack.shape != (3,) + ct.dims:
        raise DataError(f"probability stack shape {stack.shape} does not match CT {ct.dims}")

    mask = vessel_mask.mask()
    p = stack[:, mask]
    if np.any(np.abs(p.sum(axis=0) - 1.0) > 1e-4):
        raise DataError("class probabilities must sum to 1 inside the vessel mask")
    vessel = p[1] + p[2]
    if np.any(vessel < 1e-12):
        raise DataError("vessel mask contains voxels with zero artery and vein probability")

    voxels = np.argwhere(mask)
    index = np.full(ct.dims, -1, dtype=np.int64)
    index[mask] = np.arange(len(voxels))

    us, vs, caps = [], [], []
    if kappa > 0:
        hu = np.asarray(ct.data, dtype=np.float64)
        for axis in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            pair = mask[tuple(lo)] & mask[tuple(hi)]
            diff = hu[tuple(lo)][pair] - hu[tuple(hi)][pair]
            us.append(index[tuple(lo)][pair])
            vs.append(index[tuple(hi)][pair])
            caps.append(kappa * np.exp(-(diff * diff) / sigma))
    edge_u = np.concatenate(us) if us else np.zeros(0, dtype=np.int64)
    edge_v = np.concatenate(vs) if vs else np.zeros(0, dtype=np.int64)
    edge_caps = np.concatenate(caps) if caps else np.zeros(0)

    logger.debug(f"Vessel graph: {len(voxels)} nodes, {len(edge_u)} neighbor edges")
    return FlowNetwork(p[1] / vessel, p[2] / vessel, edge_u, edge_v, edge_caps, edge_caps.copy(), voxels)


def max_flow_min_cut(net: FlowNetwork) -> CutAssignment:
    """Exact max flow; the returned cut's capacity is checked against the flow value."""
    n = net.node_count
    if n == 0:
        return CutAssignment(sink_side=np.zeros(0, dtype=bool), flow=0.0)
    graph = maxflow.Graph[float](n, max(len(net.edge_u), 1))
    nodes = graph.add_nodes(n)
    for i in range(n):
        graph.add_tedge(nodes[i], float(net.source_caps[i]), float(net.sink_caps[i]))
    for u, v, cap, rev in zip(net.edge_u, net.edge_v, net.edge_caps, net.edge_rev_caps):
        graph.add_edge(nodes[int(u)], nodes[int(v)], float(cap), float(rev))
    flow = float(graph.maxflow())
    sink_side = np.array([graph.get_segment(nodes[i]) == 1 for i in range(n)], dtype=bool)

    capacity = net.cut_capacity(sink_side)
    if abs(capacity - flow) > 1e-6 * max(1.0, abs(flow)):
        raise NumericError(f"max-flow certificate failed: flow {flow} != cut capacity {capacity}")
    logger.debug(f"Max flow {flow:.6f} over {n} nodes; {int(sink_side.sum())} on the vein side")
    return CutAssignment(sink_side=sink_side, flow=flow)


def refine_artery_vein(probs, ct: Volume, vessel_mask: LabelMap,
                       kappa: float = 8.0, sigma: float = 100.0) -> LabelMap:
    """Artery/vein labels from the minimum cut inside vessel_mask; background elsewhere."""
    net = build_vessel_graph(probs, ct, vessel_mask, kappa, sigma)
    cut = max_flow_min_cut(net)
    labels = np.zeros(ct.dims, dtype=np.uint8)
    if net.node_count:
        labels[tuple(net.voxels.T)] = cut.labels()
    return LabelMap(labels, ct.spacing, ct.origin, AV_ALPHABET)


def vessel_mask_from_prediction(pred: LabelMap) -> LabelMap:
    """Union of predicted artery and vein voxels."""
    return pred.with_data((pred.data == ARTERY) | (pred.data == VEIN), frozenset({0, 1}))


def fuse_union(before: LabelMap, after: LabelMap, mode: str = "union1") -> LabelMap:
    """Union of the two predictions; union1 gives artery priority, union2 vein priority."""
    if mode not in FUSE_MODES:
        raise DataError(f"Unknown fuse mode {mode!r}; expected one of {FUSE_MODES}")
    check_geometry(before, after, "fused predictions")
    artery = (before.data == ARTERY) | (after.data == ARTERY)
    vein = (before.data == VEIN) | (after.data == VEIN)
    labels = np.full(before.dims, BACKGROUND, dtype=np.uint8)
    if mode == "union1":
        labels[vein] = VEIN
        labels[artery] = ARTERY
    else:
        labels[artery] = ARTERY
        labels[vein] = VEIN
    return LabelMap(labels, before.spacing, before.origin, AV_ALPHABET)
