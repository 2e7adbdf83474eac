"""Spatio-temporal connection graph over (camera, time) frames.

Edges are directed: an edge ``src -> dst`` means pixels of ``src`` are
reprojected into ``dst`` and compared against the flow ``src -> dst``.
Temporal edges are inserted as both directions of a pair. Spatial edges are
gated per ordered camera pair by the overlap ratio of that direction only.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .frames import FrameId
from .geometry import pixel_grid, relative_pose, reproject

DEFAULT_OVERLAP = 0.75
EDGE_BUDGETS = (48, 96, 192)


class EdgeKind(str, Enum):
    TEMPORAL = "temporal"
    SPATIAL = "spatial"
    SPATIO_TEMPORAL = "spatio-temporal"


def edge_kind(src, dst):
    """Kind implied by the endpoints' (camera, time) relation."""
    if src == dst:
        raise ValueError("self edges are not allowed")
    if src.camera == dst.camera:
        return EdgeKind.TEMPORAL
    if src.time == dst.time:
        return EdgeKind.SPATIAL
    return EdgeKind.SPATIO_TEMPORAL


@dataclass(frozen=True)
class Edge:
    src: FrameId
    dst: FrameId
    kind: EdgeKind
    created_at: int

    def __post_init__(self):
        if edge_kind(self.src, self.dst) is not self.kind:
            raise ValueError(f"edge {self.src}->{self.dst} cannot be {self.kind.value}")

    @property
    def key(self):
        return (self.src, self.dst)

    @property
    def inter(self):
        return self.kind is not EdgeKind.TEMPORAL

    def age_key(self):
        return (self.created_at, tuple(self.src), tuple(self.dst))


@dataclass
class GraphState:
    """Edge set plus per-camera active windows and archives.

    ``edges`` is the optimisation edge set and respects ``max_edges`` after
    every public mutation. ``history`` keeps every edge ever inserted, which
    the refinement stage reuses.
    """

    n_cameras: int
    window_capacity: int = 25
    max_edges: int = None
    active: list = None
    inactive: list = None
    edges: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.active is None:
            self.active = [[] for _ in range(self.n_cameras)]
        if self.inactive is None:
            self.inactive = [[] for _ in range(self.n_cameras)]

    def add_frame(self, frame):
        frame = FrameId(*frame)
        if not 0 <= frame.camera < self.n_cameras:
            raise ValueError(f"camera {frame.camera} outside [0, {self.n_cameras})")
        if frame not in self.active[frame.camera]:
            self.active[frame.camera].append(frame)

    def is_active(self, frame):
        return frame in self.active[frame.camera]

    def active_frames(self):
        return [f for cam in self.active for f in cam]

    def insert(self, src, dst, created_at):
        """Insert one edge unless it already exists; returns the edge or None."""
        src, dst = FrameId(*src), FrameId(*dst)
        if (src, dst) in self.edges:
            return None
        e = Edge(src, dst, edge_kind(src, dst), int(created_at))
        self.edges[e.key] = e
        self.history.setdefault(e.key, e)
        return e

    def sorted_edges(self):
        return sorted(self.edges.values(), key=Edge.age_key)

    def check(self):
        """Full-scan invariant check; raises AssertionError on violation."""
        for e in self.edges.values():
            assert e.kind is edge_kind(e.src, e.dst)
        for cam in self.active:
            assert len(cam) <= self.window_capacity
        if self.max_edges is not None:
            assert len(self.edges) <= self.max_edges


def overlap_ratio(src, dst):
    """Fraction of ``src``'s valid pixels that reproject validly into ``dst``.

    ``src`` needs ``pose``, ``disparity``, ``intrinsics`` and ``valid``;
    ``dst`` needs ``pose`` and ``intrinsics``.
    """
    K_i = src.intrinsics
    valid = np.asarray(src.valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        return 0.0
    grid = pixel_grid(K_i.height, K_i.width)
    T_ij = relative_pose(src.pose, dst.pose)
    r = reproject(grid, np.where(valid, src.disparity, 1.0), K_i, dst.intrinsics, T_ij, mask=valid)
    return float(np.count_nonzero(r.valid)) / n


def _budget(graph, created_at):
    if graph.max_edges is not None and len(graph.edges) > graph.max_edges:
        return balance_connections(graph, graph.max_edges)
    return []


def add_temporal_edges(graph, new_frame, radius, created_at=None):
    """Pair ``new_frame`` with its ``radius`` most recent same-camera predecessors."""
    new_frame = FrameId(*new_frame)
    created_at = new_frame.time if created_at is None else created_at
    prior = [f for f in graph.active[new_frame.camera] if f.time < new_frame.time]
    prior.sort(key=lambda f: f.time, reverse=True)
    added = []
    for old in prior[: max(int(radius), 0)]:
        for s, d in ((new_frame, old), (old, new_frame)):
            e = graph.insert(s, d, created_at)
            if e is not None:
                added.append(e)
    _budget(graph, created_at)
    return added


def detect_spatial_edges(graph, states, time, threshold=DEFAULT_OVERLAP, created_at=None):
    """Connect every ordered camera pair at ``time`` whose overlap reaches ``threshold``."""
    created_at = time if created_at is None else created_at
    frames = [f for f in graph.active_frames() if f.time == time and f in states]
    frames.sort()
    added = []
    for a in frames:
        for b in frames:
            if a.camera == b.camera:
                continue
            if overlap_ratio(states[a], states[b]) >= threshold:
                e = graph.insert(a, b, created_at)
                if e is not None:
                    added.append(e)
    _budget(graph, created_at)
    return added


def detect_st_edges(graph, states, active_frame, threshold=DEFAULT_OVERLAP, per_camera_cap=2, created_at=None):
    """Link ``active_frame`` to the newest qualifying inactive frames of other cameras."""
    active_frame = FrameId(*active_frame)
    created_at = active_frame.time if created_at is None else created_at
    added = []
    for cam in range(graph.n_cameras):
        if cam == active_frame.camera:
            continue
        found = 0
        for old in sorted(graph.inactive[cam], key=lambda f: f.time, reverse=True):
            if found >= per_camera_cap:
                break
            if old.time == active_frame.time or old not in states:
                continue
            if overlap_ratio(states[active_frame], states[old]) >= threshold:
                found += 1
                e = graph.insert(active_frame, old, created_at)
                if e is not None:
                    added.append(e)
    _budget(graph, created_at)
    return added


def _pair_group(e):
    a, b = sorted((e.src.camera, e.dst.camera))
    return (a, b)


def balance_connections(graph, max_edges):
    """Prune oldest edges until at most ``max_edges`` remain.

    Whole creation batches go oldest first. When only part of a batch has to
    go, removal draws from whichever camera-pair group currently holds the
    most edges of that batch, so the survivors are spread evenly over camera
    pairs. Ties fall back to ``(src, dst)`` order.
    """
    excess = len(graph.edges) - int(max_edges)
    if excess <= 0:
        return []
    ordered = graph.sorted_edges()
    removed = []
    i = 0
    while excess > 0:
        stamp = ordered[i].created_at
        j = i
        while j < len(ordered) and ordered[j].created_at == stamp:
            j += 1
        batch = ordered[i:j]
        if len(batch) <= excess:
            drop = batch
        else:
            groups = {}
            for e in batch:
                groups.setdefault(_pair_group(e), []).append(e)
            drop = []
            for _ in range(excess):
                key = max(sorted(groups), key=lambda k: len(groups[k]))
                drop.append(groups[key].pop(0))
        for e in drop:
            del graph.edges[e.key]
            removed.append(e)
        excess -= len(drop)
        i = j
    return removed


def edge_stats(graph, edges=None):
    """Intra/inter-camera fractions and per-kind counts."""
    edges = list(graph.edges.values()) if edges is None else list(edges)
    counts = {k.value: 0 for k in EdgeKind}
    for e in edges:
        counts[e.kind.value] += 1
    total = len(edges)
    intra = counts[EdgeKind.TEMPORAL.value]
    return {
        "total": total,
        "intra_fraction": intra / total if total else 0.0,
        "inter_fraction": (total - intra) / total if total else 0.0,
        "counts": counts,
    }


def retire_frames(graph, camera, window_capacity=None):
    """Move the oldest active frames beyond capacity into the archive.

    Edges touching a retired frame leave the optimisation set; the frame's
    state is left to the caller, which keeps it fixed from here on.
    """
    cap = graph.window_capacity if window_capacity is None else int(window_capacity)
    window = graph.active[camera]
    window.sort(key=lambda f: f.time)
    retired = []
    while len(window) > cap:
        f = window.pop(0)
        graph.inactive[camera].append(f)
        retired.append(f)
    if retired:
        gone = set(retired)
        for key in [k for k in graph.edges if k[0] in gone or k[1] in gone]:
            del graph.edges[key]
    return retired
