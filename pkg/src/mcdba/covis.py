"""Multi-camera co-visibility graph.

Nodes are ``(t, c)`` frames. Edges are directed and come in three kinds:
temporal (same camera, different timesteps), spatial (adjacent cameras,
same timestep) and spatial-temporal (adjacent cameras, different timesteps,
oriented by the forward-motion prior). Every co-visible pair is stored in
both directions.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import DuplicateTimestep, ValidationError
from .geometry import EPS_Z, Intrinsics, Pose, Rig, project_masked, unproject

ADJACENCY_GRID = 16
ADJACENCY_THRESHOLD = 0.05
YAW_TIE_TOL = 1e-9


class FrameId(NamedTuple):
    t: int
    c: int

    def __str__(self) -> str:
        return f"({self.t},{self.c})"


class EdgeKind(str, enum.Enum):
    TEMPORAL = "temporal"
    SPATIAL = "spatial"
    SPATIAL_TEMPORAL = "spatial_temporal"


Edge = tuple[FrameId, FrameId]


@dataclass(frozen=True)
class GraphParams:
    dt_intra: int = 3
    r_intra: int = 2
    dt_inter: int = 2
    r_inter: int = 2
    spatial: bool = True  # False drops spatial and spatial-temporal edges

    def __post_init__(self):
        for name in ("dt_intra", "r_intra", "dt_inter", "r_inter"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValidationError(f"{name} must be a non-negative integer")
        if self.r_intra > self.dt_intra:
            raise ValidationError("r_intra must not exceed dt_intra")
        if self.r_inter > self.dt_inter:
            raise ValidationError("r_inter must not exceed dt_inter")

    @property
    def window(self) -> int:
        return max(self.dt_intra, self.dt_inter)


def _frustum_samples(intr: Intrinsics, n: int) -> np.ndarray:
    us = np.linspace(0.0, intr.width - 1, n)
    vs = np.linspace(0.0, intr.height - 1, n)
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu, vv], axis=-1).reshape(-1, 2)


def overlap_ratio(rig: Rig, ci: int, cj: int, grid: int = ADJACENCY_GRID) -> float:
    """Fraction of a ``grid x grid`` sample of camera ``ci`` at unit inverse depth seen by ``cj``."""
    intr_i, intr_j = rig.intrinsics(ci), rig.intrinsics(cj)
    X = unproject(intr_i, _frustum_samples(intr_i, grid), 1.0)
    G = (rig.extrinsic(cj).inverse() @ rig.extrinsic(ci)).matrix()
    uv, valid = project_masked(intr_j, X @ G.T, EPS_Z)
    valid &= intr_j.in_bounds(uv)
    return float(np.count_nonzero(valid)) / len(X)


def static_adjacency(
    rig: Rig, threshold: float = ADJACENCY_THRESHOLD, grid: int = ADJACENCY_GRID
) -> set[tuple[int, int]]:
    """Ordered camera pairs whose frustums overlap at unit inverse depth."""
    pairs = set()
    for ci, cj in itertools.permutations(range(len(rig)), 2):
        if overlap_ratio(rig, ci, cj, grid) > threshold:
            pairs.add((ci, cj))
    return pairs


def forward_yaw_distance(rig: Rig) -> np.ndarray:
    """Absolute yaw between each optical axis and the reference camera's, in the rig frame."""
    axes = np.array([cam.extrinsic.R[:, 2] for cam in rig.cameras])
    yaw = np.arctan2(axes[:, 0], axes[:, 2])
    diff = yaw - yaw[rig.reference_camera]
    return np.abs(np.arctan2(np.sin(diff), np.cos(diff)))


def forward_pairs(rig: Rig, adjacency: Iterable[tuple[int, int]]) -> set[tuple[int, int]]:
    """Adjacent pairs ``(c_i, c_j)`` where ``c_j`` is at least as forward-facing as ``c_i``.

    ``(t', c_i)`` is linked to ``(t'', c_j)`` for earlier ``t''``: under
    forward motion, what ``c_i`` sees now was seen earlier by ``c_j``.
    """
    yaw = forward_yaw_distance(rig)
    return {(ci, cj) for ci, cj in adjacency if yaw[cj] < yaw[ci] + YAW_TIE_TOL}


class CovisGraph:
    """Incrementally maintained co-visibility graph (single writer)."""

    def __init__(self, rig: Rig, params: GraphParams | None = None, adjacency=None):
        self.rig = rig
        self.params = params or GraphParams()
        if adjacency is None:
            adjacency = static_adjacency(rig)
        self.adjacency = frozenset(adjacency) if self.params.spatial else frozenset()
        self.forward = frozenset(forward_pairs(rig, self.adjacency))
        self.nodes: set[FrameId] = set()
        self.edges: dict[Edge, EdgeKind] = {}
        self.t_last: int | None = None
        self._seen: set[int] = set()

    # -- queries -------------------------------------------------------
    def timesteps(self) -> list[int]:
        return sorted({n.t for n in self.nodes})

    def nodes_at(self, t: int) -> list[FrameId]:
        return sorted(n for n in self.nodes if n.t == t)

    def sorted_edges(self) -> list[Edge]:
        return sorted(self.edges)

    def outgoing(self, node: FrameId) -> list[Edge]:
        return sorted(e for e in self.edges if e[0] == node)

    def degree(self, node: FrameId) -> int:
        return sum(1 for i, j in self.edges if i == node or j == node)

    def count_by_kind(self) -> dict[EdgeKind, int]:
        counts = {k: 0 for k in EdgeKind}
        for kind in self.edges.values():
            counts[kind] += 1
        return counts

    def copy(self) -> "CovisGraph":
        g = CovisGraph.__new__(CovisGraph)
        g.rig, g.params, g.adjacency, g.forward = self.rig, self.params, self.adjacency, self.forward
        g.nodes = set(self.nodes)
        g.edges = dict(self.edges)
        g.t_last = self.t_last
        g._seen = set(self._seen)
        return g

    # -- mutation ------------------------------------------------------
    def _add_pair(self, a: FrameId, b: FrameId, kind: EdgeKind) -> None:
        self.edges[(a, b)] = kind
        self.edges[(b, a)] = kind

    def update(self, t: int) -> "CovisGraph":
        """Insert all cameras at timestep ``t`` and apply the windowing rules."""
        if t in self._seen:
            raise DuplicateTimestep(f"timestep {t} already inserted")
        if self.t_last is not None and t <= self.t_last:
            raise ValidationError("timesteps must be inserted in increasing order")
        p = self.params
        existing = set(self.nodes)
        new = [FrameId(t, c) for c in range(len(self.rig))]
        self.nodes.update(new)
        self._seen.add(t)
        self.t_last = t

        for i in new:
            for j in existing:
                if j.c == i.c and 0 < t - j.t < p.r_intra and j.t >= t - p.dt_intra:
                    self._add_pair(i, j, EdgeKind.TEMPORAL)

        for ci, cj in self.adjacency:
            self.edges[(FrameId(t, ci), FrameId(t, cj))] = EdgeKind.SPATIAL

        for ci, cj in self.forward:
            for j in existing:
                if j.c == cj and t - p.r_inter <= j.t < t and j.t >= t - p.dt_inter:
                    self._add_pair(FrameId(t, ci), j, EdgeKind.SPATIAL_TEMPORAL)

        self._prune(t)
        return self

    def _prune(self, t: int) -> None:
        p = self.params
        limits = {
            EdgeKind.TEMPORAL: t - p.dt_intra,
            EdgeKind.SPATIAL: t - p.dt_inter,
            EdgeKind.SPATIAL_TEMPORAL: t - p.dt_inter,
        }
        self.edges = {
            e: k for e, k in self.edges.items() if min(e[0].t, e[1].t) >= limits[k]
        }
        connected = {n for e in self.edges for n in e}
        self.nodes = {n for n in self.nodes if n in connected or n.t == t}

    def remove_timestep(self, t: int) -> None:
        """Drop every camera at ``t`` and all incident edges."""
        self.nodes = {n for n in self.nodes if n.t != t}
        self.edges = {e: k for e, k in self.edges.items() if e[0].t != t and e[1].t != t}

    def dump(self) -> str:
        """One edge per line: ``t_i c_i t_j c_j kind``."""
        lines = [f"{i.t} {i.c} {j.t} {j.c} {self.edges[(i, j)].value}" for i, j in self.sorted_edges()]
        return "".join(line + "\n" for line in lines)


def update_graph(g: CovisGraph, t: int) -> CovisGraph:
    return g.update(t)


def parse_graph_dump(text: str) -> dict[Edge, EdgeKind]:
    edges = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValidationError(f"graph dump line {lineno}: expected 5 fields")
        ti, ci, tj, cj = (int(x) for x in parts[:4])
        edges[(FrameId(ti, ci), FrameId(tj, cj))] = EdgeKind(parts[4])
    return edges


def exhaustive_edges(nodes: Iterable[FrameId]) -> list[Edge]:
    """Every ordered pair of distinct nodes: the all-pairs baseline."""
    nodes = sorted(nodes)
    return [(a, b) for a in nodes for b in nodes if a != b]


# -- dynamic alternative -----------------------------------------------------


def _frustum_occupancy(
    world_from_cam: Pose, intr: Intrinsics, centers: np.ndarray, near: float, far: float
) -> np.ndarray:
    pc = world_from_cam.inverse().act(centers)
    z = pc[:, 2]
    ok = (z >= near) & (z <= far)
    zs = np.where(ok, z, 1.0)
    u = intr.fx * pc[:, 0] / zs + intr.cx
    v = intr.fy * pc[:, 1] / zs + intr.cy
    return ok & (u >= -0.5) & (u <= intr.width - 0.5) & (v >= -0.5) & (v <= intr.height - 0.5)


def _frustum_corners(world_from_cam: Pose, intr: Intrinsics, near: float, far: float) -> np.ndarray:
    px = np.array(
        [[-0.5, -0.5], [intr.width - 0.5, -0.5], [-0.5, intr.height - 0.5], [intr.width - 0.5, intr.height - 0.5]]
    )
    rays = unproject(intr, px, 0.0)[:, :3]
    pts = np.concatenate([rays * near, rays * far])
    return world_from_cam.act(pts)


def frustum_iou(
    frames: Mapping[FrameId, Pose],
    rig: Rig,
    near: float = 0.5,
    far: float = 20.0,
    voxel: float = 0.5,
) -> dict[Edge, float]:
    """Pairwise frustum IoU on a shared world voxel grid.

    ``frames`` maps each frame to its world-from-camera pose (``P_t T_c``).
    Returned keys are ordered pairs ``(a, b)`` with ``a < b``.
    """
    ids = sorted(frames)
    if len(ids) < 2:
        return {}
    corners = np.concatenate(
        [_frustum_corners(frames[f], rig.intrinsics(f.c), near, far) for f in ids]
    )
    lo = np.floor(corners.min(axis=0) / voxel) * voxel
    hi = corners.max(axis=0)
    axes = [np.arange(lo[k] + voxel / 2, hi[k] + voxel, voxel) for k in range(3)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    occ = {f: _frustum_occupancy(frames[f], rig.intrinsics(f.c), centers, near, far) for f in ids}
    out = {}
    for a, b in itertools.combinations(ids, 2):
        inter = np.count_nonzero(occ[a] & occ[b])
        union = np.count_nonzero(occ[a] | occ[b])
        out[(a, b)] = inter / union if union else 0.0
    return out


def frustum_overlap_edges(
    frames: Mapping[FrameId, Pose],
    rig: Rig,
    n_edges: int,
    near: float = 0.5,
    far: float = 20.0,
    voxel: float = 0.5,
) -> list[tuple[FrameId, FrameId, float]]:
    """The ``n_edges`` frame pairs with the highest frustum IoU (zero-IoU pairs dropped)."""
    ious = frustum_iou(frames, rig, near, far, voxel)
    ranked = sorted(
        ((a, b, iou) for (a, b), iou in ious.items() if iou > 0.0),
        key=lambda x: (-x[2], x[0].t, x[0].c, x[1].t, x[1].c),
    )
    return ranked[:n_edges]
