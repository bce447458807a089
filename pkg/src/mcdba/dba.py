"""Multi-camera dense bundle adjustment.

The relative pose of an edge ``(i, j)`` is decomposed into the free ego-poses
and the fixed camera extrinsics, ``G_ij = (P_tj T_cj)^-1 P_ti T_ci``, so the
unknowns are one pose per timestep plus one inverse-depth map per frame.

Each Gauss-Newton step assembles the block system

    [ B    E      ] [dxi]   [v]
    [ E^T  C + lI ] [dd ] = [w]

by a scattered sum over edges, eliminates the diagonal depth block with the
Schur complement and solves the reduced pose system with a Cholesky
factorization. Poses are updated as ``P <- exp(dxi) P``.

Block layout is fixed: free timesteps in ascending order for poses, frames in
``(t, c)`` order for depths. All edges are linearised together as one batch,
which requires every camera of the rig to share one resolution.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg

from .covis import CovisGraph, Edge, FrameId
from .errors import NoFreeVariables, NotPositiveDefinite, UnknownEdge, ValidationError
from .geometry import EPS_Z, Pose, Rig, se3_exp


@dataclass(frozen=True)
class DbaConfig:
    damping: float = 1e-4
    gn_steps_per_call: int = 2
    fix_depths: bool = False
    fix_poses: bool = False
    d_floor: float = 1e-4
    eps_z: float = EPS_Z

    def __post_init__(self):
        if self.damping < 0:
            raise ValidationError("damping must be non-negative")
        if self.gn_steps_per_call < 1:
            raise ValidationError("gn_steps_per_call must be >= 1")
        if self.fix_depths and self.fix_poses:
            raise ValidationError("cannot fix both depths and poses")
        if self.d_floor <= 0:
            raise ValidationError("d_floor must be positive")


@dataclass
class DbaProblem:
    """State and measurements for one bundle adjustment window.

    ``targets[e]`` holds the absolute target pixel coordinates ``x_i + f_ij``
    (H, W, 2) and ``confidences[e]`` the per-direction weights (H, W, 2).
    """

    rig: Rig
    edges: list[Edge]
    poses: dict[int, Pose]
    depths: dict[FrameId, np.ndarray]
    targets: dict[Edge, np.ndarray]
    confidences: dict[Edge, np.ndarray]
    anchor: frozenset[int] = frozenset()

    def __post_init__(self):
        self.edges = sorted(self.edges)
        self.anchor = frozenset(self.anchor)
        self.validate()

    @classmethod
    def from_graph(cls, graph: CovisGraph, poses, depths, targets, confidences, anchor=None):
        if anchor is None:
            anchor = {min(n.t for n in graph.nodes)}
        return cls(graph.rig, graph.sorted_edges(), dict(poses), dict(depths), targets, confidences, anchor)

    def validate(self) -> None:
        if not self.anchor:
            raise ValidationError("at least one anchored timestep is required")
        shapes = {self.rig.intrinsics(c).shape for c in range(len(self.rig))}
        if len(shapes) != 1:
            raise ValidationError("all cameras of the rig must share one resolution")
        shape = shapes.pop()
        for n, d in self.depths.items():
            if np.shape(d) != shape:
                raise ValidationError(f"depth of {n} has shape {np.shape(d)}, expected {shape}")
        for e in self.edges:
            i, j = e
            if e not in self.targets or e not in self.confidences:
                raise ValidationError(f"edge {i}->{j} lacks targets or confidences")
            if i not in self.depths:
                raise ValidationError(f"edge {i}->{j}: no depth for {i}")
            if i.t not in self.poses or j.t not in self.poses:
                raise ValidationError(f"edge {i}->{j}: missing ego-pose")

    def replace(self, **changes) -> "DbaProblem":
        return dataclasses.replace(self, **changes)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rig.intrinsics(0).shape

    def free_timesteps(self) -> list[int]:
        return sorted(t for t in self.poses if t not in self.anchor)


def _rigid_inverse(T: np.ndarray) -> np.ndarray:
    out = np.zeros_like(T)
    R = T[..., :3, :3]
    Rt = np.swapaxes(R, -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ab,...b->...a", Rt, T[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def _hat(w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _adjoint(T: np.ndarray) -> np.ndarray:
    R = T[..., :3, :3]
    adj = np.zeros(T.shape[:-2] + (6, 6))
    adj[..., :3, :3] = R
    adj[..., 3:, 3:] = R
    adj[..., :3, 3:] = _hat(T[..., :3, 3]) @ R
    return adj


@dataclass
class Linearization:
    """Residuals and Jacobians of a batch of edges, stored component-major.

    Pixels are flattened row-major and sit on the last axis. The Jacobian
    w.r.t. the incoming ego-pose is the negation of the outgoing one, so only
    the outgoing side is stored. The ``(E, HW, ...)`` properties give the
    pixel-major views.
    """

    edges: list[Edge]
    res: np.ndarray  # (E, 2, HW)
    valid: np.ndarray  # (E, HW)
    wgt: np.ndarray  # (E, 2, HW), zero where invalid
    jd: np.ndarray  # (E, 2, HW)
    jp: np.ndarray  # (E, 6, 2, HW)

    @property
    def residual(self) -> np.ndarray:
        return np.moveaxis(self.res, 1, -1)

    @property
    def weight(self) -> np.ndarray:
        return np.moveaxis(self.wgt, 1, -1)

    @property
    def J_depth(self) -> np.ndarray:
        return np.moveaxis(self.jd, 1, -1)

    @property
    def J_pose_i(self) -> np.ndarray:
        return np.moveaxis(self.jp, (1, 2), (3, 2))

    @property
    def J_pose_j(self) -> np.ndarray:
        return -self.J_pose_i

    def energy(self) -> float:
        return float(np.sum(self.wgt * self.res**2))


@dataclass
class _Projection:
    edges: list[Edge]
    G: np.ndarray  # (E, 4, 4)
    j_from_world: np.ndarray  # (E, 4, 4)
    fx: np.ndarray  # (E, 1)
    fy: np.ndarray
    X: tuple  # x', y', z', w' of the transformed points, each (E, HW)
    inv_z: np.ndarray  # (E, HW), zero where invalid
    valid: np.ndarray
    res: np.ndarray  # (E, 2, HW)
    wgt: np.ndarray
    world_from_i: np.ndarray  # (E, 4, 4)
    xn: np.ndarray  # normalised source coordinates, (E, HW)
    yn: np.ndarray
    d: np.ndarray

    def energy(self) -> float:
        return float(np.sum(self.wgt * self.res**2))


def _project_edges(problem: DbaProblem, edges: list[Edge], eps_z: float) -> _Projection:
    rig = problem.rig
    H, W = problem.shape
    n = len(edges)
    ext = np.stack([rig.extrinsic(c).matrix() for c in range(len(rig))])
    K = np.array([[k.fx, k.fy, k.cx, k.cy] for k in (rig.intrinsics(c) for c in range(len(rig)))])
    P = {t: p.matrix() for t, p in problem.poses.items()}
    ci = np.array([e[0].c for e in edges])
    cj = np.array([e[1].c for e in edges])
    world_from_i = np.stack([P[e[0].t] for e in edges]) @ ext[ci]
    j_from_world = _rigid_inverse(np.stack([P[e[1].t] for e in edges]) @ ext[cj])
    G = j_from_world @ world_from_i

    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    u, v = u.reshape(-1), v.reshape(-1)
    Ki, Kj = K[ci], K[cj]
    # homogeneous source points (xn, yn, 1, d) mapped by G, one coordinate at a time
    xn = (u - Ki[:, 2:3]) / Ki[:, 0:1]
    yn = (v - Ki[:, 3:4]) / Ki[:, 1:2]
    d = np.stack([problem.depths[e[0]].reshape(-1) for e in edges])
    g = G[:, :, :, None]
    x, y, z, w = (g[:, r, 0] * xn + g[:, r, 1] * yn + g[:, r, 2] + g[:, r, 3] * d for r in range(4))

    valid = z > eps_z
    inv_z = np.where(valid, 1.0 / np.where(valid, z, 1.0), 0.0)
    fx, fy = Kj[:, 0:1], Kj[:, 1:2]
    targets = np.stack([problem.targets[e].reshape(-1, 2) for e in edges])
    conf = np.stack([problem.confidences[e].reshape(-1, 2) for e in edges])
    res = np.empty((n, 2, H * W))
    res[:, 0] = np.where(valid, targets[..., 0] - (fx * x * inv_z + Kj[:, 2:3]), 0.0)
    res[:, 1] = np.where(valid, targets[..., 1] - (fy * y * inv_z + Kj[:, 3:4]), 0.0)
    wgt = np.moveaxis(conf, -1, 1) * valid[:, None]
    return _Projection(edges, G, j_from_world, fx, fy, (x, y, z, w), inv_z, valid, res, wgt, world_from_i, xn, yn, d)


def _empty_linearization(hw: int) -> Linearization:
    z = np.zeros((0, 2, hw))
    return Linearization([], z, np.zeros((0, hw), dtype=bool), z, z.copy(), np.zeros((0, 6, 2, hw)))


def linearize(problem: DbaProblem, edges: Sequence[Edge] | None = None, eps_z: float = EPS_Z) -> Linearization:
    """Evaluate residuals and analytic Jacobians for ``edges`` (default: all)."""
    edges = list(problem.edges if edges is None else edges)
    H, W = problem.shape
    if not edges:
        return _empty_linearization(H * W)
    pr = _project_edges(problem, edges, eps_z)
    n = len(edges)
    x, y, z, w = pr.X
    iz = pr.inv_z
    # nonzero entries of the projection Jacobian w.r.t. the xyz of X'
    a = pr.fx * iz
    b = -a * x * iz
    c = pr.fy * iz
    d = -c * y * iz

    t = pr.G[:, :3, 3, None]
    jd = np.empty((n, 2, H * W))
    jd[:, 0] = -(a * t[:, 0] + b * t[:, 2])
    jd[:, 1] = -(c * t[:, 1] + d * t[:, 2])

    # the left perturbation acts on the world point X_w = P_ti T_ci X, so with R the rotation of
    # (P_tj T_cj)^-1 and q = Jp R, the outgoing pose Jacobian is -q [w I, -[x_w]x] = [-w q, q cross x_w]
    R = pr.j_from_world[:, :3, :3, None]
    xw = pr.world_from_i[:, :3, :, None]
    one = 1.0
    X0, X1, X2 = (xw[:, r, 0] * pr.xn + xw[:, r, 1] * pr.yn + xw[:, r, 2] * one + xw[:, r, 3] * pr.d for r in range(3))
    jp = np.empty((n, 6, 2, H * W))
    for row, (p0, p1, i0, i1) in enumerate(((a, b, 0, 2), (c, d, 1, 2))):
        q0, q1, q2 = (p0 * R[:, i0, k] + p1 * R[:, i1, k] for k in range(3))
        jp[:, 0, row] = -w * q0
        jp[:, 1, row] = -w * q1
        jp[:, 2, row] = -w * q2
        jp[:, 3, row] = q1 * X2 - q2 * X1
        jp[:, 4, row] = q2 * X0 - q0 * X2
        jp[:, 5, row] = q0 * X1 - q1 * X0
    return Linearization(edges, pr.res, pr.valid, pr.wgt, jd, jp)


def _check_edge(problem: DbaProblem, edge: Edge) -> None:
    if edge not in problem.targets or edge not in set(problem.edges):
        raise UnknownEdge(f"edge {edge[0]}->{edge[1]} is not part of the problem")


def residuals(problem: DbaProblem, edge: Edge, eps_z: float = EPS_Z):
    """``(r, valid)`` with ``r = target - reprojection`` of shape (H, W, 2)."""
    _check_edge(problem, edge)
    lin = linearize(problem, [edge], eps_z)
    H, W = problem.shape
    return lin.residual[0].reshape(H, W, 2), lin.valid[0].reshape(H, W)


def jacobian_depth(problem: DbaProblem, edge: Edge, eps_z: float = EPS_Z) -> np.ndarray:
    """d r / d (inverse depth), per pixel, shape (H, W, 2)."""
    _check_edge(problem, edge)
    return linearize(problem, [edge], eps_z).J_depth[0].reshape(problem.shape + (2,))


def jacobian_pose(problem: DbaProblem, edge: Edge, which: str, eps_z: float = EPS_Z) -> np.ndarray:
    """d r / d xi for the outgoing (``"i"``) or incoming (``"j"``) ego-pose, shape (H, W, 2, 6)."""
    _check_edge(problem, edge)
    if which not in ("i", "j"):
        raise ValueError("which must be 'i' or 'j'")
    J = linearize(problem, [edge], eps_z).J_pose_i[0]
    return (J if which == "i" else -J).reshape(problem.shape + (2, 6))


def energy(problem: DbaProblem, eps_z: float = EPS_Z) -> float:
    """Confidence-weighted squared reprojection error summed over all edges."""
    if not problem.edges:
        return 0.0
    return _project_edges(problem, list(problem.edges), eps_z).energy()


@dataclass
class NormalEquations:
    """Scattered-sum blocks of the Gauss-Newton system.

    ``B[a, b]`` is the 6x6 block between free timesteps ``a`` and ``b`` and
    ``E[a, k]`` the 6 x HW coupling between timestep ``a`` and frame ``k``.
    ``C[k]`` and ``w[k]`` are per-pixel vectors of frame ``k``.
    """

    timesteps: list[int]
    nodes: list[FrameId]
    B: np.ndarray  # (T', T', 6, 6)
    E: np.ndarray  # (T', N, 6, HW)
    C: np.ndarray  # (N, HW)
    v: np.ndarray  # (T', 6)
    w: np.ndarray  # (N, HW)
    fix_depths: bool = False
    fix_poses: bool = False

    def dense(self, damping: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Materialise the damped system as one dense matrix and right-hand side."""
        nt = len(self.timesteps)
        nn, hw = self.C.shape
        n = 6 * nt + nn * hw
        H = np.zeros((n, n))
        g = np.zeros(n)
        H[: 6 * nt, : 6 * nt] = self.B.transpose(0, 2, 1, 3).reshape(6 * nt, 6 * nt)
        g[: 6 * nt] = self.v.reshape(-1)
        if nn:
            idx = np.arange(6 * nt, n)
            H[idx, idx] = (self.C + damping).reshape(-1)
            g[6 * nt :] = self.w.reshape(-1)
            Ed = self.E.transpose(0, 2, 1, 3).reshape(6 * nt, nn * hw)
            H[: 6 * nt, 6 * nt :] = Ed
            H[6 * nt :, : 6 * nt] = Ed.T
        return H, g


def _scatter(parts, size: int, values: np.ndarray) -> np.ndarray:
    """Signed sum of per-edge ``values`` into ``size`` slots via an incidence matrix.

    ``parts`` holds ``(slot per edge, mask, sign)`` triples.
    """
    n = values.shape[0]
    M = np.zeros((size, n))
    cols = np.arange(n)
    for slot, mask, sign in parts:
        np.add.at(M, (slot[mask], cols[mask]), sign)
    return (M @ values.reshape(n, -1)).reshape((size,) + values.shape[1:])


def assemble(problem: DbaProblem, cfg: DbaConfig | None = None, lin: Linearization | None = None) -> NormalEquations:
    cfg = cfg or DbaConfig()
    timesteps = [] if cfg.fix_poses else problem.free_timesteps()
    if not timesteps and cfg.fix_depths:
        raise NoFreeVariables("no free poses and depths are fixed")
    nodes = [] if cfg.fix_depths else sorted(problem.depths)
    lin = lin if lin is not None else linearize(problem, eps_z=cfg.eps_z)
    t_index = {t: a for a, t in enumerate(timesteps)}
    n_index = {n: k for k, n in enumerate(nodes)}
    nt, nn = len(timesteps), len(nodes)
    hw = int(np.prod(problem.shape))

    B = np.zeros((nt, nt, 6, 6))
    E = np.zeros((nt, nn, 6, hw))
    C = np.zeros((nn, hw))
    v = np.zeros((nt, 6))
    w = np.zeros((nn, hw))
    if not lin.edges:
        return NormalEquations(timesteps, nodes, B, E, C, v, w, cfg.fix_depths, cfg.fix_poses)

    Wt, r, Jd, Jp = lin.wgt, lin.res, lin.jd, lin.jp
    a_i = np.array([t_index.get(e[0].t, -1) for e in lin.edges])
    a_j = np.array([t_index.get(e[1].t, -1) for e in lin.edges])
    k_i = np.array([n_index.get(e[0], -1) for e in lin.edges])
    # on same-timestep edges the two pose Jacobians cancel exactly
    same = np.array([e[0].t == e[1].t for e in lin.edges])
    a_i = np.where(same, -1, a_i)
    a_j = np.where(same, -1, a_j)

    n = len(lin.edges)
    if nt:
        Jf = Jp.reshape(n, 6, -1)
        WJ = Jf * Wt.reshape(n, 1, -1)
        g_i = -(WJ @ r.reshape(n, -1, 1))[..., 0]
        H_ii = WJ @ np.swapaxes(Jf, 1, 2)
        oi, oj = a_i >= 0, a_j >= 0
        both = oi & oj
        v = _scatter([(a_i, oi, 1.0), (a_j, oj, -1.0)], nt, g_i)
        B = _scatter(
            [(a_i * nt + a_i, oi, 1.0), (a_j * nt + a_j, oj, 1.0), (a_i * nt + a_j, both, -1.0), (a_j * nt + a_i, both, -1.0)],
            nt * nt,
            H_ii,
        ).reshape(nt, nt, 6, 6)
        if nn:
            WJd = Wt * Jd
            e_i = Jp[:, :, 0] * WJd[:, None, 0] + Jp[:, :, 1] * WJd[:, None, 1]
            has_k = k_i >= 0
            E = _scatter([(a_i * nn + k_i, oi & has_k, 1.0), (a_j * nn + k_i, oj & has_k, -1.0)], nt * nn, e_i)
            E = E.reshape(nt, nn, 6, hw)
    if nn:
        has_k = k_i >= 0
        C = _scatter([(k_i, has_k, 1.0)], nn, np.sum(Wt * Jd**2, axis=1))
        w = _scatter([(k_i, has_k, 1.0)], nn, -np.sum(Wt * Jd * r, axis=1))
    return NormalEquations(timesteps, nodes, B, E, C, v, w, cfg.fix_depths, cfg.fix_poses)


def _smallest_pivot(S: np.ndarray) -> float:
    """Run an unpivoted LDL^T and return the smallest diagonal pivot."""
    A = S.copy()
    n = A.shape[0]
    pivot = np.inf
    for k in range(n):
        d = A[k, k]
        pivot = min(pivot, d)
        if d <= 0:
            break
        A[k + 1 :, k + 1 :] -= np.outer(A[k + 1 :, k], A[k, k + 1 :]) / d
    return float(pivot)


def _cholesky_solve(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(S, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError):
        pivot = _smallest_pivot(S)
        raise NotPositiveDefinite(f"reduced pose system not positive definite (pivot {pivot:.3e})", pivot)
    return scipy.linalg.cho_solve(factor, rhs)


def schur_solve(ne: NormalEquations, cfg: DbaConfig | None = None):
    """Solve the damped block system.

    Returns ``(dxi, dd)``: ``dxi`` maps free timesteps to 6-vectors and ``dd``
    maps frames to flat per-pixel updates.
    """
    cfg = cfg or DbaConfig()
    nt = len(ne.timesteps)
    cd = ne.C + cfg.damping
    inv = np.divide(1.0, cd, out=np.zeros_like(cd), where=cd > 0)

    if nt == 0:
        return {}, {n: ne.w[k] * inv[k] for k, n in enumerate(ne.nodes)}

    S = ne.B.transpose(0, 2, 1, 3).reshape(6 * nt, 6 * nt)
    rhs = ne.v.reshape(-1)
    if ne.nodes:
        M = ne.E.transpose(0, 2, 1, 3).reshape(6 * nt, -1)
        S = S - (M * inv.reshape(-1)) @ M.T
        rhs = rhs - M @ (inv * ne.w).reshape(-1)
    S = 0.5 * (S + S.T)
    x = _cholesky_solve(S, rhs).reshape(nt, 6)
    dxi = {t: x[a] for a, t in enumerate(ne.timesteps)}
    if not ne.nodes:
        return dxi, {}
    M = ne.E.transpose(0, 2, 1, 3).reshape(6 * nt, -1)
    dd_all = inv * (ne.w - (x.reshape(-1) @ M).reshape(ne.w.shape))
    return dxi, {n: dd_all[k] for k, n in enumerate(ne.nodes)}


@dataclass
class StepDiagnostics:
    energy_before: float
    energy_after: float
    energies: list[float] = field(default_factory=list)
    max_pose_update: float = 0.0
    max_depth_update: float = 0.0

    def as_record(self) -> dict:
        return {
            "energy_before": self.energy_before,
            "energy_after": self.energy_after,
            "energies": list(self.energies),
            "max_pose_update": self.max_pose_update,
            "max_depth_update": self.max_depth_update,
        }


def apply_update(problem: DbaProblem, dxi, dd, d_floor: float) -> DbaProblem:
    poses = dict(problem.poses)
    for t, x in dxi.items():
        poses[t] = se3_exp(x) @ poses[t]
    depths = dict(problem.depths)
    for n, delta in dd.items():
        depths[n] = np.maximum(depths[n] + delta.reshape(depths[n].shape), d_floor)
    return problem.replace(poses=poses, depths=depths)


def dba_step(problem: DbaProblem, cfg: DbaConfig | None = None) -> tuple[DbaProblem, StepDiagnostics]:
    """Run ``cfg.gn_steps_per_call`` Gauss-Newton iterations."""
    cfg = cfg or DbaConfig()
    lin = linearize(problem, eps_z=cfg.eps_z)
    e0 = lin.energy()
    diag = StepDiagnostics(e0, e0, [e0])
    for _ in range(cfg.gn_steps_per_call):
        ne = assemble(problem, cfg, lin)
        dxi, dd = schur_solve(ne, cfg)
        if dxi:
            diag.max_pose_update = max(diag.max_pose_update, max(float(np.abs(x).max()) for x in dxi.values()))
        if dd:
            diag.max_depth_update = max(diag.max_depth_update, max(float(np.abs(x).max()) for x in dd.values()))
        problem = apply_update(problem, dxi, dd, cfg.d_floor)
        if len(diag.energies) < cfg.gn_steps_per_call:
            lin = linearize(problem, eps_z=cfg.eps_z)
            diag.energies.append(lin.energy())
        else:
            diag.energies.append(energy(problem, cfg.eps_z))
    diag.energy_after = diag.energies[-1]
    return problem, diag


def problem_from_oracle(
    rig: Rig,
    edges: Iterable[Edge],
    poses: Mapping[int, Pose],
    depths: Mapping[FrameId, np.ndarray],
    measurements: Mapping[Edge, tuple[np.ndarray, np.ndarray]],
    anchor: Iterable[int],
) -> DbaProblem:
    edges = sorted(edges)
    return DbaProblem(
        rig,
        edges,
        dict(poses),
        {n: np.array(d, dtype=np.float64) for n, d in depths.items()},
        {e: measurements[e][0] for e in edges},
        {e: measurements[e][1] for e in edges},
        frozenset(anchor),
    )
