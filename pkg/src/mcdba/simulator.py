"""Procedural rigs, trajectories, depth fields and a ground-truth flow oracle.

Everything here is a pure function of its spec and seed. Depth fields are
rounded to float32 so that they survive the on-disk grid format unchanged.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .covis import Edge, FrameId
from .errors import MissingDepth, ValidationError
from .geometry import EPS_Z, Camera, Intrinsics, Pose, Rig, project_masked, se3_exp, unproject

OUTLIER_SHIFT_PX = 20.0
OUTLIER_MAX_CONFIDENCE = 0.1


@dataclass(frozen=True)
class RigSpec:
    n_cameras: int = 6
    fov_deg: float = 90.0
    ring_radius: float = 0.05
    width: int = 16
    height: int = 12
    spacing_deg: float = 0.0  # yaw between neighbouring cameras; 0 spreads them evenly over the ring

    def __post_init__(self):
        if not 0.0 <= self.spacing_deg <= 360.0:
            raise ValidationError("spacing_deg must lie in [0, 360]")
        if self.n_cameras < 1:
            raise ValidationError("n_cameras must be >= 1")
        if not 10.0 <= self.fov_deg <= 170.0:
            raise ValidationError("fov_deg must lie in [10, 170]")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be positive")
        if self.ring_radius < 0:
            raise ValidationError("ring_radius must be non-negative")


class TrajectoryModel(str, enum.Enum):
    STATIC = "static"
    FORWARD_CONSTANT = "forward_constant"
    FORWARD_YAW = "forward_yaw"


@dataclass(frozen=True)
class TrajectorySpec:
    model: TrajectoryModel = TrajectoryModel.FORWARD_CONSTANT
    speed: float = 0.5
    yaw_rate: float = 0.0
    n_steps: int = 12

    def __post_init__(self):
        object.__setattr__(self, "model", TrajectoryModel(self.model))
        if self.n_steps < 1:
            raise ValidationError("n_steps must be >= 1")


@dataclass(frozen=True)
class NoiseSpec:
    pose_sigma: float = 0.0
    depth_rel_sigma: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValidationError("outlier_fraction must lie in [0, 1]")
        if self.pose_sigma < 0 or self.depth_rel_sigma < 0:
            raise ValidationError("noise levels must be non-negative")


def yaw_rotation(angle: float) -> np.ndarray:
    """Rotation about the rig's vertical (y, pointing down) axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def make_rig(spec: RigSpec) -> Rig:
    """Cameras on a ring, optical axes pointing radially outward.

    Cameras are evenly spaced unless ``spacing_deg`` fixes the yaw step.

    Camera 0 faces forward (+z) and is the reference camera.
    """
    intr = Intrinsics.from_fov(spec.fov_deg, spec.width, spec.height)
    if spec.n_cameras == 1:
        return Rig((Camera(intr, Pose.identity()),), 0)
    cams = []
    for k in range(spec.n_cameras):
        yaw = np.radians(spec.spacing_deg) * k if spec.spacing_deg else 2.0 * np.pi * k / spec.n_cameras
        R = yaw_rotation(yaw)
        cams.append(Camera(intr, Pose.from_rt(R, spec.ring_radius * R[:, 2])))
    return Rig(tuple(cams), 0)


def make_trajectory(spec: TrajectorySpec) -> list[Pose]:
    """Rig poses in the world, starting at the identity."""
    poses = []
    pos = np.zeros(3)
    for k in range(spec.n_steps):
        if spec.model is TrajectoryModel.STATIC:
            poses.append(Pose.identity())
            continue
        heading = k * spec.yaw_rate if spec.model is TrajectoryModel.FORWARD_YAW else 0.0
        R = yaw_rotation(heading)
        poses.append(Pose.from_rt(R, pos.copy()))
        pos = pos + spec.speed * R[:, 2]
    return poses


_N_WAVES = 4
_MAX_FREQ = 2.0  # cycles per image side


def make_depth_field(seed, size: tuple[int, int], depth_range: tuple[float, float]) -> np.ndarray:
    """Smooth random inverse-depth field in ``[1/d_far, 1/d_near]``.

    ``size`` is ``(height, width)`` and ``depth_range`` is ``(d_near, d_far)``
    in world units. The result is float32-representable.
    """
    d_near, d_far = depth_range
    if not 0 < d_near < d_far:
        raise ValidationError("need 0 < d_near < d_far")
    lo, hi = 1.0 / d_far, 1.0 / d_near
    h, w = size
    rng = np.random.default_rng(seed)
    amps = rng.uniform(0.2, 1.0, _N_WAVES)
    amps /= amps.sum()
    freqs = rng.uniform(-_MAX_FREQ, _MAX_FREQ, (_N_WAVES, 2))
    phases = rng.uniform(0, 2 * np.pi, _N_WAVES)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    field_ = np.zeros((h, w))
    for a, (fu, fv), ph in zip(amps, freqs, phases):
        field_ += a * np.sin(2 * np.pi * (fu * u / w + fv * v / h) + ph)
    d = lo + (hi - lo) * (np.clip(field_, -1.0, 1.0) + 1.0) / 2.0
    return np.clip(d.astype(np.float32), _f32_inside(lo, +1), _f32_inside(hi, -1)).astype(np.float64)


def _f32_inside(x: float, direction: int) -> np.float32:
    """Nearest float32 to ``x`` that does not leave the range in the given direction."""
    f = np.float32(x)
    if direction * (float(f) - x) < 0:
        f = np.nextafter(f, np.float32(direction * np.inf))
    return f


def depth_gradient_bound(size: tuple[int, int], depth_range: tuple[float, float]) -> float:
    """Upper bound on the per-pixel finite difference of :func:`make_depth_field`."""
    d_near, d_far = depth_range
    h, w = size
    span = 1.0 / d_near - 1.0 / d_far
    # |sin(a + x) - sin(a)| <= |x|, amplitudes sum to one, float32 rounding adds ~1 ulp
    return span / 2.0 * 2 * np.pi * _MAX_FREQ / min(h, w) + 1e-6 * (1.0 / d_near)


@dataclass
class Scene:
    """Ground truth for one synthetic run."""

    rig: Rig
    poses: list[Pose]
    depths: dict[FrameId, np.ndarray]
    depth_range: tuple[float, float] = (3.0, 20.0)
    seed: int = 0
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    @property
    def n_steps(self) -> int:
        return len(self.poses)


def node_seed(seed: int, node: FrameId) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 0, node.t, node.c])


def make_scene(
    rig_spec: RigSpec,
    traj_spec: TrajectorySpec,
    depth_range: tuple[float, float] = (3.0, 20.0),
    seed: int = 0,
    noise: NoiseSpec | None = None,
) -> Scene:
    rig = make_rig(rig_spec)
    poses = make_trajectory(traj_spec)
    depths = {}
    for t in range(len(poses)):
        for c in range(len(rig)):
            node = FrameId(t, c)
            depths[node] = make_depth_field(node_seed(seed, node), rig.intrinsics(c).shape, depth_range)
    return Scene(rig, poses, depths, depth_range, seed, noise or NoiseSpec(seed=seed))


def edge_geometry(rig: Rig, poses, depths: Mapping[FrameId, np.ndarray], edge: Edge):
    """GT reprojection of the source frame into the target frame: ``(targets, valid)``."""
    i, j = edge
    if i not in depths:
        raise MissingDepth(f"no depth for node {i}")
    pi, pj = poses[i.t], poses[j.t]
    Pi = pi.matrix() if isinstance(pi, Pose) else pi
    Pj = pj.matrix() if isinstance(pj, Pose) else pj
    G = np.linalg.inv(Pj @ rig.extrinsic(j.c).matrix()) @ Pi @ rig.extrinsic(i.c).matrix()
    intr_i = rig.intrinsics(i.c)
    X = unproject(intr_i, intr_i.pixel_grid(), depths[i])
    return project_masked(rig.intrinsics(j.c), X @ G.T, EPS_Z)


def edge_rng(seed: int, edge: Edge) -> np.random.Generator:
    i, j = edge
    return np.random.default_rng(np.random.SeedSequence([seed, 1, i.t, i.c, j.t, j.c]))


def oracle_targets(
    rig: Rig,
    poses,
    depths: Mapping[FrameId, np.ndarray],
    edges: Iterable[Edge],
    noise: NoiseSpec | None = None,
) -> dict[Edge, tuple[np.ndarray, np.ndarray]]:
    """Targets ``p_ij`` and confidences ``w_ij`` consistent with the given state.

    Pixels whose ground-truth projection lands inside the target image get
    confidence 1; pixels behind the target camera or outside its image have no
    correspondence and get 0. A fixed number ``floor(outlier_fraction * H * W)`` of pixels per
    edge is displaced by up to 20 px and given confidence in ``[0, 0.1]``.
    """
    noise = noise or NoiseSpec()
    out = {}
    for edge in edges:
        targets, valid = edge_geometry(rig, poses, depths, edge)
        valid &= rig.intrinsics(edge[1].c).in_bounds(targets)
        conf = np.repeat(valid[..., None].astype(np.float64), 2, axis=-1)
        n_out = int(np.floor(noise.outlier_fraction * valid.size))
        if n_out:
            rng = edge_rng(noise.seed, edge)
            idx = rng.permutation(valid.size)[:n_out]
            shift = rng.uniform(-OUTLIER_SHIFT_PX, OUTLIER_SHIFT_PX, (n_out, 2))
            w = rng.uniform(0.0, OUTLIER_MAX_CONFIDENCE, n_out)
            t_flat = targets.reshape(-1, 2)
            c_flat = conf.reshape(-1, 2)
            t_flat[idx] += shift
            c_flat[idx] = np.where(valid.reshape(-1)[idx, None], w[:, None], 0.0)
        out[edge] = (targets, conf)
    return out


def perturb_pose(pose: Pose, sigma: float, rng: np.random.Generator) -> Pose:
    """Left-multiply by a random twist of norm ``sigma``."""
    if sigma == 0:
        return pose
    xi = rng.normal(size=6)
    xi *= sigma / np.linalg.norm(xi)
    return se3_exp(xi) @ pose


def perturb_depth(d: np.ndarray, rel_sigma: float, rng: np.random.Generator) -> np.ndarray:
    if rel_sigma == 0:
        return d.copy()
    factor = np.clip(1.0 + rel_sigma * rng.normal(size=d.shape), 0.2, None)
    return d * factor
