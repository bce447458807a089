"""Incremental warmup, initialization and active-phase inference.

Frames are identified by their stream timestep. Internally the window is a
list of keyframe slots ``0..K-1`` so that the co-visibility windows always act
on consecutive keyframes; removing a keyframe shifts later slots down and the
graph is rebuilt by replaying its updates over the slots.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Protocol

import numpy as np

from .correlation import CorrVolume, FeatureGrid, build_correlation, lookup
from .covis import CovisGraph, Edge, FrameId, GraphParams
from .dba import DbaConfig, DbaProblem, dba_step
from .errors import MissingFrame, NotPositiveDefinite, StreamExhausted, ValidationError
from .geometry import Pose, Rig, project_masked, unproject
from .simulator import NoiseSpec, Scene, node_seed, oracle_targets, perturb_depth, perturb_pose


@dataclass(frozen=True)
class PipelineConfig:
    n_warmup: int = 3
    warmup_flow_threshold: float = 1.75
    n_itr_wm: int = 16
    n_iter1: int = 4
    n_iter2: int = 2
    keyframe_flow_threshold: float = 1.75
    depth_init_window: int = 4
    damping_retries: int = 6  # on a failed factorization the depth damping grows tenfold per retry
    graph: GraphParams = field(default_factory=GraphParams)
    dba: DbaConfig = field(default_factory=DbaConfig)

    def __post_init__(self):
        for name in ("n_warmup", "n_itr_wm", "n_iter1", "n_iter2", "depth_init_window"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.damping_retries < 0:
            raise ValidationError("damping_retries must be non-negative")
        if self.warmup_flow_threshold < 0 or self.keyframe_flow_threshold < 0:
            raise ValidationError("flow thresholds must be non-negative")


class Estimate(Protocol):
    """Read access to the current state, keyed by stream frames."""

    rig: Rig

    def pose(self, t: int) -> Pose: ...

    def depth(self, frame: FrameId) -> np.ndarray: ...


class FlowProvider(Protocol):
    def __call__(self, edge: Edge, estimate: Estimate) -> tuple[np.ndarray, np.ndarray]:
        """Targets ``x_i + f_ij`` (H, W, 2) and confidences in [0, 1] (H, W, 2)."""
        ...


class OracleFlowProvider:
    """Ground-truth correspondences from a simulated scene; ignores the estimate."""

    def __init__(self, scene: Scene, noise: NoiseSpec | None = None, disabled_cameras: Iterable[int] = ()):
        self.scene = scene
        self.noise = noise or NoiseSpec()
        self.disabled = frozenset(disabled_cameras)
        self._cache: dict[Edge, tuple[np.ndarray, np.ndarray]] = {}

    def __call__(self, edge: Edge, estimate: Estimate | None = None):
        if edge not in self._cache:
            i, j = edge
            if not (0 <= i.t < self.scene.n_steps and 0 <= j.t < self.scene.n_steps):
                raise MissingFrame(f"edge {i}->{j} outside the simulated stream")
            targets, conf = oracle_targets(self.scene.rig, self.scene.poses, self.scene.depths, [edge], self.noise)[edge]
            if i.c in self.disabled:
                conf = np.zeros_like(conf)
            self._cache[edge] = (targets, conf)
        return self._cache[edge]


class CorrelationFlowProvider:
    """Best match of correlation features within a window around the induced flow.

    Confidence is the softmax probability of the best candidate, zeroed where
    the induced flow fails or leaves the target image.
    """

    def __init__(self, features: Mapping[FrameId, FeatureGrid], radius: int = 3, temperature: float = 1.0):
        if radius < 0 or temperature <= 0:
            raise ValidationError("radius must be >= 0 and temperature positive")
        self.features = features
        self.radius = radius
        self.temperature = temperature

    def __call__(self, edge: Edge, estimate: Estimate):
        i, j = edge
        if i not in self.features or j not in self.features:
            raise MissingFrame(f"no features for edge {i}->{j}")
        rig = estimate.rig
        intr_i, intr_j = rig.intrinsics(i.c), rig.intrinsics(j.c)
        G = np.linalg.inv(estimate.pose(j.t).matrix() @ rig.extrinsic(j.c).matrix()) @ (
            estimate.pose(i.t).matrix() @ rig.extrinsic(i.c).matrix()
        )
        X = unproject(intr_i, intr_i.pixel_grid(), estimate.depth(i))
        uv, ok = project_masked(intr_j, X @ G.T)
        centre = np.round(uv)
        volume = build_correlation(self.features[i], self.features[j])
        side = 2 * self.radius + 1
        scores = lookup([CorrVolume(volume.values, 0)], centre, r=side - 1)
        off = np.arange(side) - self.radius
        oy, ox = np.meshgrid(off, off, indexing="ij")
        best = scores.argmax(axis=-1)
        targets = centre + np.stack([ox.reshape(-1)[best], oy.reshape(-1)[best]], axis=-1)
        z = (scores - scores.max(axis=-1, keepdims=True)) / self.temperature
        prob = np.exp(z)
        prob /= prob.sum(axis=-1, keepdims=True)
        conf = np.take_along_axis(prob, best[..., None], axis=-1)[..., 0]
        conf = np.where(ok & intr_j.in_bounds(targets), conf, 0.0)
        return targets, np.repeat(conf[..., None], 2, axis=-1)


DepthInitializer = Callable[[FrameId], np.ndarray]
PoseInitializer = Callable[[int, "Pose | None"], Pose]


class GroundTruthDepth:
    """Simulator depth with multiplicative noise, deterministic per frame."""

    def __init__(self, scene: Scene, rel_sigma: float = 0.0, seed: int = 0):
        self.scene, self.rel_sigma, self.seed = scene, rel_sigma, seed

    def __call__(self, frame: FrameId) -> np.ndarray:
        if frame not in self.scene.depths:
            raise MissingFrame(f"no simulated depth for {frame}")
        rng = np.random.default_rng(node_seed(self.seed + 7919, frame))
        return perturb_depth(self.scene.depths[frame], self.rel_sigma, rng)


class ConstantDepth:
    def __init__(self, shape: tuple[int, int], value: float = 0.1):
        if value <= 0:
            raise ValidationError("constant inverse depth must be positive")
        self.shape, self.value = shape, value

    def __call__(self, frame: FrameId) -> np.ndarray:
        return np.full(self.shape, self.value)


class FileDepth:
    """Inverse-depth grids stored as ``depth_<t>_<c>.bin`` in a directory."""

    def __init__(self, directory):
        from pathlib import Path

        self.directory = Path(directory)

    def __call__(self, frame: FrameId) -> np.ndarray:
        from .io import read_grid

        path = self.directory / f"depth_{frame.t:06d}_{frame.c}.bin"
        if not path.exists():
            raise MissingFrame(f"no depth file for {frame}")
        return read_grid(path)[..., 0].astype(np.float64)


class GroundTruthPose:
    """Simulator pose perturbed by a random twist; the first frame stays exact."""

    def __init__(self, scene: Scene, sigma: float = 0.0, seed: int = 0):
        self.scene, self.sigma, self.seed = scene, sigma, seed

    def __call__(self, t: int, previous: Pose | None) -> Pose:
        if not 0 <= t < self.scene.n_steps:
            raise MissingFrame(f"no simulated pose for timestep {t}")
        if previous is None:
            return self.scene.poses[t]
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 2, t]))
        return perturb_pose(self.scene.poses[t], self.sigma, rng)


def copy_previous_pose(t: int, previous: Pose | None) -> Pose:
    return previous if previous is not None else Pose.identity()


@dataclass
class _Candidate:
    """A single pending frame on top of the current state, for flow queries."""

    rig: Rig
    base: "PipelineState"
    t: int
    pose_t: Pose
    depths_t: dict[int, np.ndarray]

    def pose(self, t: int) -> Pose:
        return self.pose_t if t == self.t else self.base.pose(t)

    def depth(self, frame: FrameId) -> np.ndarray:
        return self.depths_t[frame.c] if frame.t == self.t else self.base.depth(frame)


@dataclass
class PipelineState:
    rig: Rig
    cfg: PipelineConfig
    provider: FlowProvider
    depth_init: DepthInitializer
    slots: list[int] = field(default_factory=list)
    graph: CovisGraph | None = None
    poses: dict[int, Pose] = field(default_factory=dict)  # keyed by stream t
    depths: dict[FrameId, np.ndarray] = field(default_factory=dict)  # keyed by stream frame
    observed: dict[FrameId, np.ndarray] = field(default_factory=dict)
    energy_log: list[dict] = field(default_factory=list)
    removed: list[int] = field(default_factory=list)
    emitted: list[int] = field(default_factory=list)
    _marked: set = field(default_factory=set, repr=False)

    def pose(self, t: int) -> Pose:
        if t not in self.poses:
            raise MissingFrame(f"timestep {t} is not part of the state")
        return self.poses[t]

    def depth(self, frame: FrameId) -> np.ndarray:
        if frame not in self.depths:
            raise MissingFrame(f"frame {frame} is not part of the state")
        return self.depths[frame]

    def rebuild_graph(self) -> None:
        adjacency = self.graph.adjacency if self.graph is not None else None
        g = CovisGraph(self.rig, self.cfg.graph, adjacency)
        for k in range(len(self.slots)):
            g.update(k)
        self.graph = g

    def _stream_edge(self, e: Edge) -> Edge:
        i, j = e
        return FrameId(self.slots[i.t], i.c), FrameId(self.slots[j.t], j.c)

    def problem(self) -> DbaProblem:
        g = self.graph
        edges = g.sorted_edges()
        targets, confs = {}, {}
        for e in edges:
            se = self._stream_edge(e)
            tgt, conf = self.provider(se, self)
            targets[e], confs[e] = tgt, conf
            if se not in self._marked or not isinstance(self.provider, OracleFlowProvider):
                # oracle measurements never change, so each edge is marked once
                self._marked.add(se)
                seen = conf.mean(axis=-1) > 0
                self.observed[se[0]] = self.observed.get(se[0], np.zeros_like(seen)) | seen
        slots_in = sorted({n.t for n in g.nodes})
        poses = {k: self.poses[self.slots[k]] for k in slots_in}
        depths = {n: self.depths[FrameId(self.slots[n.t], n.c)] for n in g.nodes}
        return DbaProblem(self.rig, edges, poses, depths, targets, confs, {slots_in[0]})

    def absorb(self, problem: DbaProblem) -> None:
        for k, p in problem.poses.items():
            self.poses[self.slots[k]] = p
        for n, d in problem.depths.items():
            self.depths[FrameId(self.slots[n.t], n.c)] = d

    def run_round(self, phase: str, fix_depths: bool = False) -> None:
        problem = self.problem()
        cfg = self.cfg.dba
        if fix_depths:
            cfg = DbaConfig(cfg.damping, cfg.gn_steps_per_call, True, False, cfg.d_floor, cfg.eps_z)
        if problem.edges:
            retries = 0
            while True:
                try:
                    problem, diag = dba_step(problem, cfg)
                    break
                except NotPositiveDefinite:
                    if retries == self.cfg.damping_retries or cfg.fix_depths:
                        raise
                    retries += 1
                    cfg = dataclasses.replace(cfg, damping=max(cfg.damping, 1e-6) * 10.0)
            self.absorb(problem)
            rec = {"phase": phase, "t": self.slots[-1], "window": len(self.slots), "retries": retries}
            rec.update(diag.as_record())
            self.energy_log.append(rec)

    def mean_flow(self, t: int, t_prev: int, estimate: Estimate | None = None) -> float:
        return mean_flow(self.provider, estimate or self, self.rig.reference_camera, t, t_prev)


def mean_flow(provider: FlowProvider, estimate: Estimate, reference_camera: int, t: int, t_prev: int) -> float:
    """Mean flow magnitude of the reference camera from ``t`` to ``t_prev`` over confident pixels."""
    i, j = FrameId(t, reference_camera), FrameId(t_prev, reference_camera)
    for frame in (i, j):
        try:
            estimate.pose(frame.t)
            estimate.depth(frame)
        except (KeyError, MissingFrame) as exc:
            raise MissingFrame(f"frame {frame} unavailable for flow") from exc
    targets, conf = provider((i, j), estimate)
    valid = conf.mean(axis=-1) > 0
    if not valid.any():
        return 0.0
    grid = estimate.rig.intrinsics(reference_camera).pixel_grid()
    return float(np.linalg.norm(targets - grid, axis=-1)[valid].mean())


def _admit(state: PipelineState, t: int, pose: Pose, depths: dict[int, np.ndarray]) -> None:
    state.slots.append(t)
    state.poses[t] = pose
    for c, d in depths.items():
        state.depths[FrameId(t, c)] = np.asarray(d, dtype=np.float64)


def run_warmup(
    stream: Iterator[int],
    rig: Rig,
    cfg: PipelineConfig,
    provider: FlowProvider,
    depth_init: DepthInitializer,
    pose_init: PoseInitializer,
) -> PipelineState:
    """Admit frames whose reference-camera flow to the last admitted frame is large enough."""
    state = PipelineState(rig, cfg, provider, depth_init)
    for t in stream:
        prev = state.poses[state.slots[-1]] if state.slots else None
        pose = pose_init(t, prev)
        depths = {c: depth_init(FrameId(t, c)) for c in range(len(rig))}
        if state.slots:
            cand = _Candidate(rig, state, t, pose, depths)
            if state.mean_flow(t, state.slots[-1], cand) < cfg.warmup_flow_threshold:
                continue
        _admit(state, t, pose, depths)
        if len(state.slots) == cfg.n_warmup:
            state.rebuild_graph()
            return state
    raise StreamExhausted(f"stream ended after {len(state.slots)} of {cfg.n_warmup} warmup frames")


def run_init(state: PipelineState) -> PipelineState:
    """Joint refinement of the warmup window; depths stay fixed for the first half."""
    n = state.cfg.n_itr_wm
    for k in range(n):
        state.run_round("init", fix_depths=k < n // 2)
    return state


def initial_depths(state: PipelineState) -> dict[int, np.ndarray]:
    """Per camera, the mean depth of the last ``depth_init_window`` keyframes (fewer if unavailable)."""
    window = state.slots[-state.cfg.depth_init_window :]
    return {c: np.mean([state.depths[FrameId(s, c)] for s in window], axis=0) for c in range(len(state.rig))}


RefinementHook = Callable[[PipelineState, list], None]


def no_refinement(state: PipelineState, timesteps: list) -> None:
    """Placeholder where a learned depth refiner would update the given frames."""


def step_active(state: PipelineState, t: int, refine: RefinementHook = no_refinement) -> PipelineState:
    """Add one frame set, refine, and drop the previous keyframe if motion was small."""
    cfg = state.cfg
    prev_t = state.slots[-1]
    _admit(state, t, state.poses[prev_t], initial_depths(state))
    state.graph.update(len(state.slots) - 1)
    for _ in range(cfg.n_iter1):
        state.run_round("active")
    # the first keyframe carries the gauge and is never removed
    if len(state.slots) > 2 and state.mean_flow(t, prev_t) < cfg.keyframe_flow_threshold:
        state.slots.remove(prev_t)
        state.removed.append(prev_t)
        state.rebuild_graph()
    else:
        for _ in range(cfg.n_iter2):
            state.run_round("active")
    refine(state, sorted({state.slots[n.t] for n in state.graph.nodes}))
    state.emitted.append(t)
    return state


@dataclass
class PipelineResult:
    trajectory: dict[int, Pose]
    depths: dict[FrameId, np.ndarray]
    observed: dict[FrameId, np.ndarray]
    keyframes: list[int]
    removed: list[int]
    energy_log: list[dict]


def run_pipeline(
    stream: Iterable[int],
    rig: Rig,
    cfg: PipelineConfig,
    provider: FlowProvider,
    depth_init: DepthInitializer,
    pose_init: PoseInitializer,
    refine: RefinementHook = no_refinement,
) -> PipelineResult:
    it = iter(stream)
    state = run_warmup(it, rig, cfg, provider, depth_init, pose_init)
    run_init(state)
    for t in it:
        step_active(state, t, refine)
    return PipelineResult(
        dict(sorted(state.poses.items())),
        dict(sorted(state.depths.items())),
        dict(state.observed),
        list(state.slots),
        list(state.removed),
        state.energy_log,
    )
