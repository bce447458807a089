import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcdba.covis import CovisGraph, FrameId, GraphParams
from mcdba.dba import (
    DbaConfig,
    _cholesky_solve,
    assemble,
    dba_step,
    energy,
    jacobian_depth,
    jacobian_pose,
    problem_from_oracle,
    residuals,
    schur_solve,
)
from mcdba.errors import NoFreeVariables, NotPositiveDefinite, UnknownEdge, ValidationError
from mcdba.geometry import se3_exp
from mcdba.simulator import (
    RigSpec,
    TrajectoryModel,
    TrajectorySpec,
    NoiseSpec,
    make_scene,
    oracle_targets,
    perturb_depth,
    perturb_pose,
)

PARAMS = GraphParams(dt_intra=3, r_intra=2, dt_inter=2, r_inter=2)


def small_problem(seed=0, n_cams=5, n_steps=3, pose_sigma=0.0, depth_sigma=0.0, outliers=0.0):
    scene = make_scene(
        RigSpec(n_cameras=n_cams, fov_deg=100, width=8, height=6),
        TrajectorySpec(TrajectoryModel.FORWARD_YAW, speed=0.4, yaw_rate=0.05, n_steps=n_steps),
        seed=seed,
    )
    g = CovisGraph(scene.rig, PARAMS)
    for t in range(n_steps):
        g.update(t)
    meas = oracle_targets(scene.rig, scene.poses, scene.depths, g.sorted_edges(), NoiseSpec(outlier_fraction=outliers, seed=seed))
    rng = np.random.default_rng(seed + 100)
    poses = {t: (p if t == 0 else perturb_pose(p, pose_sigma, rng)) for t, p in enumerate(scene.poses)}
    depths = {n: perturb_depth(d, depth_sigma, rng) for n, d in scene.depths.items()}
    return problem_from_oracle(scene.rig, g.sorted_edges(), poses, depths, meas, {0}), scene


def dense_jacobian(problem, cfg):
    """Explicit stacked Jacobian by per-edge column placement, W and r."""
    ts = [] if cfg.fix_poses else problem.free_timesteps()
    nodes = [] if cfg.fix_depths else sorted(problem.depths)
    col = {}
    off = 6 * len(ts)
    for n in nodes:
        col[n] = off
        off += problem.depths[n].size
    rows_J, rows_r, rows_w = [], [], []
    for e in problem.edges:
        i, j = e
        r, valid = residuals(problem, e)
        Jd = jacobian_depth(problem, e)
        Ji = jacobian_pose(problem, e, "i")
        Jj = jacobian_pose(problem, e, "j")
        hw = valid.size
        conf = problem.confidences[e].reshape(-1, 2) * valid.reshape(-1, 1)
        for k in range(2):
            J = np.zeros((hw, off))
            for t, Jp in ((i.t, Ji), (j.t, Jj)):
                if t in ts:
                    a = ts.index(t)
                    J[:, 6 * a : 6 * a + 6] += Jp.reshape(hw, 2, 6)[:, k]
            if i in col:
                J[np.arange(hw), col[i] + np.arange(hw)] = Jd.reshape(hw, 2)[:, k]
            rows_J.append(J)
            rows_r.append(r.reshape(hw, 2)[:, k])
            rows_w.append(conf[:, k])
    return np.vstack(rows_J), np.concatenate(rows_r), np.concatenate(rows_w), len(ts)


def test_zero_residual_at_ground_truth():
    p, _ = small_problem()
    for e in p.edges:
        r, valid = residuals(p, e)
        assert np.abs(r[valid]).max() < 1e-9
    assert energy(p) < 1e-16


def test_unknown_edge():
    p, _ = small_problem()
    with pytest.raises(UnknownEdge):
        residuals(p, (FrameId(0, 0), FrameId(9, 9)))


def test_problem_requires_anchor():
    p, _ = small_problem()
    with pytest.raises(ValidationError):
        p.replace(anchor=frozenset())


def test_depth_jacobian_finite_differences():
    p, _ = small_problem(seed=1, pose_sigma=0.02, depth_sigma=0.1)
    h = 1e-6
    for e in p.edges[:6]:
        i = e[0]
        J = jacobian_depth(p, e)
        d = p.depths[i]
        rp, _ = residuals(p.replace(depths={**p.depths, i: d + h}), e)
        rm, valid = residuals(p.replace(depths={**p.depths, i: d - h}), e)
        fd = (rp - rm) / (2 * h)
        np.testing.assert_allclose(J[valid], fd[valid], rtol=1e-5, atol=1e-6)


def test_pose_jacobians_finite_differences():
    p, _ = small_problem(seed=2, pose_sigma=0.02, depth_sigma=0.1)
    h = 1e-6
    for e in p.edges:
        for which, t in (("i", e[0].t), ("j", e[1].t)):
            J = jacobian_pose(p, e, which)
            fd = np.zeros_like(J)
            for k in range(6):
                step = np.zeros(6)
                step[k] = h
                rp, _ = residuals(p.replace(poses={**p.poses, t: se3_exp(step) @ p.poses[t]}), e)
                rm, _ = residuals(p.replace(poses={**p.poses, t: se3_exp(-step) @ p.poses[t]}), e)
                fd[..., k] = (rp - rm) / (2 * h)
            _, valid = residuals(p, e)
            if e[0].t == e[1].t:
                # both ends share one pose; only the sum is observable
                continue
            np.testing.assert_allclose(J[valid], fd[valid], rtol=1e-4, atol=1e-5)


def test_spatial_edge_pose_terms_cancel():
    p, _ = small_problem(seed=3, pose_sigma=0.02)
    spatial = [e for e in p.edges if e[0].t == e[1].t]
    assert spatial
    for e in spatial:
        np.testing.assert_array_equal(jacobian_pose(p, e, "i") + jacobian_pose(p, e, "j"), 0.0)


@pytest.mark.parametrize("cfg", [DbaConfig(), DbaConfig(fix_depths=True), DbaConfig(fix_poses=True)])
def test_assembly_matches_dense_oracle(cfg):
    p, _ = small_problem(seed=4, pose_sigma=0.02, depth_sigma=0.1, outliers=0.1)
    ne = assemble(p, cfg)
    H, g = ne.dense()
    J, r, w, _ = dense_jacobian(p, cfg)
    np.testing.assert_allclose(H, J.T @ (w[:, None] * J), atol=1e-8 * max(1, np.abs(H).max()))
    np.testing.assert_allclose(g, -J.T @ (w * r), atol=1e-8 * max(1, np.abs(g).max()))


@pytest.mark.parametrize("cfg", [DbaConfig(damping=1e-4), DbaConfig(damping=0.3), DbaConfig(fix_depths=True), DbaConfig(fix_poses=True)])
def test_schur_matches_dense_solve(cfg):
    p, _ = small_problem(seed=5, pose_sigma=0.02, depth_sigma=0.1)
    ne = assemble(p, cfg)
    H, g = ne.dense(damping=0.0 if cfg.fix_depths else cfg.damping)
    keep = np.abs(np.diag(H)) > 0
    x = np.zeros_like(g)
    x[keep] = np.linalg.solve(H[np.ix_(keep, keep)], g[keep])
    dxi, dd = schur_solve(ne, cfg)
    got = np.concatenate([dxi[t] for t in ne.timesteps] + [dd[n] for n in ne.nodes])
    # the scale direction is weakly observed, so compare backward error first
    Hk, gk = H[np.ix_(keep, keep)], g[keep]
    assert np.linalg.norm(Hk @ got[keep] - gk) <= 1e-10 * np.linalg.norm(gk)
    np.testing.assert_allclose(got[keep], x[keep], rtol=0, atol=1e-12 * np.linalg.cond(Hk) * np.abs(x).max())
    np.testing.assert_array_equal(got[~keep], 0.0)


def test_no_free_variables():
    p, _ = small_problem(n_steps=1)
    with pytest.raises(NoFreeVariables):
        assemble(p, DbaConfig(fix_depths=True))


def test_not_positive_definite_reports_pivot():
    S = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NotPositiveDefinite) as info:
        _cholesky_solve(S, np.ones(2))
    assert info.value.pivot == pytest.approx(-3.0)


def test_ground_truth_is_fixed_point():
    p, _ = small_problem(seed=6)
    q, diag = dba_step(p, DbaConfig())
    assert diag.max_pose_update < 1e-9 and diag.max_depth_update < 1e-9
    for t in p.poses:
        assert q.poses[t].allclose(p.poses[t], atol=1e-9)


def test_converges_from_perturbation():
    p, scene = small_problem(seed=7, pose_sigma=0.01, depth_sigma=0.05)
    e0 = energy(p)
    for _ in range(6):
        p, _ = dba_step(p, DbaConfig())
    assert energy(p) < 1e-6 * e0
    for t, gt in enumerate(scene.poses):
        np.testing.assert_allclose(p.poses[t].t, gt.t, atol=1e-9)


def test_depth_floor_enforced():
    p, _ = small_problem(seed=8, depth_sigma=0.5)
    q, _ = dba_step(p, DbaConfig(d_floor=0.2))
    assert min(d.min() for d in q.depths.values()) >= 0.2


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_first_step_does_not_increase_energy(seed):
    p, _ = small_problem(seed=seed, pose_sigma=0.005, depth_sigma=0.02)
    _, diag = dba_step(p, DbaConfig(gn_steps_per_call=1))
    assert diag.energy_after <= diag.energy_before * (1 + 1e-9)


def test_identity_transform_has_zero_depth_jacobian():
    scene = make_scene(RigSpec(n_cameras=2, width=8, height=6), TrajectorySpec(speed=0.0, n_steps=2))
    edge = (FrameId(1, 0), FrameId(0, 0))
    meas = oracle_targets(scene.rig, scene.poses, scene.depths, [edge])
    p = problem_from_oracle(scene.rig, [edge], dict(enumerate(scene.poses)), scene.depths, meas, {0})
    np.testing.assert_array_equal(jacobian_depth(p, edge), 0.0)


def test_infinite_damping_freezes_depths():
    p, _ = small_problem(seed=9, pose_sigma=0.02, depth_sigma=0.1)
    ne = assemble(p)
    _, dd_small = schur_solve(ne, DbaConfig(damping=1e-4))
    _, dd_big = schur_solve(ne, DbaConfig(damping=1e12))
    assert max(np.abs(d).max() for d in dd_small.values()) > 1e-4
    assert max(np.abs(d).max() for d in dd_big.values()) < 1e-9


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_zero_confidence_pixels_do_not_change_updates(seed):
    p, _ = small_problem(seed=seed % 50, pose_sigma=0.02, depth_sigma=0.1)
    rng = np.random.default_rng(seed)
    targets, confs = dict(p.targets), dict(p.confidences)
    for e in p.edges:
        drop = rng.random(confs[e].shape[:2]) < 0.3
        confs[e] = np.where(drop[..., None], 0.0, confs[e])
        targets[e] = p.targets[e].copy()
    base = p.replace(targets=targets, confidences=confs)
    moved = {e: np.where(confs[e] == 0, t + rng.normal(0, 30, t.shape), t) for e, t in targets.items()}
    a = schur_solve(assemble(base))
    b = schur_solve(assemble(base.replace(targets=moved)))
    for x, y in zip(a, b):
        for k in x:
            np.testing.assert_array_equal(x[k], y[k])


def translation_only_problem(spatial, seed=0):
    scene = make_scene(
        RigSpec(n_cameras=6, fov_deg=100, width=8, height=6),
        TrajectorySpec(TrajectoryModel.FORWARD_CONSTANT, speed=0.4, n_steps=3),
        seed=seed,
    )
    g = CovisGraph(scene.rig, GraphParams(spatial=spatial))
    for t in range(3):
        g.update(t)
    edges = g.sorted_edges()
    meas = oracle_targets(scene.rig, scene.poses, scene.depths, edges)
    rng = np.random.default_rng(seed)
    poses = {t: se3_exp(np.r_[rng.normal(0, 0.02, 3) * (t > 0), 0, 0, 0]) @ p for t, p in enumerate(scene.poses)}
    depths = {n: perturb_depth(d, 0.1, rng) for n, d in scene.depths.items()}
    return problem_from_oracle(scene.rig, edges, poses, depths, meas, {0}), scene


def rescaled(p, s):
    from mcdba.geometry import Pose

    poses = {t: Pose.from_rt(q.R, q.t / s) for t, q in p.poses.items()}
    return p.replace(poses=poses, depths={n: s * d for n, d in p.depths.items()})


@pytest.mark.parametrize("s", [0.5, 2.0, 3.7])
def test_temporal_only_edges_have_scale_gauge(s):
    # forward translation along a common axis keeps the camera-frame motion proportional to the rig motion
    p, _ = translation_only_problem(spatial=False)
    assert all(e[0].c == e[1].c for e in p.edges)
    e0 = energy(p)
    assert e0 > 0
    assert energy(rescaled(p, s)) == pytest.approx(e0, rel=1e-10)


def test_spatial_edges_break_scale_gauge():
    p, scene = translation_only_problem(spatial=True)
    assert any(e[0].t == e[1].t for e in p.edges)
    gt = p.replace(poses=dict(enumerate(scene.poses)), depths=dict(scene.depths))
    assert energy(gt) < 1e-16
    assert energy(rescaled(gt, 2.0)) > 1e-3
