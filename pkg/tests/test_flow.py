import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import griddata

from mcdba.covis import EdgeKind
from mcdba.errors import EmptyEdgeList, NoReferences, ShapeMismatch, ValidationError
from mcdba.flow import (
    FlowField,
    flow_consistency_mask,
    induced_flow,
    masked_loss,
    photometric_error,
    pool_confidence,
    rotation_compensate,
    should_compensate,
    smoothness,
    sparsify,
    static_mask,
    warp_image,
)
from mcdba.geometry import Intrinsics, Pose, project, relative_pose, se3_exp, unproject
from mcdba.simulator import RigSpec, make_depth_field, make_rig, yaw_rotation

INTR = Intrinsics(10.0, 11.0, 7.5, 5.5, 16, 12)


def depth(seed=0):
    return make_depth_field(seed, (12, 16), (2.0, 20.0))


def test_induced_flow_identity_is_zero():
    f = induced_flow(depth(), Pose.identity(), INTR, INTR)
    assert f.valid.all()
    np.testing.assert_allclose(f.values, 0.0, atol=1e-12)


def test_induced_flow_x_translation_closed_form():
    d = depth(1)
    tx = 0.3
    f = induced_flow(d, Pose(translation=[tx, 0, 0]), INTR, INTR)
    np.testing.assert_allclose(f.values[..., 0], INTR.fx * tx * d, atol=1e-12)
    np.testing.assert_allclose(f.values[..., 1], 0.0, atol=1e-12)


def test_induced_flow_matches_pointwise_oracle():
    rng = np.random.default_rng(2)
    d = depth(2)
    G = se3_exp(rng.normal(size=6) * 0.1)
    f = induced_flow(d, G, INTR, INTR)
    for v in range(12):
        for u in range(16):
            X = unproject(INTR, [u, v], d[v, u])
            expected = project(INTR, G.matrix() @ X) - [u, v]
            assert f.valid[v, u]
            np.testing.assert_allclose(f.values[v, u], expected, atol=1e-12)


def test_induced_flow_invalid_behind_camera():
    G = Pose.from_rt(yaw_rotation(np.pi), np.zeros(3))
    f = induced_flow(depth(), G, INTR, INTR)
    assert not f.valid.any()
    np.testing.assert_array_equal(f.values, 0.0)
    with pytest.raises(ValidationError):
        induced_flow(-depth(), Pose.identity(), INTR, INTR)


def test_rotation_compensate_same_rotation_is_identity():
    f = induced_flow(depth(), Pose(translation=[0.1, 0, 0.2]), INTR, INTR)
    R = yaw_rotation(0.4)
    g = rotation_compensate(f, R, R, INTR, INTR)
    np.testing.assert_allclose(g.values, f.values, atol=1e-12)


def test_rotation_compensate_pure_rotation_cancels():
    R_ci, R_cj = yaw_rotation(0.3), yaw_rotation(0.0)
    G = Pose.from_rt(R_cj.T @ R_ci, np.zeros(3))
    f = induced_flow(np.ones((12, 16)), G, INTR, INTR)
    g = rotation_compensate(f, R_ci, R_cj, INTR, INTR)
    np.testing.assert_allclose(g.values[g.valid], 0.0, atol=1e-10)


def test_rotation_compensate_ring_neighbours():
    rig = make_rig(RigSpec(n_cameras=6, fov_deg=100, width=16, height=12))
    intr = rig.intrinsics(0)
    Ti, Tj = rig.extrinsic(1), rig.extrinsic(0)
    G = relative_pose(Pose.identity(), Pose.identity(), Ti, Tj)
    f = induced_flow(make_depth_field(3, (12, 16), (3.0, 20.0)), G, intr, intr)
    g = rotation_compensate(f, Ti.R, Tj.R, intr, intr)
    both = f.valid & g.valid
    assert both.sum() > 0
    assert np.linalg.norm(g.values[both], axis=-1).mean() < np.linalg.norm(f.values[both], axis=-1).mean()
    R = Tj.R.T @ Ti.R
    for v in range(12):
        for u in range(16):
            if not both[v, u]:
                continue
            ray = unproject(intr, [u, v], 1.0)
            q = np.concatenate([R @ ray[:3], [1.0]])
            expected = np.array([u, v]) + f.values[v, u] - project(intr, q)
            np.testing.assert_allclose(g.values[v, u], expected, atol=1e-10)


def test_should_compensate_default_kinds():
    assert should_compensate(EdgeKind.SPATIAL)
    assert should_compensate("spatial_temporal")
    assert not should_compensate(EdgeKind.TEMPORAL)


def test_pool_confidence_examples():
    np.testing.assert_allclose(pool_confidence([np.full((2, 3, 2), 0.6)]), 0.6)
    a = np.zeros((1, 1, 2))
    a[..., :] = [0.1, 0.3]
    b = np.zeros((1, 1, 2))
    b[..., :] = [0.8, 1.0]
    assert pool_confidence([a, b])[0, 0] == pytest.approx(0.9)
    with pytest.raises(EmptyEdgeList):
        pool_confidence([])
    with pytest.raises(ValidationError):
        pool_confidence([np.full((1, 1, 2), 1.5)])


def test_pool_confidence_vs_loops():
    rng = np.random.default_rng(4)
    ws = [rng.uniform(size=(4, 5, 2)) for _ in range(3)]
    got = pool_confidence(ws)
    for y in range(4):
        for x in range(5):
            means = [(w[y, x, 0] + w[y, x, 1]) / 2 for w in ws]
            assert got[y, x] == max(means)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5))
def test_pool_confidence_property(seed, n):
    rng = np.random.default_rng(seed)
    ws = [rng.uniform(size=(3, 4, 2)) for _ in range(n)]
    pooled = pool_confidence(ws)
    means = np.stack([w.mean(axis=-1) for w in ws])
    assert np.all(pooled >= means)
    assert np.all(np.any(pooled == means, axis=0))


def test_sparsify_examples():
    rng = np.random.default_rng(5)
    d = rng.uniform(0.1, 1, size=(4, 4))
    w = rng.uniform(0, 0.99, size=(4, 4))
    d0, w0 = sparsify(d, w, 0.0)
    np.testing.assert_array_equal(d0, d)
    np.testing.assert_array_equal(w0, w)
    d1, w1 = sparsify(d, w, 1.0)
    assert not d1.any() and not w1.any()
    d5, w5 = sparsify(d, w, 0.5)
    for y in range(4):
        for x in range(4):
            if w[y, x] < 0.5:
                assert d5[y, x] == 0 and w5[y, x] == 0
            else:
                assert d5[y, x] == d[y, x] and w5[y, x] == w[y, x]
    with pytest.raises(ValidationError):
        sparsify(d, w, 1.5)


def ramp(h=6, w=8):
    v, u = np.mgrid[0:h, 0:w].astype(float)
    return (u + 10 * v) / 100.0


def grid(h=6, w=8):
    v, u = np.mgrid[0:h, 0:w].astype(float)
    return np.stack([u, v], axis=-1)


def test_warp_identity_and_shift():
    img = ramp()
    out, valid = warp_image(img, grid())
    assert valid.all()
    np.testing.assert_allclose(out, img, atol=1e-15)
    out, valid = warp_image(img, grid() + [2, 0])
    assert not valid[:, -2:].any() and valid[:, :-2].all()
    np.testing.assert_allclose(out[:, :-2], img[:, 2:], atol=1e-15)
    np.testing.assert_array_equal(out[:, -2:], 0.0)


def test_warp_half_pixel_ramp():
    img = ramp()
    out, valid = warp_image(img, grid() + [0.5, 0.5])
    np.testing.assert_allclose(out[:-1, :-1], img[:-1, :-1] + (0.5 + 5.0) / 100.0, atol=1e-14)
    colour = np.stack([img, 2 * img], axis=-1)
    out_c, _ = warp_image(colour, grid() + [0.5, 0.5])
    np.testing.assert_allclose(out_c[:-1, :-1, 1], 2 * out[:-1, :-1], atol=1e-14)


def loop_ssim(x, y, c1=0.01**2, c2=0.03**2):
    """Direct windowed SSIM with mirrored borders, one pixel at a time."""
    h, w = x.shape

    def mirror(i, n):
        if i < 0:
            return -i
        if i >= n:
            return 2 * (n - 1) - i
        return i

    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            xs = np.array([x[mirror(r + a, h), mirror(c + b, w)] for a in (-1, 0, 1) for b in (-1, 0, 1)])
            ys = np.array([y[mirror(r + a, h), mirror(c + b, w)] for a in (-1, 0, 1) for b in (-1, 0, 1)])
            mx, my = xs.mean(), ys.mean()
            sx = ((xs - mx) ** 2).mean()
            sy = ((ys - my) ** 2).mean()
            sxy = ((xs - mx) * (ys - my)).mean()
            out[r, c] = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sx + sy + c2))
    return out


def test_photometric_error_examples():
    rng = np.random.default_rng(6)
    a = rng.uniform(size=(6, 7))
    np.testing.assert_allclose(photometric_error(a, a), 0.0, atol=1e-12)
    c1 = 0.01**2
    expected = 0.85 / 2 * (1 - c1 / (1 + c1)) + 0.15
    np.testing.assert_allclose(photometric_error(np.zeros((5, 5)), np.ones((5, 5))), expected, atol=1e-12)
    assert expected == pytest.approx(0.575, abs=1e-4)
    with pytest.raises(ShapeMismatch):
        photometric_error(np.zeros((2, 2)), np.zeros((2, 3)))


def test_photometric_error_vs_loop_ssim():
    rng = np.random.default_rng(7)
    a, b = rng.uniform(size=(2, 6, 7))
    expected = 0.85 / 2 * (1 - loop_ssim(a, b)) + 0.15 * np.abs(a - b)
    np.testing.assert_allclose(photometric_error(a, b), expected, atol=1e-12)
    # colour images average the per-channel terms
    ca, cb = rng.uniform(size=(2, 6, 7, 3))
    per = [0.85 / 2 * (1 - loop_ssim(ca[..., k], cb[..., k])) for k in range(3)]
    expected_c = np.mean(per, axis=0) + 0.15 * np.abs(ca - cb).mean(axis=-1)
    np.testing.assert_allclose(photometric_error(ca, cb), expected_c, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_photometric_error_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 5, 6))
    np.testing.assert_allclose(photometric_error(a, b), photometric_error(b, a), atol=1e-13)


def test_static_mask_examples():
    rng = np.random.default_rng(8)
    target, ref = rng.uniform(size=(2, 5, 5))
    assert static_mask(target, target, ref).all()
    assert not static_mask(target, ref, ref).any()
    warped = rng.uniform(size=(5, 5))
    expected = photometric_error(target, warped) < photometric_error(target, ref)
    np.testing.assert_array_equal(static_mask(target, warped, ref), expected)
    with pytest.raises(ShapeMismatch):
        static_mask(target, warped, np.zeros((4, 4)))


def const_flow(value, h=6, w=8):
    return FlowField(np.broadcast_to(np.asarray(value, float), (h, w, 2)), np.ones((h, w), bool))


def test_flow_consistency_inverse_flows():
    fwd, bwd = const_flow([1.0, 0.5]), const_flow([-1.0, -0.5])
    mask = flow_consistency_mask(fwd, bwd, 1e-6)
    # pixels landing inside the image are consistent, the rest are invalid
    expected = np.zeros((6, 8), bool)
    expected[:-1, :-1] = True
    np.testing.assert_array_equal(mask, expected)


def test_flow_consistency_dynamic_offset():
    fwd, bwd = const_flow([0.0, 0.0]), const_flow([0.0, 0.0])
    vals = fwd.values.copy()
    vals[2, 3] = [0.0, 0.0]
    bvals = bwd.values.copy()
    bvals[2, 3] = [10.0, 0.0]
    mask = flow_consistency_mask(FlowField(vals, fwd.valid), FlowField(bvals, bwd.valid), 3.0)
    assert not mask[2, 3] and mask.sum() == 6 * 8 - 1


def test_flow_consistency_static_scene_oracle():
    rig = make_rig(RigSpec(n_cameras=1, fov_deg=90, width=32, height=24))
    intr = rig.intrinsics(0)
    d_i = make_depth_field(9, (24, 32), (4.0, 20.0))
    G = se3_exp([0.02, 0.0, 0.15, 0.0, 0.01, 0.0])
    fwd = induced_flow(d_i, G, intr, intr)
    # reverse flow from the depth of the same surface seen in frame j
    X = unproject(intr, intr.pixel_grid(), d_i).reshape(-1, 4) @ G.matrix().T
    uv = X[:, :2] / X[:, 2:3] * [intr.fx, intr.fy] + [intr.cx, intr.cy]
    d_j = griddata(uv, X[:, 3] / X[:, 2], intr.pixel_grid().reshape(-1, 2), method="linear")
    d_j = d_j.reshape(24, 32)
    have = np.isfinite(d_j)
    d_j = np.where(have, d_j, 0.05)
    bwd = induced_flow(d_j, G.inverse(), intr, intr)
    bwd = FlowField(bwd.values, bwd.valid & have)
    mask = flow_consistency_mask(fwd, bwd, 3.0)
    lands = fwd.valid & intr.in_bounds(intr.pixel_grid() + fwd.values)
    inner = lands.copy()
    inner[[0, -1], :] = False
    inner[:, [0, -1]] = False
    assert mask[inner].mean() >= 0.99


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 5), st.floats(0.01, 5))
def test_flow_consistency_monotone_in_gamma(seed, g1, g2):
    rng = np.random.default_rng(seed)
    lo, hi = sorted([g1, g2])
    fwd = FlowField(rng.normal(size=(5, 6, 2)), rng.uniform(size=(5, 6)) > 0.2)
    bwd = FlowField(rng.normal(size=(5, 6, 2)), rng.uniform(size=(5, 6)) > 0.2)
    a = flow_consistency_mask(fwd, bwd, lo)
    b = flow_consistency_mask(fwd, bwd, hi)
    assert np.all(~a | b)


def test_flow_consistency_rejects_bad_gamma():
    with pytest.raises(ValidationError):
        flow_consistency_mask(const_flow([0, 0]), const_flow([0, 0]), 0.0)


def test_masked_loss_examples():
    rng = np.random.default_rng(10)
    img = rng.uniform(size=(6, 8))
    d = rng.uniform(0.1, 1.0, size=(6, 8))
    ones = np.ones((6, 8), bool)
    pe0 = photometric_error(img, img)
    assert masked_loss([pe0], [ones], d, img) == pytest.approx(1e-3 * smoothness(d, img), abs=1e-15)
    pe = rng.uniform(size=(6, 8))
    assert masked_loss([pe], [~ones], d, img, lam=0.0) == 0.0
    assert masked_loss([pe, np.zeros((6, 8))], [ones, ones], d, img, lam=0.0) == 0.0
    with pytest.raises(NoReferences):
        masked_loss([], [], d, img)


def test_masked_loss_excludes_masked_references():
    pe_a = np.full((2, 2), 0.4)
    pe_b = np.full((2, 2), 0.1)
    m_a = np.ones((2, 2), bool)
    m_b = np.array([[True, False], [False, False]])
    loss = masked_loss([pe_a, pe_b], [m_a, m_b], np.ones((2, 2)), np.zeros((2, 2)), lam=0.0)
    assert loss == pytest.approx((0.1 + 0.4 * 3) / 4)


def test_smoothness_oracle():
    d = np.array([[1.0, 2.0], [3.0, 6.0]])
    img = np.array([[0.0, 1.0], [0.0, 0.0]])
    dn = d / 3.0
    gx = (abs(dn[0, 1] - dn[0, 0]) * np.exp(-1.0) + abs(dn[1, 1] - dn[1, 0])) / 2
    gy = (abs(dn[1, 0] - dn[0, 0]) + abs(dn[1, 1] - dn[0, 1]) * np.exp(-1.0)) / 2
    assert smoothness(d, img) == pytest.approx(gx + gy)
