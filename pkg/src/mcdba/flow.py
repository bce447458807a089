"""Induced flow, rotation compensation, confidence pooling and view-synthesis losses.

Flow values are ``(dx, dy)`` in pixels; images are ``(H, W)`` or ``(H, W, ch)``
arrays on ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .covis import EdgeKind
from .errors import EmptyEdgeList, NoReferences, ShapeMismatch, ValidationError
from .geometry import EPS_Z, Intrinsics, Pose, project_masked, unproject

SSIM_ALPHA = 0.85
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SMOOTHNESS_WEIGHT = 1e-3
CONFIDENCE_BETA = 0.5
CONSISTENCY_GAMMA = 3.0


@dataclass(frozen=True, eq=False)
class FlowField:
    values: np.ndarray  # (H, W, 2)
    valid: np.ndarray  # (H, W)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        ok = np.asarray(self.valid, dtype=bool)
        if v.shape[:2] != ok.shape or v.shape[-1] != 2:
            raise ShapeMismatch("flow values must be H x W x 2 matching validity H x W")
        v[~ok] = 0.0
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", ok)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


def _matrix(G) -> np.ndarray:
    return G.matrix() if isinstance(G, Pose) else np.asarray(G, dtype=np.float64)


def induced_flow(d_i: np.ndarray, G_ij, intr_i: Intrinsics, intr_j: Intrinsics, eps_z: float = EPS_Z) -> FlowField:
    """Flow of every source pixel under relative pose ``G_ij`` and inverse depth ``d_i``."""
    d_i = np.asarray(d_i, dtype=np.float64)
    if np.any(d_i < 0):
        raise ValidationError("inverse depth must be non-negative")
    grid = intr_i.pixel_grid()
    X = unproject(intr_i, grid, d_i)
    uv, valid = project_masked(intr_j, X @ _matrix(G_ij).T, eps_z)
    return FlowField(uv - grid, valid)


def rotation_compensate(
    f_star: FlowField,
    R_ci: np.ndarray,
    R_cj: np.ndarray,
    intr_i: Intrinsics,
    intr_j: Intrinsics,
    eps_z: float = EPS_Z,
) -> FlowField:
    """Remove the flow explained by the fixed rotation between two cameras.

    ``f' = (x + f*) - proj_j(R_cj^-1 R_ci unproject_i(x, 1))``.
    """
    grid = intr_i.pixel_grid()
    X = unproject(intr_i, grid, np.ones(grid.shape[:2]))
    R = np.asarray(R_cj).T @ np.asarray(R_ci)
    Xr = X.copy()
    Xr[..., :3] = X[..., :3] @ R.T
    uv, ok = project_masked(intr_j, Xr, eps_z)
    return FlowField(grid + f_star.values - uv, f_star.valid & ok)


def should_compensate(kind: EdgeKind, kinds=(EdgeKind.SPATIAL, EdgeKind.SPATIAL_TEMPORAL)) -> bool:
    return EdgeKind(kind) in tuple(EdgeKind(k) for k in kinds)


def validate_confidence(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != 2 or np.any(w < 0) or np.any(w > 1):
        raise ValidationError("confidence must be H x W x 2 with entries in [0, 1]")
    return w


def pool_confidence(edge_confidences: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel max over edges of the mean of the two directional weights."""
    if len(edge_confidences) == 0:
        raise EmptyEdgeList("no outgoing edges to pool")
    means = np.stack([validate_confidence(w).mean(axis=-1) for w in edge_confidences])
    return means.max(axis=0)


def sparsify(d: np.ndarray, w: np.ndarray, beta: float = CONFIDENCE_BETA):
    """Zero depth and confidence wherever ``w < beta``."""
    if not 0.0 <= beta <= 1.0:
        raise ValidationError("beta must lie in [0, 1]")
    d = np.asarray(d, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if d.shape != w.shape:
        raise ShapeMismatch("depth and pooled confidence shapes differ")
    keep = w >= beta
    return np.where(keep, d, 0.0), np.where(keep, w, 0.0)


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample ``img`` (H, W, ...) at in-bounds points; returns values and corner data."""
    h, w = img.shape[:2]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = xc - x0
    ay = yc - y0
    corners = [(y0, x0, (1 - ax) * (1 - ay)), (y0, x1, ax * (1 - ay)), (y1, x0, (1 - ax) * ay), (y1, x1, ax * ay)]
    extra = (slice(None),) * (img.ndim - 2)
    out = sum(wt[(...,) + (None,) * (img.ndim - 2)] * img[(yy, xx) + extra] for yy, xx, wt in corners)
    return out, valid, corners


def warp_image(ref: np.ndarray, coords: np.ndarray):
    """Bilinear sample of ``ref`` at ``coords`` (H, W, 2 as ``(x, y)``): ``(warped, valid)``."""
    ref = np.asarray(ref, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValidationError("coordinates must be finite")
    out, valid, _ = _bilinear(ref, coords[..., 0], coords[..., 1])
    out = np.where(valid[(...,) + (None,) * (ref.ndim - 2)], out, 0.0)
    return out, valid


def _channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM with a 3x3 box window and mirrored borders, channel-averaged."""
    x, y = _channels(x), _channels(y)
    box = lambda a: uniform_filter(a, size=(3, 3, 1), mode="mirror")  # noqa: E731
    mx, my = box(x), box(y)
    sxx = box(x * x) - mx * mx
    syy = box(y * y) - my * my
    sxy = box(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean(axis=-1)


def photometric_error(target: np.ndarray, warped: np.ndarray, alpha: float = SSIM_ALPHA) -> np.ndarray:
    """``alpha/2 * (1 - SSIM) + (1 - alpha) * L1`` per pixel."""
    target = np.asarray(target, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    if target.shape != warped.shape:
        raise ShapeMismatch(f"image shapes differ: {target.shape} vs {warped.shape}")
    l1 = np.abs(_channels(target) - _channels(warped)).mean(axis=-1)
    return alpha / 2.0 * (1.0 - ssim(target, warped)) + (1.0 - alpha) * l1


def static_mask(target: np.ndarray, warped: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """True where warping explains the target better than assuming no motion."""
    if not (np.shape(target) == np.shape(warped) == np.shape(ref)):
        raise ShapeMismatch("target, warped and reference images must share a shape")
    return photometric_error(target, warped) < photometric_error(target, ref)


def flow_consistency_mask(f_fwd: FlowField, f_bwd: FlowField, gamma: float = CONSISTENCY_GAMMA) -> np.ndarray:
    """Forward flow plus the back-sampled reverse flow must nearly cancel."""
    if gamma <= 0:
        raise ValidationError("gamma must be positive")
    h, w = f_fwd.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    x = u + f_fwd.values[..., 0]
    y = v + f_fwd.values[..., 1]
    sampled, inside, corners = _bilinear(f_bwd.values, x, y)
    ok = f_fwd.valid & inside
    for yy, xx, wt in corners:
        ok &= f_bwd.valid[yy, xx] | (wt == 0)
    err = np.linalg.norm(f_fwd.values + sampled, axis=-1)
    return ok & (err < gamma)


def smoothness(d: np.ndarray, image: np.ndarray) -> float:
    """Edge-aware first-order smoothness of mean-normalised inverse depth."""
    d = np.asarray(d, dtype=np.float64)
    mean = d.mean()
    dn = d / mean if mean > 0 else d
    img = _channels(image)
    gx_d = np.abs(np.diff(dn, axis=1))
    gy_d = np.abs(np.diff(dn, axis=0))
    gx_i = np.abs(np.diff(img, axis=1)).mean(axis=-1)
    gy_i = np.abs(np.diff(img, axis=0)).mean(axis=-1)
    total = 0.0
    if gx_d.size:
        total += float(np.mean(gx_d * np.exp(-gx_i)))
    if gy_d.size:
        total += float(np.mean(gy_d * np.exp(-gy_i)))
    return total


def masked_loss(
    pe_stack: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    d: np.ndarray,
    image: np.ndarray,
    lam: float = SMOOTHNESS_WEIGHT,
) -> float:
    """Minimum masked photometric error over references plus weighted smoothness.

    ``masks[k]`` is the combined static, consistency and occlusion mask of
    reference ``k``. Masked references are excluded from the per-pixel minimum
    and pixels with no unmasked reference are excluded from the average.
    """
    if len(pe_stack) == 0:
        raise NoReferences("at least one reference view is required")
    pe = np.stack([np.asarray(p, dtype=np.float64) for p in pe_stack])
    m = np.stack([np.asarray(k, dtype=bool) for k in masks])
    if pe.shape != m.shape:
        raise ShapeMismatch("one mask per reference with matching shape is required")
    masked = np.where(m, pe, np.inf).min(axis=0)
    seen = m.any(axis=0)
    photo = float(masked[seen].mean()) if seen.any() else 0.0
    return photo + lam * smoothness(d, image)


def combine_masks(*masks: np.ndarray) -> np.ndarray:
    out = np.asarray(masks[0], dtype=bool)
    for m in masks[1:]:
        out = out & np.asarray(m, dtype=bool)
    return out
