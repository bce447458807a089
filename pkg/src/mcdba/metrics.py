"""Depth error metrics, camera-wise median scaling and absolute trajectory error.

Depth metrics compare metric depth (not inverse depth). Trajectory error uses
the translational part of ``Q_i^-1 S P_i`` with ``S`` a pure scale on the
predicted translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyCamera, LengthMismatch, NoValidPixels, ShapeMismatch, ValidationError
from .geometry import Pose

DEFAULT_MAX_DEPTH = 200.0
DELTA_BASE = 1.25
DELTA_ORDERS = (1, 2, 3)


@dataclass(frozen=True)
class DepthEval:
    abs_rel: float
    sq_rel: float
    rmse: float
    delta: dict[int, float]
    per_camera: dict[int, "DepthEval"] = field(default_factory=dict)

    def as_record(self) -> dict:
        rec = {"abs_rel": self.abs_rel, "sq_rel": self.sq_rel, "rmse": self.rmse}
        rec.update({f"delta_{n}": v for n, v in sorted(self.delta.items())})
        return rec


@dataclass(frozen=True)
class TrajEval:
    ate: float
    ate_scaled: float
    scale: float

    def as_record(self) -> dict:
        return {"ate": self.ate, "ate_scaled": self.ate_scaled, "scale": self.scale}


def _frame_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-frame ``[abs_rel, sq_rel, rmse, delta_1, delta_2, delta_3]`` over 1-D pixel arrays."""
    diff = pred - gt
    ratio = np.maximum(pred / gt, gt / pred)
    deltas = [np.mean(ratio < DELTA_BASE**n) for n in DELTA_ORDERS]
    return np.array([np.mean(np.abs(diff) / gt), np.mean(diff**2 / gt), np.sqrt(np.mean(diff**2)), *deltas])


def _from_row(row: np.ndarray, per_camera=None) -> DepthEval:
    delta = {n: float(row[3 + k]) for k, n in enumerate(DELTA_ORDERS)}
    return DepthEval(float(row[0]), float(row[1]), float(row[2]), delta, per_camera or {})


def depth_metrics(
    pred: Sequence[np.ndarray],
    gt: Sequence[np.ndarray],
    valid: Sequence[np.ndarray] | None = None,
    max_depth: float = DEFAULT_MAX_DEPTH,
    cameras: Sequence[int] | None = None,
) -> DepthEval:
    """Mean over frames of per-frame depth errors, with a per-camera breakdown.

    A pixel is evaluated where ``valid`` is set and ``0 < gt <= max_depth``.
    Frames without evaluated pixels are skipped.
    """
    if isinstance(pred, np.ndarray) and pred.ndim <= 2:
        pred, gt = [pred], [gt]
        valid = None if valid is None else [valid]
    if len(pred) != len(gt) or (valid is not None and len(valid) != len(pred)):
        raise LengthMismatch("pred, gt and validity need one entry per frame")
    cameras = [0] * len(pred) if cameras is None else list(cameras)
    if len(cameras) != len(pred):
        raise LengthMismatch("one camera index per frame is required")
    if max_depth <= 0:
        raise ValidationError("max_depth must be positive")

    rows: dict[int, list[np.ndarray]] = {}
    for k, (p, g) in enumerate(zip(pred, gt)):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeMismatch(f"frame {k}: prediction {p.shape} vs ground truth {g.shape}")
        m = (g > 0) & (g <= max_depth) & np.isfinite(g)
        if valid is not None:
            m &= np.asarray(valid[k], dtype=bool)
        if not m.any():
            continue
        if np.any(~(p[m] > 0)) or not np.all(np.isfinite(p[m])):
            raise ValidationError(f"frame {k}: predicted depth must be positive and finite on evaluated pixels")
        rows.setdefault(cameras[k], []).append(_frame_errors(p[m], g[m]))
    if not rows:
        raise NoValidPixels("no pixel passes the validity and max-depth filters")
    per_camera = {c: _from_row(np.mean(r, axis=0)) for c, r in sorted(rows.items())}
    overall = np.mean([row for r in rows.values() for row in r], axis=0)
    return _from_row(overall, per_camera)


def median_scale(
    pred: Mapping[int, np.ndarray] | Sequence[np.ndarray],
    gt: Mapping[int, np.ndarray] | Sequence[np.ndarray],
    valid: Mapping[int, np.ndarray] | Sequence[np.ndarray] | None = None,
) -> float:
    """``s = mean_c median(gt_c) / median(pred_c)`` over cameras.

    Each camera entry may hold one frame or a stack of frames; all valid
    pixels of a camera are pooled.
    """
    keys = sorted(pred) if isinstance(pred, Mapping) else list(range(len(pred)))
    gkeys = sorted(gt) if isinstance(gt, Mapping) else list(range(len(gt)))
    if keys != gkeys:
        raise LengthMismatch("pred and gt must cover the same cameras")
    if not keys:
        raise EmptyCamera("no cameras given")
    ratios = []
    for c in keys:
        p, g = np.asarray(pred[c], dtype=np.float64), np.asarray(gt[c], dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeMismatch(f"camera {c}: prediction {p.shape} vs ground truth {g.shape}")
        m = (g > 0) & (p > 0) & np.isfinite(g) & np.isfinite(p)
        if valid is not None:
            m &= np.asarray(valid[c], dtype=bool)
        if not m.any():
            raise EmptyCamera(f"camera {c} has no valid pixel")
        ratios.append(np.median(g[m]) / np.median(p[m]))
    return float(np.mean(ratios))


def _as_matrices(traj: Sequence[Pose | np.ndarray]) -> np.ndarray:
    return np.stack([p.matrix() if isinstance(p, Pose) else np.asarray(p, dtype=np.float64) for p in traj])


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False):
    """Least-squares ``(s, R, t)`` with ``dst ~ s R src + t`` for (N, 3) point sets."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var = np.mean(np.sum(xs**2, axis=1))
    s = float(np.trace(np.diag(D) @ S) / var) if with_scale and var > 0 else 1.0
    return s, R, mu_d - s * R @ mu_s


def ate(
    pred: Sequence[Pose | np.ndarray],
    gt: Sequence[Pose | np.ndarray],
    scaled: bool = False,
    align: bool = False,
) -> TrajEval:
    """RMSE of ``trans(Q_i^-1 S P_i)``; ``S`` scales predicted translations.

    With ``scaled`` the scale is the closed-form least-squares optimum. With
    ``align`` the predicted trajectory is first rigidly aligned to the ground
    truth on camera centres.
    """
    if len(pred) != len(gt):
        raise LengthMismatch(f"trajectories differ in length: {len(pred)} vs {len(gt)}")
    if len(pred) == 0:
        raise ValidationError("trajectories must not be empty")
    P, Q = _as_matrices(pred), _as_matrices(gt)
    if align:
        _, R, t = umeyama(P[:, :3, 3], Q[:, :3, 3])
        A = np.eye(4)
        A[:3, :3], A[:3, 3] = R, t
        P = A @ P
    RqT = np.swapaxes(Q[:, :3, :3], 1, 2)
    tp, tq = P[:, :3, 3], Q[:, :3, 3]

    def rmse(s: float) -> float:
        err = np.einsum("nab,nb->na", RqT, s * tp - tq)
        return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))

    e = rmse(1.0)
    if not scaled:
        return TrajEval(e, e, 1.0)
    den = float(np.sum(tp * tp))
    s = float(np.sum(tp * tq) / den) if den > 0 else 1.0
    return TrajEval(e, rmse(s), s)
