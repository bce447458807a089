"""File formats: binary grids and masks, rig files, TUM trajectories, scene bundles.

Binary grids start with four little-endian uint32 values ``(magic, H, W, D)``
followed by row-major payload: float32 for grids, uint8 for masks.
"""

from __future__ import annotations

import configparser
import json
import struct
from pathlib import Path

import numpy as np

from .covis import Edge, EdgeKind, FrameId
from .errors import IoError, ValidationError
from .geometry import Camera, Intrinsics, Pose, Rig
from .simulator import NoiseSpec, Scene

GRID_MAGIC = 0x4744434D  # "MCDG"
MASK_MAGIC = 0x4D44434D  # "MCDM"
_HEADER = struct.Struct("<4I")
BUNDLE_FORMAT = "mcdba-scene"
BUNDLE_VERSION = 1


def _write_bytes(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _as_hwd(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValidationError("grids must be H x W or H x W x D")
    return a


def encode_grid(a: np.ndarray, magic: int = GRID_MAGIC, dtype="<f4") -> bytes:
    a = _as_hwd(a)
    h, w, d = a.shape
    return _HEADER.pack(magic, h, w, d) + np.ascontiguousarray(a, dtype=dtype).tobytes()


def decode_grid(data: bytes, magic: int = GRID_MAGIC, dtype="<f4") -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ValidationError("grid file shorter than its header")
    m, h, w, d = _HEADER.unpack_from(data)
    if m != magic:
        raise ValidationError(f"bad grid magic 0x{m:08x}")
    payload = data[_HEADER.size :]
    n = h * w * d * np.dtype(dtype).itemsize
    if len(payload) != n:
        raise ValidationError(f"grid payload has {len(payload)} bytes, header implies {n}")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w, d).copy()


def write_grid(path, a: np.ndarray) -> None:
    _write_bytes(path, encode_grid(a))


def read_grid(path) -> np.ndarray:
    """(H, W, D) float32 array."""
    return decode_grid(_read_bytes(path))


def write_mask(path, mask: np.ndarray) -> None:
    """Boolean or 0/255 mask; stored as 8-bit with 0 = masked."""
    m = np.asarray(mask)
    if m.dtype == bool:
        m = m.astype(np.uint8) * 255
    _write_bytes(path, encode_grid(m, MASK_MAGIC, "u1"))


def read_mask(path) -> np.ndarray:
    """(H, W) boolean array, True where the stored value is non-zero."""
    return decode_grid(_read_bytes(path), MASK_MAGIC, "u1")[..., 0] != 0


# -- rig files ---------------------------------------------------------

def rig_to_text(rig: Rig) -> str:
    cp = configparser.ConfigParser()
    cp["rig"] = {"n_cameras": str(len(rig)), "reference_camera": str(rig.reference_camera)}
    for c, cam in enumerate(rig.cameras):
        k, e = cam.intrinsics, cam.extrinsic
        sec = {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height}
        sec.update(zip(("tx", "ty", "tz"), e.translation))
        sec.update(zip(("qx", "qy", "qz", "qw"), e.rotation))
        cp[f"camera.{c}"] = {key: repr(float(v)) if key not in ("width", "height") else str(int(v)) for key, v in sec.items()}
    return _ini_text(cp)


def _ini_text(cp: configparser.ConfigParser) -> str:
    import io as _io

    buf = _io.StringIO()
    cp.write(buf)
    return buf.getvalue()


_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "tx", "ty", "tz", "qx", "qy", "qz", "qw")


def rig_from_text(text: str) -> Rig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        n = cp.getint("rig", "n_cameras")
        ref = cp.getint("rig", "reference_camera")
        cams = []
        for c in range(n):
            sec = cp[f"camera.{c}"]
            if set(sec) != set(_CAMERA_KEYS):
                raise ValidationError(f"camera.{c} must define exactly {', '.join(_CAMERA_KEYS)}")
            v = {k: float(sec[k]) for k in _CAMERA_KEYS}
            intr = Intrinsics(v["fx"], v["fy"], v["cx"], v["cy"], int(v["width"]), int(v["height"]))
            ext = Pose([v["qx"], v["qy"], v["qz"], v["qw"]], [v["tx"], v["ty"], v["tz"]])
            cams.append(Camera(intr, ext))
        extra = set(cp.sections()) - {"rig"} - {f"camera.{c}" for c in range(n)}
        if extra:
            raise ValidationError(f"unknown rig sections: {sorted(extra)}")
    except (configparser.Error, KeyError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed rig file: {exc}") from exc
    return Rig(tuple(cams), ref)


# -- TUM trajectories --------------------------------------------------

def tum_line(t: float, pose: Pose) -> str:
    vals = [*pose.translation, *pose.rotation]
    return " ".join([repr(float(t))] + [repr(float(x)) for x in vals])


def trajectory_to_text(traj: dict[int, Pose]) -> str:
    return "".join(tum_line(t, p) + "\n" for t, p in sorted(traj.items()))


def trajectory_from_text(text: str) -> dict[int, Pose]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValidationError(f"line {lineno}: expected 't tx ty tz qx qy qz qw'")
        try:
            vals = [float(x) for x in parts]
        except ValueError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from exc
        t = int(round(vals[0]))
        if t in out:
            raise ValidationError(f"line {lineno}: duplicate timestep {t}")
        out[t] = Pose(vals[4:8], vals[1:4])
    return out


def write_text(path, text: str) -> None:
    _write_bytes(path, text.encode())


def read_text(path) -> str:
    return _read_bytes(path).decode()


def json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def read_json(path):
    try:
        return json.loads(read_text(path))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc


# -- scene bundles -----------------------------------------------------

def depth_name(frame: FrameId) -> str:
    return f"depth_{frame.t:06d}_{frame.c}.bin"


def edge_name(edge: Edge) -> str:
    i, j = edge
    return f"edge_{i.t:06d}_{i.c}_{j.t:06d}_{j.c}.bin"


def save_scene(
    scene: Scene,
    out: Path,
    edges: dict[Edge, EdgeKind] | None = None,
    measurements: dict[Edge, tuple[np.ndarray, np.ndarray]] | None = None,
    config_echo: dict | None = None,
) -> Path:
    """Write a scene bundle; edge grids hold ``(tx, ty, wx, wy)`` per pixel."""
    out = Path(out)
    try:
        (out / "depth").mkdir(parents=True, exist_ok=True)
        (out / "edges").mkdir(exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    write_text(out / "rig.ini", rig_to_text(scene.rig))
    write_text(out / "trajectory.tum", trajectory_to_text(dict(enumerate(scene.poses))))
    for frame, d in sorted(scene.depths.items()):
        write_grid(out / "depth" / depth_name(frame), d)
    edges = edges or {}
    measurements = measurements or {}
    for e in sorted(measurements):
        tgt, conf = measurements[e]
        write_grid(out / "edges" / edge_name(e), np.concatenate([tgt, conf], axis=-1))
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "seed": scene.seed,
        "n_steps": scene.n_steps,
        "n_cameras": len(scene.rig),
        "depth_range": list(scene.depth_range),
        "noise": {
            "pose_sigma": scene.noise.pose_sigma,
            "depth_rel_sigma": scene.noise.depth_rel_sigma,
            "outlier_fraction": scene.noise.outlier_fraction,
            "seed": scene.noise.seed,
        },
        "rig": "rig.ini",
        "trajectory": "trajectory.tum",
        "depths": [f"depth/{depth_name(f)}" for f in sorted(scene.depths)],
        "edges": [
            {"edge": [e[0].t, e[0].c, e[1].t, e[1].c], "kind": edges[e].value if e in edges else None, "file": f"edges/{edge_name(e)}"}
            for e in sorted(measurements)
        ],
        "config": config_echo or {},
    }
    write_text(out / "manifest.json", json_text(manifest))
    return out


def load_scene(bundle: Path) -> tuple[Scene, dict]:
    """Read a bundle back into a ``Scene``; returns ``(scene, manifest)``."""
    bundle = Path(bundle)
    manifest = read_json(bundle / "manifest.json")
    try:
        if manifest.get("format") != BUNDLE_FORMAT or manifest.get("version") != BUNDLE_VERSION:
            raise ValidationError("not a scene bundle of a supported version")
        rig = rig_from_text(read_text(bundle / manifest["rig"]))
        traj = trajectory_from_text(read_text(bundle / manifest["trajectory"]))
        n_steps, n_cams = int(manifest["n_steps"]), int(manifest["n_cameras"])
        if sorted(traj) != list(range(n_steps)) or len(rig) != n_cams:
            raise ValidationError("manifest disagrees with rig or trajectory")
        depths = {}
        for t in range(n_steps):
            for c in range(n_cams):
                f = FrameId(t, c)
                d = read_grid(bundle / "depth" / depth_name(f))
                if d.shape != rig.intrinsics(c).shape + (1,):
                    raise ValidationError(f"depth grid {f} has shape {d.shape}")
                depths[f] = d[..., 0].astype(np.float64)
        noise = NoiseSpec(**manifest["noise"])
        near, far = manifest["depth_range"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed manifest: {exc}") from exc
    scene = Scene(rig, [traj[t] for t in range(n_steps)], depths, (float(near), float(far)), int(manifest["seed"]), noise)
    return scene, manifest
