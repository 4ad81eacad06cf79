"""Unit-weight TSDF fusion of depth maps, occupancy ground truth and volume files."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .fileio import atomic_write_bytes
from .geometry import GridSpec, project_points

DEFAULT_MAX_DEPTH = 10.0


@dataclass
class TsdfVolume:
    spec: GridSpec
    values: np.ndarray
    weights: np.ndarray
    truncation: float

    def __post_init__(self):
        if self.values.shape != self.spec.dims or self.weights.shape != self.spec.dims:
            raise ValueError(f"volume arrays must have shape {self.spec.dims}")

    @classmethod
    def empty(cls, spec: GridSpec, truncation: float | None = None) -> "TsdfVolume":
        tau = 3 * spec.voxel_size if truncation is None else truncation
        return cls(spec, np.ones(spec.dims), np.zeros(spec.dims), tau)

    @property
    def observed(self) -> np.ndarray:
        return self.weights > 0


@dataclass
class OccupancyGrid:
    spec: GridSpec
    flags: np.ndarray


def _lookup_depth(depth: np.ndarray, uv: np.ndarray) -> np.ndarray:
    h, w = depth.shape
    col = np.clip(np.floor(uv[:, 0] + 0.5).astype(np.int64), 0, w - 1)
    row = np.clip(np.floor(uv[:, 1] + 0.5).astype(np.int64), 0, h - 1)
    return depth[row, col]


def _check_inputs(depths, cameras):
    if len(depths) == 0:
        raise ValueError("cannot fuse an empty list of depth maps")
    if len(depths) != len(cameras):
        raise ValueError(f"got {len(depths)} depth maps but {len(cameras)} cameras")


def _depth_array(d) -> np.ndarray:
    return np.asarray(getattr(d, "values", d), dtype=float)


def fuse_points(points, depths, cameras, truncation: float, max_depth: float = DEFAULT_MAX_DEPTH):
    """Fuse depth maps at arbitrary world points; returns (values, weights)."""
    _check_inputs(depths, cameras)
    if not truncation > 0:
        raise ValueError("truncation must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    acc = np.zeros(len(points))
    count = np.zeros(len(points))
    for d, (K, pose) in zip(depths, cameras):
        depth = _depth_array(d)
        uv, z, valid = project_points(points, K, pose)
        dval = _lookup_depth(depth, uv)
        sdf = dval - z
        use = valid & (dval > 0) & (dval <= max_depth) & (sdf > -truncation)
        acc[use] += np.clip(sdf[use] / truncation, -1.0, 1.0)
        count[use] += 1.0
    values = np.ones(len(points))
    seen = count > 0
    values[seen] = acc[seen] / count[seen]
    return values, count


def fuse_depths(depths, cameras, spec: GridSpec, truncation: float | None = None,
                max_depth: float = DEFAULT_MAX_DEPTH) -> TsdfVolume:
    """Average per-view truncated distances ``clip((D(u) - z) / tau, -1, 1)`` at
    every voxel center. Samples at or beyond ``tau`` behind the observed surface
    are skipped; never-observed voxels keep +1 with zero weight."""
    tau = 3 * spec.voxel_size if truncation is None else truncation
    values, weights = fuse_points(spec.centers(), depths, cameras, tau, max_depth)
    return TsdfVolume(spec, values.reshape(spec.dims), weights.reshape(spec.dims), tau)


def tsdf_point_oracle(p, depths, cameras, truncation: float, max_depth: float = DEFAULT_MAX_DEPTH):
    """Scalar brute-force fusion at one point using homogeneous matrices.

    Returns ``(value, observed)``. Deliberately shares no code with :func:`fuse_depths`.
    """
    _check_inputs(depths, cameras)
    q = np.append(np.asarray(p, dtype=float), 1.0)
    total = 0.0
    n = 0
    for d, (K, pose) in zip(depths, cameras):
        depth = _depth_array(d)
        cam_from_world = np.linalg.inv(pose.matrix)
        x, y, z, _ = cam_from_world @ q
        if not z > 0.05:
            continue
        u, v, w = K.matrix @ np.array([x, y, z])
        u, v = u / w, v / w
        if not (-0.5 <= u <= K.width - 0.5 and -0.5 <= v <= K.height - 0.5):
            continue
        col = min(max(int(np.floor(u + 0.5)), 0), K.width - 1)
        row = min(max(int(np.floor(v + 0.5)), 0), K.height - 1)
        dv = depth[row, col]
        if not (0 < dv <= max_depth):
            continue
        sdf = dv - z
        if sdf <= -truncation:
            continue
        total += min(max(sdf / truncation, -1.0), 1.0)
        n += 1
    if n == 0:
        return 1.0, False
    return total / n, True


def occupancy_ground_truth(S) -> OccupancyGrid:
    """Near-surface occupancy: voxels with ``|S| < 1`` dilated by a full 3x3x3 element."""
    values = S.values if isinstance(S, TsdfVolume) else np.asarray(S)
    spec = S.spec if isinstance(S, TsdfVolume) else None
    core = np.abs(values) < 1.0
    flags = ndimage.binary_dilation(core, structure=np.ones((3, 3, 3), dtype=bool), border_value=0)
    return OccupancyGrid(spec, flags)


# ---------------------------------------------------------------- file format

_MAGIC = b"TSDF"
_VERSION = 1
_HEADER = struct.Struct("<4sI3i5d")


def volume_to_bytes(vol: TsdfVolume) -> bytes:
    header = _HEADER.pack(_MAGIC, _VERSION, *vol.spec.dims, vol.spec.voxel_size, *vol.spec.origin, vol.truncation)
    return (
        header
        + np.ascontiguousarray(vol.values, dtype="<f4").tobytes()
        + np.ascontiguousarray(vol.weights, dtype="<f4").tobytes()
    )


def volume_from_bytes(buf: bytes) -> TsdfVolume:
    if len(buf) < _HEADER.size:
        raise ValueError(f"volume file too short for header: {len(buf)} < {_HEADER.size} bytes")
    magic, version, nx, ny, nz, vs, ox, oy, oz, tau = _HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise ValueError(f"not a TSDF volume file (magic {magic!r})")
    if version != _VERSION:
        raise ValueError(f"unsupported volume version {version}")
    n = nx * ny * nz
    expected = _HEADER.size + 8 * n
    if len(buf) != expected:
        raise ValueError(f"volume file has {len(buf)} bytes, expected {expected} for dims {(nx, ny, nz)}")
    off = _HEADER.size
    values = np.frombuffer(buf, "<f4", n, off).astype(float).reshape(nx, ny, nz)
    weights = np.frombuffer(buf, "<f4", n, off + 4 * n).astype(float).reshape(nx, ny, nz)
    return TsdfVolume(GridSpec((ox, oy, oz), vs, (nx, ny, nz)), values, weights, tau)


def save_volume(vol: TsdfVolume, path) -> None:
    atomic_write_bytes(path, volume_to_bytes(vol))


def load_volume(path) -> TsdfVolume:
    with open(path, "rb") as f:
        return volume_from_bytes(f.read())
