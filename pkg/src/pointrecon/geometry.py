"""Pinhole cameras, rigid poses, voxel grids and trilinear sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Z_MIN = 0.05


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K, width: int, height: int) -> "Intrinsics":
        K = np.asarray(K, dtype=float)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), int(width), int(height))

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics of the same camera resampled by ``factor`` (pixel-center aligned)."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform: ``p_world = R @ p_cam + t``."""

    rotation: np.ndarray
    translation: np.ndarray
    # number of compositions since the last re-orthonormalization
    _depth: int = field(default=0, repr=False, compare=False)

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``; rotations are re-orthonormalized once composed more than once."""
        R = self.rotation @ other.rotation
        t = self.rotation @ other.translation + self.translation
        depth = max(self._depth, other._depth) + 1
        if depth > 1:
            R = orthonormalize(R)
            depth = 0
        return Pose(R, t, depth)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)


def transform_point(p, pose: Pose, direction: str = "forward") -> np.ndarray:
    """Map camera-frame points to world (``forward``) or world points to camera (``inverse``).

    Works on a single 3-vector or an (N, 3) array.
    """
    p = np.asarray(p, dtype=float)
    if direction == "forward":
        return p @ pose.rotation.T + pose.translation
    if direction == "inverse":
        return (p - pose.translation) @ pose.rotation
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def project_points(points, K: Intrinsics, pose: Pose, z_min: float = Z_MIN):
    """Vectorized pinhole projection of world points.

    Returns ``(uv, z, valid)`` with ``uv`` of shape (N, 2) in continuous pixel
    coordinates (pixel centers at integers), camera-frame z-depth and the
    in-front-and-inside-image flag.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    pc = transform_point(p, pose, "inverse")
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        safe_z = np.where(z > z_min, z, 1.0)
        u = K.fx * pc[:, 0] / safe_z + K.cx
        v = K.fy * pc[:, 1] / safe_z + K.cy
    inside = (u >= -0.5) & (u <= K.width - 0.5) & (v >= -0.5) & (v <= K.height - 0.5)
    valid = (z > z_min) & inside
    return np.stack([u, v], axis=1), z, valid


def project_point(p, K: Intrinsics, pose: Pose, z_min: float = Z_MIN):
    """Single-point projection: ``((u, v), z, valid)``."""
    uv, z, valid = project_points(np.asarray(p, dtype=float)[None], K, pose, z_min)
    return (float(uv[0, 0]), float(uv[0, 1])), float(z[0]), bool(valid[0])


def pixel_rays(K: Intrinsics, pose: Pose):
    """Unit world-space ray directions for every pixel center, shape (H, W, 3),
    and the cosine between each ray and the optical axis (ray length to z-depth factor)."""
    v, u = np.mgrid[0 : K.height, 0 : K.width].astype(float)
    d = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    d_cam = d / norm
    return d_cam @ pose.rotation.T, d_cam[..., 2]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at ``eye`` with +z looking at ``target`` and image y pointing away from ``up``."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = orthonormalize(np.stack([right, down, fwd], axis=1))
    return Pose(R, eye)


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned voxel grid; ``origin`` is the center of voxel (0, 0, 0)."""

    origin: tuple
    voxel_size: float = 0.04
    dims: tuple = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive extents, got {self.dims}")

    @classmethod
    def covering(cls, lo, hi, voxel_size: float) -> "GridSpec":
        """Smallest grid whose voxel centers span the box ``[lo, hi]``."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        dims = np.maximum(np.ceil((hi - lo) / voxel_size - 1e-9).astype(int) + 1, 1)
        return cls(tuple(lo), voxel_size, tuple(dims))

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.voxel_size * (np.asarray(self.dims) - 1)

    def centers(self) -> np.ndarray:
        """World positions of all voxel centers, (N, 3), in C order over (i, j, k)."""
        idx = np.indices(self.dims).reshape(3, -1).T
        return np.asarray(self.origin) + self.voxel_size * idx

    def to_index(self, points) -> np.ndarray:
        """Continuous voxel coordinates of world points."""
        return (np.asarray(points, dtype=float) - np.asarray(self.origin)) / self.voxel_size

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        c = self.to_index(points)
        hi = np.asarray(self.dims) - 1
        return np.all((c >= -margin) & (c <= hi + margin), axis=-1)


def trilinear_weights(spec: GridSpec, points):
    """Corner indices (N, 8) into the flattened grid, blend weights (N, 8) and an
    out-of-bounds flag (N,). Out-of-bounds points are clamped to the border."""
    c = np.atleast_2d(spec.to_index(points))
    dims = np.asarray(spec.dims)
    hi = dims - 1
    oob = np.any((c < -1e-9) | (c > hi + 1e-9), axis=1)
    c = np.clip(c, 0, hi)
    i0 = np.minimum(np.floor(c).astype(np.int64), np.maximum(hi - 1, 0))
    f = c - i0
    i1 = np.minimum(i0 + 1, hi)
    idx = np.empty((len(c), 8), dtype=np.int64)
    w = np.empty((len(c), 8))
    n = 0
    for dx in (0, 1):
        ix = i1[:, 0] if dx else i0[:, 0]
        wx = f[:, 0] if dx else 1 - f[:, 0]
        for dy in (0, 1):
            iy = i1[:, 1] if dy else i0[:, 1]
            wy = f[:, 1] if dy else 1 - f[:, 1]
            for dz in (0, 1):
                iz = i1[:, 2] if dz else i0[:, 2]
                wz = f[:, 2] if dz else 1 - f[:, 2]
                idx[:, n] = (ix * dims[1] + iy) * dims[2] + iz
                w[:, n] = wx * wy * wz
                n += 1
    return idx, w, oob


def trilinear_sample(spec: GridSpec, values: np.ndarray, points):
    """Trilinearly sample ``values`` (shape ``dims`` or ``dims + (C,)``) at world points.

    Returns ``(samples, out_of_bounds)``; out-of-bounds queries are clamped to the
    border and flagged, never rejected.
    """
    values = np.asarray(values)
    single = np.asarray(points).ndim == 1
    idx, w, oob = trilinear_weights(spec, points)
    flat = values.reshape(spec.num_voxels, -1)
    out = np.einsum("nk,nkc->nc", w, flat[idx])
    if values.ndim == 3:
        out = out[:, 0]
    if single:
        return out[0], bool(oob[0])
    return out, oob


def bilinear_weights(uv, height: int, width: int):
    """Corner indices (N, 4) into a flattened (H, W) map and weights (N, 4) for
    continuous coordinates (cell centers at integers), clamped at the border."""
    uv = np.atleast_2d(uv)
    x = np.clip(uv[:, 0], 0, width - 1)
    y = np.clip(uv[:, 1], 0, height - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(height - 2, 0))
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, w
