"""Lifting 2D feature maps into 3D: dense voxel volumes with depth guidance and
continuous per-point sampling with border down-weighting.

Every variant is expressed as a constant sparse matrix acting on the stacked,
flattened feature maps, so the same operator serves plain numpy evaluation and
the differentiable model (see :func:`pointrecon.autodiff.tensor.sparse_matmul`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import GridSpec, bilinear_weights, project_points
from .tsdf import TsdfVolume, fuse_points

BORDER_MARGIN = 20.0
BORDER_FALLOFF = 6.0

VARIANTS = ("tsdf", "density", "gaussian_weight", "tsdf_plus_gaussian", "none", "depth_only")


@dataclass
class FeatureMap2D:
    """Feature map of shape (C, H, W) computed at ``stride`` input pixels per cell."""

    data: np.ndarray
    stride: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class FeatureVolume:
    spec: GridSpec
    data: np.ndarray  # dims + (C,)
    validity: np.ndarray  # dims, number of contributing views

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


@dataclass(frozen=True)
class GuidanceStrategy:
    variant: str = "tsdf"
    sigma: float = 0.06

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown guidance variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def needs_volume(self) -> bool:
        return self.variant in ("tsdf", "tsdf_plus_gaussian", "depth_only")

    @property
    def needs_depths(self) -> bool:
        return self.variant in ("density", "gaussian_weight", "tsdf_plus_gaussian")

    @property
    def uses_images(self) -> bool:
        return self.variant != "depth_only"

    def extra_channels(self) -> int:
        return {"tsdf": 1, "density": 1, "gaussian_weight": 0, "tsdf_plus_gaussian": 1,
                "none": 0, "depth_only": 1}[self.variant]

    def output_channels(self, feature_channels: int) -> int:
        base = feature_channels if self.uses_images else 0
        return base + self.extra_channels()


def border_weight(d, margin: float = BORDER_MARGIN, falloff: float = BORDER_FALLOFF):
    """Sigmoid ramp from ~0 at the image border to ~1 beyond ``margin`` pixels."""
    d = np.asarray(d, dtype=float)
    x = falloff * (np.minimum(d / margin, 1.0) * 2.0 - 1.0)
    return 1.0 / (1.0 + np.exp(-x))


def border_distance(uv, width: int, height: int):
    """Distance in pixels from a projection to the nearest image border."""
    uv = np.atleast_2d(uv)
    return np.maximum(
        np.minimum.reduce([uv[:, 0] + 0.5, width - 0.5 - uv[:, 0], uv[:, 1] + 0.5, height - 0.5 - uv[:, 1]]),
        0.0,
    )


def feature_coords(uv, stride: int):
    """Image pixel coordinates to feature-cell coordinates (cell centers at integers)."""
    return (np.asarray(uv) + 0.5) / stride - 0.5


def _depth_at(depth: np.ndarray, uv: np.ndarray) -> np.ndarray:
    h, w = depth.shape
    col = np.clip(np.floor(uv[:, 0] + 0.5).astype(np.int64), 0, w - 1)
    row = np.clip(np.floor(uv[:, 1] + 0.5).astype(np.int64), 0, h - 1)
    return depth[row, col]


def _gaussian(z, d, sigma):
    return np.exp(-((z - d) ** 2) / (2 * sigma**2))


def sampling_operator(points, cameras, feature_hw, stride: int, view_weights=None):
    """Sparse (N, V*Hf*Wf) matrix whose rows take a normalized weighted mean of the
    bilinear feature samples over views with a valid projection.

    ``view_weights(i, uv, z) -> (N,)`` optionally supplies per-view weights
    (default 1); views with weight 0 do not contribute. Returns the matrix and the
    per-point count of contributing views.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    hf, wf = feature_hw
    cells = hf * wf
    rows, cols, vals = [], [], []
    wsum = np.zeros(n)
    count = np.zeros(n)
    for i, (K, pose) in enumerate(cameras):
        uv, z, valid = project_points(points, K, pose)
        w = np.ones(n) if view_weights is None else np.asarray(view_weights(i, uv, z), dtype=float)
        use = valid & (w > 0)
        if not use.any():
            continue
        pid = np.nonzero(use)[0]
        idx, bw = bilinear_weights(feature_coords(uv[pid], stride), hf, wf)
        rows.append(np.repeat(pid, 4))
        cols.append((idx + i * cells).ravel())
        vals.append((bw * w[pid, None]).ravel())
        wsum[pid] += w[pid]
        count[pid] += 1
    total_cols = len(cameras) * cells
    if not rows:
        return sp.csr_matrix((n, total_cols)), count
    rows = np.concatenate(rows)
    vals = np.concatenate(vals) / wsum[rows]
    A = sp.csr_matrix((vals, (rows, np.concatenate(cols))), shape=(n, total_cols))
    A.sum_duplicates()
    return A, count


def stack_features(features) -> np.ndarray:
    """(V, C, H, W) maps to the (V*H*W, C) layout the sampling operators act on."""
    arr = np.stack([getattr(f, "data", f) for f in features])
    return arr.transpose(0, 2, 3, 1).reshape(-1, arr.shape[1])


@dataclass
class DenseOperator:
    """Everything needed to assemble the guided volume from (differentiable) features."""

    spec: GridSpec
    matrix: sp.csr_matrix | None  # None when image features are not used
    validity: np.ndarray
    extra: np.ndarray | None  # (N, k) guidance channels appended after the image features


def dense_operator(cameras, feature_hw, stride: int, spec: GridSpec, strategy: GuidanceStrategy,
                   depth_volume: TsdfVolume | None = None, depths=None) -> DenseOperator:
    if strategy.needs_volume and depth_volume is None:
        raise ValueError(f"guidance variant {strategy.variant!r} requires a fused depth volume")
    if strategy.needs_depths and depths is None:
        raise ValueError(f"guidance variant {strategy.variant!r} requires the depth maps")
    if depth_volume is not None and strategy.needs_volume and depth_volume.spec.dims != spec.dims:
        raise ValueError("depth volume grid does not match the feature grid")
    centers = spec.centers()
    dvals = [np.asarray(getattr(d, "values", d)) for d in depths] if depths is not None else None

    weights = None
    if strategy.variant in ("gaussian_weight", "tsdf_plus_gaussian"):
        def weights(i, uv, z):
            d = _depth_at(dvals[i], uv)
            return np.where(d > 0, _gaussian(z, d, strategy.sigma), 0.0)

    matrix, validity = None, np.zeros(len(centers))
    if strategy.uses_images:
        matrix, validity = sampling_operator(centers, cameras, feature_hw, stride, weights)
        if weights is not None:
            # validity still counts geometric visibility, not Gaussian support
            _, validity = sampling_operator(centers, cameras, feature_hw, stride)

    extra = None
    if strategy.variant in ("tsdf", "tsdf_plus_gaussian", "depth_only"):
        extra = depth_volume.values.reshape(-1, 1).astype(float)
        if strategy.variant == "depth_only":
            validity = depth_volume.weights.reshape(-1).astype(float)
    elif strategy.variant == "density":
        acc = np.zeros(len(centers))
        cnt = np.zeros(len(centers))
        for i, (K, pose) in enumerate(cameras):
            uv, z, valid = project_points(centers, K, pose)
            d = _depth_at(dvals[i], uv)
            use = valid & (d > 0)
            acc[use] += _gaussian(z[use], d[use], strategy.sigma)
            cnt[use] += 1
        extra = np.where(cnt > 0, acc / np.maximum(cnt, 1), 0.0)[:, None]
    return DenseOperator(spec, matrix, validity.reshape(spec.dims), extra)


def apply_dense(op: DenseOperator, stacked_features: np.ndarray | None) -> np.ndarray:
    parts = []
    if op.matrix is not None:
        parts.append(np.asarray(op.matrix @ stacked_features))
    if op.extra is not None:
        parts.append(op.extra)
    return np.concatenate(parts, axis=1)


def backproject_dense(features, cameras, spec: GridSpec, depth_volume: TsdfVolume | None = None,
                      strategy: GuidanceStrategy | None = None, depths=None) -> FeatureVolume:
    """Per-voxel mean of bilinear feature samples over views that see the voxel
    center, followed by the guidance variant (append the fused TSDF, append a
    depth density, Gaussian-weight the mean, ...)."""
    strategy = strategy or GuidanceStrategy("none")
    features = list(features)
    if len(features) != len(cameras):
        raise ValueError(f"got {len(features)} feature maps but {len(cameras)} cameras")
    f0 = features[0]
    op = dense_operator(cameras, (f0.height, f0.width), f0.stride, spec, strategy, depth_volume, depths)
    data = apply_dense(op, stack_features(features) if op.matrix is not None else None)
    return FeatureVolume(spec, data.reshape(spec.dims + (-1,)), op.validity)


def point_operator(points, cameras, feature_hw, stride: int):
    """Border-weighted point sampling operator; see :func:`point_backproject`."""

    def weights(i, uv, z):
        K = cameras[i][0]
        return border_weight(border_distance(uv, K.width, K.height))

    return sampling_operator(points, cameras, feature_hw, stride, weights)


def point_backproject(points, fine_features, cameras, depths=None, truncation: float | None = None,
                      include_depth: bool = False):
    """Sample fine features at arbitrary points: per view, bilinear sample at the
    projection, then a mean weighted by each projection's border weight.

    Returns ``(W, no_view)``. Points seen by no view get a zero vector and
    ``no_view=True``. With ``include_depth`` a continuously fused TSDF value of the
    depth maps is appended as an extra channel.
    """
    fine_features = list(fine_features)
    f0 = fine_features[0]
    A, count = point_operator(points, cameras, (f0.height, f0.width), f0.stride)
    W = np.asarray(A @ stack_features(fine_features))
    if include_depth:
        if depths is None or truncation is None:
            raise ValueError("include_depth needs depth maps and a truncation distance")
        tsdf, _ = fuse_points(points, depths, cameras, truncation)
        W = np.concatenate([W, tsdf[:, None]], axis=1)
    return W, count == 0
