"""Mesh metrics with observability trimming, and depth metrics on rendered meshes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import GridSpec, Intrinsics, Pose, project_points
from .meshio import TriangleMesh
from .scene import DepthMap

SAMPLES_PER_M2 = 1e4  # 1 point / cm^2
DEFAULT_THRESHOLD = 0.05


@dataclass
class Metrics3D:
    acc: float  # cm
    comp: float  # cm
    chamfer: float  # cm
    prec: float  # percent
    rec: float  # percent
    f1: float  # percent
    threshold: float = DEFAULT_THRESHOLD

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Metrics2D:
    l1: float  # cm
    absrel: float
    sqrel: float
    delta_105: float  # percent
    delta_125: float  # percent
    completeness: float  # percent
    deltas: dict = field(default_factory=dict)  # extra thresholds -> percent

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class VisibilityVolume:
    spec: GridSpec
    observed: np.ndarray

    def contains(self, points) -> np.ndarray:
        idx = np.floor(self.spec.to_index(points) + 0.5).astype(np.int64)
        dims = np.asarray(self.spec.dims)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        out = np.zeros(len(idx), dtype=bool)
        ii = idx[inside]
        out[inside] = self.observed[ii[:, 0], ii[:, 1], ii[:, 2]]
        return out


def visibility_volume(gt_depths, cameras, spec: GridSpec, truncation: float) -> VisibilityVolume:
    """Voxels that project inside some ground-truth frame in front of ``D(u) + tau``."""
    centers = spec.centers()
    seen = np.zeros(len(centers), dtype=bool)
    for d, (K, pose) in zip(gt_depths, cameras):
        depth = np.asarray(getattr(d, "values", d))
        uv, z, valid = project_points(centers, K, pose)
        col = np.clip(np.floor(uv[:, 0] + 0.5).astype(np.int64), 0, K.width - 1)
        row = np.clip(np.floor(uv[:, 1] + 0.5).astype(np.int64), 0, K.height - 1)
        dv = depth[row, col]
        seen |= valid & (dv > 0) & (z < dv + truncation)
    return VisibilityVolume(spec, seen.reshape(spec.dims))


def sample_surface(mesh: TriangleMesh, density: float = SAMPLES_PER_M2, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform surface samples.

    Triangles are processed in order and every random stream is consumed as a
    prefix, so a mesh that extends another (extra triangles appended) reproduces
    the other's samples exactly before adding its own.
    """
    if mesh.is_empty:
        return np.zeros((0, 3))
    # separate streams for the per-triangle counts and the barycentric draws
    count_rng, bary_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    areas = mesh.areas()
    expected = areas * density
    counts = np.floor(expected + count_rng.random(len(areas))).astype(np.int64)
    tri = np.repeat(np.arange(len(areas)), counts)
    r = bary_rng.random((len(tri), 2))
    s = np.sqrt(r[:, 0])
    b0, b1, b2 = 1 - s, s * (1 - r[:, 1]), s * r[:, 1]
    v = mesh.vertices[mesh.triangles[tri]]
    return b0[:, None] * v[:, 0] + b1[:, None] * v[:, 1] + b2[:, None] * v[:, 2]


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    if len(src) == 0:
        return np.zeros(0)
    return cKDTree(dst).query(src)[0]


def metrics_3d(pred: TriangleMesh, gt: TriangleMesh, vis: VisibilityVolume | None = None,
               threshold: float = DEFAULT_THRESHOLD, density: float = SAMPLES_PER_M2,
               seed: int = 0) -> Metrics3D:
    """Accuracy/precision over the observed part of the prediction; completeness/recall
    over all ground truth against the untrimmed prediction. Distances in cm."""
    if pred.is_empty or gt.is_empty:
        raise ValueError("3D metrics are undefined for an empty mesh")
    p = sample_surface(pred, density, seed)
    g = sample_surface(gt, density, seed)
    if len(p) == 0 or len(g) == 0:
        raise ValueError("mesh too small to sample at the configured density")
    p_trim = p if vis is None else p[vis.contains(p)]
    d_acc = _nearest(p_trim, g)
    d_comp = _nearest(g, p)
    acc = float(d_acc.mean()) if len(d_acc) else 0.0
    comp = float(d_comp.mean())
    prec = float((d_acc < threshold).mean()) if len(d_acc) else 0.0
    rec = float((d_comp < threshold).mean())
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return Metrics3D(100 * acc, 100 * comp, 100 * (acc + comp) / 2, 100 * prec, 100 * rec, 100 * f1, threshold)


# ---------------------------------------------------------------- rendering


def _candidate_pairs(tri_verts, K: Intrinsics, pose: Pose):
    """(triangle, pixel) pairs whose projected bounding boxes overlap."""
    n = len(tri_verts)
    uv, z, _ = project_points(tri_verts.reshape(-1, 3), K, pose, z_min=1e-9)
    uv = uv.reshape(n, 3, 2)
    z = z.reshape(n, 3)
    front = np.all(z > 1e-6, axis=1)
    lo = np.where(front[:, None], np.floor(uv.min(axis=1)), 0)
    hi = np.where(front[:, None], np.ceil(uv.max(axis=1)), [K.width - 1, K.height - 1])
    lo = np.clip(lo, 0, [K.width - 1, K.height - 1]).astype(np.int64)
    hi = np.clip(hi, 0, [K.width - 1, K.height - 1]).astype(np.int64)
    behind = np.all(z <= 1e-6, axis=1)
    w = np.where(behind, 0, hi[:, 0] - lo[:, 0] + 1)
    h = np.where(behind, 0, hi[:, 1] - lo[:, 1] + 1)
    counts = w * h
    tri = np.repeat(np.arange(n), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    px = lo[tri, 0] + local % w[tri]
    py = lo[tri, 1] + local // w[tri]
    return tri, py * K.width + px


def render_depth(mesh: TriangleMesh, K: Intrinsics, pose: Pose, batch: int = 2_000_000) -> DepthMap:
    """Nearest ray-triangle hit per pixel (Möller–Trumbore, two-sided), as z-depth."""
    depth = np.full(K.height * K.width, np.inf)
    if not mesh.is_empty:
        v, u = np.mgrid[0 : K.height, 0 : K.width].astype(float)
        # unnormalized directions with unit camera-z, so the ray parameter is z-depth
        d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
        dirs = d_cam @ pose.rotation.T
        origin = pose.translation
        tv = mesh.vertices[mesh.triangles]
        tri, pix = _candidate_pairs(tv, K, pose)
        for s in range(0, len(tri), batch):
            t_i, p_i = tri[s : s + batch], pix[s : s + batch]
            v0, v1, v2 = tv[t_i, 0], tv[t_i, 1], tv[t_i, 2]
            d = dirs[p_i]
            e1, e2 = v1 - v0, v2 - v0
            h = np.cross(d, e2)
            a = np.einsum("ij,ij->i", e1, h)
            ok = np.abs(a) > 1e-14
            f = np.where(ok, 1.0 / np.where(ok, a, 1.0), 0.0)
            sv = origin - v0
            bu = f * np.einsum("ij,ij->i", sv, h)
            q = np.cross(sv, e1)
            bv = f * np.einsum("ij,ij->i", d, q)
            t = f * np.einsum("ij,ij->i", e2, q)
            hit = ok & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t > 1e-9)
            np.minimum.at(depth, p_i[hit], t[hit])
    depth = np.where(np.isfinite(depth), depth, 0.0).reshape(K.height, K.width)
    return DepthMap(depth, K, pose)


def metrics_2d(rendered, gt, thresholds=()) -> Metrics2D:
    """Per-frame depth metrics over pixels valid in both maps, averaged over frames."""
    rendered, gt = list(rendered), list(gt)
    if len(rendered) != len(gt):
        raise ValueError(f"{len(rendered)} rendered maps but {len(gt)} ground-truth maps")
    keys = ["l1", "absrel", "sqrel", "delta_105", "delta_125"] + [f"delta_{t}" for t in thresholds]
    per_frame = {k: [] for k in keys}
    comp = []
    for r, g in zip(rendered, gt):
        r = np.asarray(getattr(r, "values", r), dtype=float)
        g = np.asarray(getattr(g, "values", g), dtype=float)
        if r.shape != g.shape:
            raise ValueError(f"resolution mismatch {r.shape} vs {g.shape}")
        vg = g > 0
        both = vg & (r > 0)
        if vg.any():
            comp.append(100.0 * both.sum() / vg.sum())
        if not both.any():
            continue
        d, dh = g[both], r[both]
        err = np.abs(d - dh)
        ratio = np.maximum(d / dh, dh / d)
        per_frame["l1"].append(100.0 * err.mean())
        per_frame["absrel"].append(float((err / d).mean()))
        per_frame["sqrel"].append(float((err**2 / d).mean()))
        per_frame["delta_105"].append(100.0 * (ratio < 1.05).mean())
        per_frame["delta_125"].append(100.0 * (ratio < 1.25).mean())
        for t in thresholds:
            per_frame[f"delta_{t}"].append(100.0 * (ratio < t).mean())

    def avg(k):
        return float(np.mean(per_frame[k])) if per_frame[k] else math.nan

    return Metrics2D(
        avg("l1"), avg("absrel"), avg("sqrel"), avg("delta_105"), avg("delta_125"),
        float(np.mean(comp)) if comp else 0.0,
        {t: avg(f"delta_{t}") for t in thresholds},
    )
