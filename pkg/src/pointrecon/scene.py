"""Procedural SDF scenes, sphere-traced depth maps and the noisy-depth stand-in for MVS."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec, Intrinsics, Pose, look_at, pixel_rays

MAX_STEPS = 256
STEP_SAFETY = 0.99
HIT_EPS = 1e-5
MAX_DISTANCE = 10.0


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def bounds(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Box:
    """Box rotated by ``yaw`` radians about the vertical (z) axis."""

    center: tuple
    half_extents: tuple
    yaw: float = 0.0

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise ValueError("box half-extents must be positive")

    def sdf(self, p):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        hx, hy, hz = self.half_extents
        dx = p[..., 0] - self.center[0]
        dy = p[..., 1] - self.center[1]
        qx = np.abs(c * dx + s * dy) - hx
        qy = np.abs(c * dy - s * dx) - hy
        qz = np.abs(p[..., 2] - self.center[2]) - hz
        outside = np.sqrt(np.maximum(qx, 0.0) ** 2 + np.maximum(qy, 0.0) ** 2 + np.maximum(qz, 0.0) ** 2)
        inside = np.minimum(np.maximum(qx, np.maximum(qy, qz)), 0.0)
        return outside + inside

    def bounds(self):
        c, s = abs(np.cos(self.yaw)), abs(np.sin(self.yaw))
        h = np.asarray(self.half_extents)
        ext = np.array([c * h[0] + s * h[1], s * h[0] + c * h[1], h[2]])
        return np.asarray(self.center) - ext, np.asarray(self.center) + ext


@dataclass(frozen=True)
class Plane:
    """Half-space boundary ``{x : normal·x = offset}``; positive on the side ``normal`` points to."""

    normal: tuple
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", tuple(n / np.linalg.norm(n)))

    def sdf(self, p):
        return p @ np.asarray(self.normal) - self.offset

    def bounds(self):
        return None


@dataclass(frozen=True)
class SdfScene:
    primitives: tuple
    name: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")

    def bounds(self):
        """Bounding box of the bounded primitives (planes excluded)."""
        boxes = [b for b in (p.bounds() for p in self.primitives) if b is not None]
        if not boxes:
            return np.zeros(3), np.zeros(3)
        lo = np.min([b[0] for b in boxes], axis=0)
        hi = np.max([b[1] for b in boxes], axis=0)
        return lo, hi

    @property
    def centroid(self) -> np.ndarray:
        lo, hi = self.bounds()
        return (lo + hi) / 2

    @property
    def bounding_radius(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo) / 2)


def sdf_eval(scene: SdfScene, p, truncation: float | None = None):
    """Signed distance (meters) of the min-union of the scene primitives.

    Exact for single primitives and wherever the closest primitive does not overlap
    another; a lower bound inside overlaps. With ``truncation`` the result is the
    normalized TSDF ``clip(sdf / truncation, -1, 1)``.
    """
    p = np.asarray(p, dtype=float)
    d = scene.primitives[0].sdf(p)
    for prim in scene.primitives[1:]:
        d = np.minimum(d, prim.sdf(p))
    if truncation is not None:
        d = np.clip(d / truncation, -1.0, 1.0)
    return d


def sdf_normal(scene: SdfScene, p, h: float = 1e-4):
    """Unit outward normals from central differences of the SDF."""
    p = np.asarray(p, dtype=float)
    g = np.empty(p.shape)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        g[..., a] = sdf_eval(scene, p + e) - sdf_eval(scene, p - e)
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(n, 1e-12)


@dataclass
class DepthMap:
    """Per-pixel z-depth in meters; invalid pixels hold 0."""

    values: np.ndarray
    K: Intrinsics | None = None
    pose: Pose | None = None

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0

    @property
    def shape(self):
        return self.values.shape


def sphere_trace(scene: SdfScene, origins, dirs, max_distance: float = MAX_DISTANCE):
    """March rays until ``|sdf| < HIT_EPS``; returns (ray length, hit flag)."""
    origins = np.broadcast_to(np.asarray(origins, dtype=float), dirs.shape)
    t = np.zeros(dirs.shape[:-1])
    hit = np.zeros(dirs.shape[:-1], dtype=bool)
    active = np.ones(dirs.shape[:-1], dtype=bool)
    for _ in range(MAX_STEPS):
        if not active.any():
            break
        idx = np.nonzero(active)
        d = sdf_eval(scene, origins[idx] + t[idx][..., None] * dirs[idx])
        done = np.abs(d) < HIT_EPS
        hit[idx] = done
        t[idx] = np.where(done, t[idx], t[idx] + STEP_SAFETY * d)
        escaped = t[idx] > max_distance
        active[idx] = ~done & ~escaped
    return t, hit


def _trace_view(scene: SdfScene, K: Intrinsics, pose: Pose, max_distance: float = MAX_DISTANCE):
    dirs, cos = pixel_rays(K, pose)
    t, hit = sphere_trace(scene, pose.translation, dirs, max_distance)
    return dirs, cos, t, hit & (t <= max_distance)


def raycast_depth(scene: SdfScene, K: Intrinsics, pose: Pose, max_distance: float = MAX_DISTANCE) -> DepthMap:
    """Sphere-traced z-depth map; misses and non-converged rays are invalid (0)."""
    _, cos, t, hit = _trace_view(scene, K, pose, max_distance)
    return DepthMap(np.where(hit, t * cos, 0.0), K, pose)


def orbit_trajectory(scene: SdfScene, n_views: int, radius: float, height: float, phase: float = 0.0):
    """Cameras evenly spaced in azimuth on a horizontal circle around the scene
    centroid at absolute height ``height``, each looking at the centroid."""
    if n_views < 2:
        raise ValueError("an orbit needs at least two views")
    if radius <= scene.bounding_radius:
        raise ValueError(
            f"orbit radius {radius} m is inside the scene bounding radius {scene.bounding_radius:.3f} m"
        )
    c = scene.centroid
    poses = []
    for a in phase + 2 * np.pi * np.arange(n_views) / n_views:
        eye = np.array([c[0] + radius * np.cos(a), c[1] + radius * np.sin(a), height])
        poses.append(look_at(eye, c))
    return poses


def sphere_trajectory(scene: SdfScene, n_views: int, radius: float):
    """Cameras on a Fibonacci lattice over the full sphere of directions around the
    centroid, so every side of a floating object is seen."""
    if n_views < 2:
        raise ValueError("need at least two views")
    if radius <= scene.bounding_radius:
        raise ValueError(
            f"view radius {radius} m is inside the scene bounding radius {scene.bounding_radius:.3f} m"
        )
    c = scene.centroid
    k = np.arange(n_views) + 0.5
    z = 1 - 2 * k / n_views
    r = np.sqrt(1 - z**2)
    a = np.pi * (1 + 5**0.5) * k
    dirs = np.stack([r * np.cos(a), r * np.sin(a), z], axis=1)
    return [look_at(c + radius * d, c) for d in dirs]


@dataclass(frozen=True)
class NoiseConfig:
    multiplicative_sigma: float = 0.02
    outlier_rate: float = 0.01
    outlier_scale_range: tuple = (0.7, 1.3)
    seed: int = 0

    def __post_init__(self):
        if self.multiplicative_sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0 <= self.outlier_rate <= 1:
            raise ValueError("outlier_rate must be a probability")


def perturb_depth(d: DepthMap, cfg: NoiseConfig) -> DepthMap:
    """Multiplicative Gaussian noise plus sparse multiplicative outliers on valid pixels."""
    rng = np.random.default_rng(cfg.seed)
    shape = d.values.shape
    scale = rng.normal(1.0, cfg.multiplicative_sigma, size=shape) if cfg.multiplicative_sigma > 0 else np.ones(shape)
    if cfg.outlier_rate > 0:
        lo, hi = cfg.outlier_scale_range
        mask = rng.random(shape) < cfg.outlier_rate
        scale = np.where(mask, scale * rng.uniform(lo, hi, size=shape), scale)
    out = np.where(d.valid, d.values * scale, 0.0)
    # a heavy negative noise draw must not turn a valid pixel into the sentinel
    out = np.where(d.valid, np.maximum(out, 1e-6), 0.0)
    return DepthMap(out, d.K, d.pose)


def sample_ground_truth(scene: SdfScene, region: GridSpec, truncation: float):
    """Supervision set: the region's node centers and their exact normalized TSDF."""
    if not truncation > 0:
        raise ValueError("truncation must be positive")
    x = region.centers()
    return x, sdf_eval(scene, x, truncation)


LIGHT_DIR = np.array([0.3, 0.5, 0.81])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
N_IMAGE_CHANNELS = 3


def render_inputs(scene: SdfScene, K: Intrinsics, pose: Pose, seed: int = 0, noise_std: float = 0.05):
    """Synthetic stand-in for an RGB frame, shape (3, H, W): Lambertian shading
    from SDF normals, a hit/miss silhouette mask and a seeded pixel-noise channel."""
    return _shade(scene, pose, _trace_view(scene, K, pose), seed, noise_std)


def capture_view(scene: SdfScene, K: Intrinsics, pose: Pose, seed: int = 0, noise_std: float = 0.05):
    """``(raycast_depth(...), render_inputs(...))`` from a single sphere trace."""
    tr = _trace_view(scene, K, pose)
    _, cos, t, hit = tr
    return DepthMap(np.where(hit, t * cos, 0.0), K, pose), _shade(scene, pose, tr, seed, noise_std)


def _shade(scene, pose, trace, seed, noise_std):
    dirs, _, t, hit = trace
    pts = pose.translation + t[..., None] * dirs
    shade = np.zeros(hit.shape)
    if hit.any():
        n = sdf_normal(scene, pts[hit])
        shade[hit] = 0.2 + 0.8 * np.clip(n @ LIGHT_DIR, 0.0, 1.0)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_std, size=hit.shape)
    return np.stack([shade, hit.astype(float), noise]).astype(float)


# ---------------------------------------------------------------- presets


def preset_scene(name: str, seed: int = 0) -> SdfScene:
    """Named benchmark scenes. ``seed`` only affects the randomized presets."""
    rng = np.random.default_rng(seed)
    floor = Plane((0.0, 0.0, 1.0), 0.0)
    if name == "sphere":
        return SdfScene((Sphere((0.0, 0.0, 0.5), 0.5),), "sphere")
    if name == "box_corner":
        boxes = []
        for _ in range(3):
            hx, hy, hz = rng.uniform(0.08, 0.22, size=3)
            boxes.append((hx, hy, hz))
        prims = [floor]
        slots = [(-0.3, -0.25), (0.3, -0.2), (0.0, 0.3)]
        for (x, y), (hx, hy, hz) in zip(slots, boxes):
            jitter = rng.uniform(-0.05, 0.05, size=2)
            prims.append(Box((x + jitter[0], y + jitter[1], hz), (hx, hy, hz), float(rng.uniform(-np.pi, np.pi))))
        return SdfScene(tuple(prims), f"box_corner_{seed}")
    if name == "room":
        # furnished floor area about 2.4 m across and 2.4 m high: table on four legs,
        # a tall shelf, two stools, a ball and a pendant lamp; mostly free space
        prims = [floor]
        tx, ty = rng.uniform(-0.2, 0.2, size=2)
        top_h = 0.72
        prims.append(Box((tx, ty, top_h), (0.45, 0.3, 0.02), 0.0))
        for sx in (-1, 1):
            for sy in (-1, 1):
                prims.append(Box((tx + sx * 0.4, ty + sy * 0.25, top_h / 2), (0.025, 0.025, top_h / 2 - 0.01)))
        prims.append(Box((-1.0, rng.uniform(-0.6, 0.6), 0.9), (0.15, 0.4, 0.9), 0.0))
        for x, y in ((0.8, -0.8), (0.8, 0.7)):
            prims.append(Box((x, y, 0.22), (0.15, 0.15, 0.22), float(rng.uniform(0, np.pi))))
        prims.append(Sphere((rng.uniform(-0.3, 0.3), -1.0, 0.15), 0.15))
        prims.append(Sphere((tx, ty, 2.3), 0.1))
        return SdfScene(tuple(prims), f"room_{seed}")
    if name == "thin":
        prims = [floor]
        for i in range(4):
            x, y = rng.uniform(-0.45, 0.45, size=2)
            h = rng.uniform(0.25, 0.5)
            prims.append(Box((x, y, h / 2), (0.02, 0.02, h / 2), float(rng.uniform(0, np.pi))))
        prims.append(Box((0.0, 0.0, 0.3), (0.3, 0.015, 0.15), float(rng.uniform(0, np.pi))))
        return SdfScene(tuple(prims), f"thin_{seed}")
    raise ValueError(f"unknown scene preset {name!r}")


PRESETS = ("sphere", "box_corner", "room", "thin")


# ---------------------------------------------------------------- text format


def _vec(text: str) -> tuple:
    return tuple(float(v) for v in text.split())


def _fmt(v) -> str:
    if np.ndim(v) == 0:
        return repr(float(v))
    return " ".join(repr(float(x)) for x in v)


def scene_to_text(scene: SdfScene) -> str:
    cp = configparser.ConfigParser()
    cp["scene"] = {"name": scene.name, "primitives": str(len(scene.primitives))}
    for i, prim in enumerate(scene.primitives):
        if isinstance(prim, Sphere):
            sec = {"kind": "sphere", "center": _fmt(prim.center), "radius": _fmt(prim.radius)}
        elif isinstance(prim, Box):
            sec = {
                "kind": "box",
                "center": _fmt(prim.center),
                "half_extents": _fmt(prim.half_extents),
                "yaw": _fmt(prim.yaw),
            }
        else:
            sec = {"kind": "plane", "normal": _fmt(prim.normal), "offset": _fmt(prim.offset)}
        cp[f"primitive.{i}"] = sec
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def scene_from_text(text: str) -> SdfScene:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    n = cp.getint("scene", "primitives")
    prims = []
    for i in range(n):
        sec = cp[f"primitive.{i}"]
        kind = sec["kind"]
        if kind == "sphere":
            prims.append(Sphere(_vec(sec["center"]), float(sec["radius"])))
        elif kind == "box":
            prims.append(Box(_vec(sec["center"]), _vec(sec["half_extents"]), float(sec.get("yaw", "0"))))
        elif kind == "plane":
            prims.append(Plane(_vec(sec["normal"]), float(sec["offset"])))
        else:
            raise ValueError(f"primitive.{i}: unknown kind {kind!r}")
    return SdfScene(tuple(prims), cp.get("scene", "name", fallback="scene"))
