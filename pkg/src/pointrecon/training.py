"""Training: per-scene input bundles, chunk sampling with rotation and depth-scale
augmentation, the three supervision modes and the Adam loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import backprojection as bp
from . import model as M
from .autodiff.optim import AdamState, adam_step
from .autodiff.tensor import Tape, Tensor
from .backprojection import GuidanceStrategy
from .geometry import GridSpec, Intrinsics, Pose, project_points, rotation_about, trilinear_sample
from .scene import (
    DepthMap,
    NoiseConfig,
    SdfScene,
    orbit_trajectory,
    perturb_depth,
    capture_view,
    sample_ground_truth,
    sdf_eval,
    sphere_trajectory,
)
from .tsdf import fuse_depths

log = logging.getLogger(__name__)

SUPERVISION_MODES = ("rts", "interpolated", "analytic")


@dataclass(frozen=True)
class CaptureConfig:
    """How a synthetic scene is observed."""

    n_views: int = 24
    width: int = 128
    height: int = 96
    focal: float = 100.0
    radius: float = 1.6
    height_m: float = 1.1
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    gt_voxel: float = 0.04
    margin: float = 0.2
    trajectory: str = "orbit"  # "orbit" (horizontal circle) or "sphere" (all directions)

    def __post_init__(self):
        if self.trajectory not in ("orbit", "sphere"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.width / 2 - 0.5, self.height / 2 - 0.5, self.width, self.height)


def preset_capture(preset: str) -> CaptureConfig:
    """Default capture per scene preset: all-around views of the floating sphere,
    a wider and higher orbit for the room, the standard orbit otherwise."""
    if preset == "sphere":
        return CaptureConfig(trajectory="sphere")
    if preset == "room":
        return CaptureConfig(radius=2.6, height_m=1.8)
    return CaptureConfig()


@dataclass
class SceneData:
    """Everything the model and the supervision need about one synthetic scene."""

    scene: SdfScene
    cameras: list  # [(Intrinsics, Pose)]
    images: np.ndarray  # (V, 3, H, W)
    gt_depths: list  # [DepthMap]
    depths: list  # noisy [DepthMap]
    gt_spec: GridSpec  # grid of points X where the ground truth is stored
    gt_values: np.ndarray  # normalized TSDF on gt_spec (shape dims)
    truncation: float

    @property
    def region(self) -> GridSpec:
        return self.gt_spec

    @property
    def gt_points(self) -> np.ndarray:
        return self.gt_spec.centers()


def scene_region(scene: SdfScene, voxel: float, margin: float) -> GridSpec:
    lo, hi = scene.bounds()
    lo = np.minimum(lo, [lo[0], lo[1], 0.0]) - margin
    hi = hi + margin
    # snap the origin to the voxel lattice so X = {(i, j, k) * delta}
    lo = np.floor(lo / voxel) * voxel
    return GridSpec.covering(lo, hi, voxel)


def build_scene_data(scene: SdfScene, capture: CaptureConfig | None = None, seed: int = 0,
                     truncation: float | None = None) -> SceneData:
    capture = capture or CaptureConfig()
    tau = 3 * capture.gt_voxel if truncation is None else truncation
    K = capture.intrinsics()
    if capture.trajectory == "sphere":
        poses = sphere_trajectory(scene, capture.n_views, capture.radius)
    else:
        poses = orbit_trajectory(scene, capture.n_views, capture.radius, capture.height_m, phase=0.1 * seed)
    cameras = [(K, P) for P in poses]
    views = [capture_view(scene, K, P, seed=10_000 * (seed + 1) + i) for i, P in enumerate(poses)]
    gt_depths = [v[0] for v in views]
    depths = [
        perturb_depth(d, replace(capture.noise, seed=capture.noise.seed + 1000 * seed + i))
        for i, d in enumerate(gt_depths)
    ]
    images = np.stack([v[1] for v in views])
    region = scene_region(scene, capture.gt_voxel, capture.margin)
    _, values = sample_ground_truth(scene, region, tau)
    return SceneData(scene, cameras, images, gt_depths, depths, region, values.reshape(region.dims), tau)


@dataclass(frozen=True)
class TrainConfig:
    supervision_mode: str = "rts"
    enable_dg: bool = True
    enable_pb: bool = True
    strategy: GuidanceStrategy = field(default_factory=lambda: GuidanceStrategy("tsdf"))
    chunk_dims: tuple = (64, 64, 32)
    points_per_step: int = 4096
    views_per_step: int = 8
    rotation_aug: bool = True
    depth_scale_aug: bool = True
    epochs: int = 1
    steps_per_epoch: int = 100
    lr: float = 1e-3
    seed: int = 0
    voxel_size: float = 0.04

    def __post_init__(self):
        if self.supervision_mode not in SUPERVISION_MODES:
            raise ValueError(f"supervision_mode must be one of {SUPERVISION_MODES}")
        if min(self.chunk_dims) < 1 or self.points_per_step < 1 or self.views_per_step < 1:
            raise ValueError("chunk dims, points per step and views per step must be positive")

    @property
    def guidance(self) -> GuidanceStrategy:
        """Effective strategy: depth guidance off means image features only."""
        return self.strategy if self.enable_dg else GuidanceStrategy("none", self.strategy.sigma)

    @property
    def truncation(self) -> float:
        return 3 * self.voxel_size

    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig(strategy=self.guidance)


@dataclass
class Batch:
    """One prepared training step: inputs in the (rotated) model frame plus targets."""

    spec: GridSpec
    cameras: list
    images: np.ndarray
    dense: bp.DenseOperator
    points: np.ndarray  # model frame
    points_world: np.ndarray
    targets: np.ndarray
    occupancy: np.ndarray  # dims


def random_rotation(rng: np.random.Generator) -> tuple:
    """(tilt about x, yaw about z) in radians: ±3° and ±180°."""
    return float(rng.uniform(-np.radians(3), np.radians(3))), float(rng.uniform(-np.pi, np.pi))


def frame_rotation(tilt: float, yaw: float) -> np.ndarray:
    """Model-from-world rotation for the augmentation angles."""
    return rotation_about((1.0, 0.0, 0.0), tilt) @ rotation_about((0.0, 0.0, 1.0), yaw)


def analytic_occupancy(scene: SdfScene, spec: GridSpec, world_from_model: np.ndarray, tau: float) -> np.ndarray:
    centers = spec.centers() @ world_from_model.T
    core = (np.abs(sdf_eval(scene, centers, tau)) < 1.0).reshape(spec.dims)
    return ndimage.binary_dilation(core, structure=np.ones((3, 3, 3), dtype=bool), border_value=0)


def prepare_batch(data: SceneData, cfg: TrainConfig, rng: np.random.Generator,
                  rotation: tuple | None = None, center=None) -> Batch | None:
    """Sample a chunk and build all inputs and targets for one step.

    ``rotation`` = (tilt, yaw) and ``center`` (world) override the random draws.
    Returns None when the chunk holds no supervision points.
    """
    if rotation is None:
        rotation = random_rotation(rng) if cfg.rotation_aug else (0.0, 0.0)
    R = frame_rotation(*rotation)
    frame = Pose(R, np.zeros(3))
    if center is None:
        lo, hi = data.gt_spec.lower, data.gt_spec.upper
        center = rng.uniform(lo, hi)
    dims = np.asarray(cfg.chunk_dims)
    vs = cfg.voxel_size
    c_model = R @ np.asarray(center, dtype=float)
    spec = GridSpec(tuple(c_model - vs * (dims - 1) / 2), vs, tuple(dims))
    tau = cfg.truncation

    # views that see the chunk center
    cams_all = [(K, frame.compose(P)) for K, P in data.cameras]
    seen = []
    for i, (K, P) in enumerate(cams_all):
        _, _, ok = project_points(c_model[None], K, P)
        if ok[0]:
            seen.append(i)
    if not seen:
        seen = list(range(len(cams_all)))
    n = min(cfg.views_per_step, len(seen))
    views = sorted(rng.choice(seen, size=n, replace=False).tolist())
    cameras = [cams_all[i] for i in views]
    depths = []
    for i in views:
        d = data.depths[i].values
        if cfg.depth_scale_aug:
            d = d * rng.uniform(0.9, 1.1)
        depths.append(DepthMap(d))

    strategy = cfg.guidance
    vol = fuse_depths(depths, cameras, spec, tau) if strategy.needs_volume else None
    K0 = cameras[0][0]
    coarse_hw = (K0.height // M.COARSE_STRIDE, K0.width // M.COARSE_STRIDE)
    dense = bp.dense_operator(cameras, coarse_hw, M.COARSE_STRIDE, spec, strategy, vol,
                              depths if strategy.needs_depths else None)

    inside_lo, inside_hi = spec.lower, spec.upper
    mode = cfg.supervision_mode
    if mode == "rts":
        xw = data.gt_points
        xm = xw @ R.T
        keep = np.all((xm >= inside_lo) & (xm <= inside_hi), axis=1)
        pw, pm, tgt = xw[keep], xm[keep], data.gt_values.reshape(-1)[keep]
    elif mode == "interpolated":
        pm = spec.centers()
        pw = pm @ R
        keep = data.gt_spec.contains(pw)
        pm, pw = pm[keep], pw[keep]
        tgt, _ = trilinear_sample(data.gt_spec, data.gt_values, pw)
    else:
        count = max(int(np.prod(dims)), 1)
        pm = rng.uniform(inside_lo, inside_hi, size=(count, 3))
        pw = pm @ R
        tgt = sdf_eval(data.scene, pw, tau)
    if len(pm) == 0:
        return None
    if len(pm) > cfg.points_per_step:
        sel = np.sort(rng.choice(len(pm), size=cfg.points_per_step, replace=False))
        pm, pw, tgt = pm[sel], pw[sel], tgt[sel]

    occ = analytic_occupancy(data.scene, spec, R.T, tau)
    images = data.images[views]
    return Batch(spec, cameras, images, dense, pm, pw, np.asarray(tgt, dtype=float), occ)


def batch_loss(params: M.ModelParams, batch: Batch, enable_pb: bool):
    """Differentiable forward for one batch; returns (L, L_S, L_O) tensors."""
    images = Tensor(batch.images)
    vg = M.guided_volume(params, images, batch.dense)
    vpsi, logits = M.encode(params, vg, batch.spec.dims)
    tri, _ = M.trilinear_operator(batch.spec, batch.points)
    w = None
    if enable_pb:
        K0 = batch.cameras[0][0]
        ff = M.feature_net(params.nets["omega_f"], images, M.FINE_STRIDE)
        fine_hw = (K0.height // M.FINE_STRIDE, K0.width // M.FINE_STRIDE)
        op, _ = bp.point_operator(batch.points, batch.cameras, fine_hw, M.FINE_STRIDE)
        w = M.point_features(params, M.stacked(ff), op)
    s_hat = M.tsdf_head(params, vpsi, tri, w)
    return M.loss_terms(s_hat, batch.targets, logits, batch.occupancy.reshape(-1))


def optimize(params: M.ModelParams, state: AdamState, batch: Batch, enable_pb: bool):
    params.zero_grad()
    with Tape() as tape:
        total, l_s, l_o = batch_loss(params, batch, enable_pb)
    tape.backward(total)
    named = params.named()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in named.items()}
    adam_step(named, grads, state)
    return float(total.data), float(l_s.data), float(l_o.data)


def train_step(params: M.ModelParams, state: AdamState, data: SceneData, cfg: TrainConfig,
               rng: np.random.Generator, rotation=None, center=None):
    """Sample, forward, backward, update. Returns a stats dict (None if skipped)."""
    batch = prepare_batch(data, cfg, rng, rotation, center)
    if batch is None:
        return None
    total, l_s, l_o = optimize(params, state, batch, cfg.enable_pb)
    return {"L": total, "L_S": l_s, "L_O": l_o, "points": len(batch.points), "batch": batch}


def train_epoch(scenes, params: M.ModelParams, state: AdamState, cfg: TrainConfig, epoch: int = 0,
                log_file=None):
    """Run ``cfg.steps_per_epoch`` steps over randomly chosen scenes.

    Writes one JSON line per step to ``log_file`` when given. Returns epoch statistics.
    """
    rng = np.random.default_rng([cfg.seed, epoch])
    stats = {"L": [], "L_S": [], "L_O": [], "skipped": 0}
    t0 = time.perf_counter()
    for step in range(cfg.steps_per_epoch):
        data = scenes[int(rng.integers(len(scenes)))]
        out = train_step(params, state, data, cfg, rng)
        if out is None:
            stats["skipped"] += 1
            log.info("skipped chunk with no supervision points (total %d)", stats["skipped"])
            continue
        for k in ("L", "L_S", "L_O"):
            stats[k].append(out[k])
        if log_file is not None:
            rec = {"epoch": epoch, "step": state.step, "L": out["L"], "L_S": out["L_S"], "L_O": out["L_O"],
                   "wall": round(time.perf_counter() - t0, 4)}
            log_file.write(json.dumps(rec) + "\n")
    summary = {k: float(np.mean(v)) if v else float("nan") for k, v in stats.items() if k != "skipped"}
    summary["skipped"] = stats["skipped"]
    summary["steps"] = cfg.steps_per_epoch
    summary["wall"] = time.perf_counter() - t0
    return summary


def train(scenes, cfg: TrainConfig, params: M.ModelParams | None = None, log_file=None):
    """Initialize (unless given) and train for ``cfg.epochs`` epochs."""
    params = params or M.init_model(cfg.model_config(), seed=cfg.seed)
    state = AdamState(lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        history.append(train_epoch(scenes, params, state, cfg, epoch, log_file))
    return params, state, history
