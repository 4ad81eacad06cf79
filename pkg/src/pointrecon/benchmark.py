"""Desk-scale benchmark: train variants on synthetic scenes and score their meshes."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import model as M
from .backprojection import GuidanceStrategy
from .evaluation import Metrics3D, metrics_3d, visibility_volume
from .geometry import GridSpec
from .meshio import TriangleMesh
from .reconstruct import ReconstructionRequest, marching_cubes, prepare_inference, reconstruct_grid
from .scene import SdfScene, preset_scene, sdf_eval
from .training import CaptureConfig, SceneData, preset_capture, TrainConfig, build_scene_data, scene_region, train
from .tsdf import TsdfVolume

log = logging.getLogger(__name__)

GT_MESH_VOXEL = 0.01

# Ablation variants: (label, supervision, DG, PB, guidance)
ABLATION_MAIN = (
    ("i", "interpolated", False, False, "tsdf"),
    ("ii", "rts", False, False, "tsdf"),
    ("iii", "rts", False, True, "tsdf"),
    ("iv", "rts", True, False, "tsdf"),
    ("v", "rts", True, True, "tsdf"),
)
ABLATION_GUIDANCE = (
    ("a", "tsdf"),
    ("b", "density"),
    ("c", "gaussian_weight"),
    ("d", "tsdf_plus_gaussian"),
    ("e", "none"),
    ("f", "depth_only"),
)


@dataclass
class SceneSet:
    preset: str
    train_seeds: tuple
    test_seeds: tuple
    capture: CaptureConfig | None = None  # None: the preset's default capture

    def build(self):
        capture = self.capture or preset_capture(self.preset)
        train_data = [build_scene_data(preset_scene(self.preset, s), capture, seed=s) for s in self.train_seeds]
        test_data = [build_scene_data(preset_scene(self.preset, s), capture, seed=s) for s in self.test_seeds]
        return train_data, test_data


def analytic_volume(scene: SdfScene, spec: GridSpec, truncation: float) -> TsdfVolume:
    vals = sdf_eval(scene, spec.centers(), truncation).reshape(spec.dims)
    return TsdfVolume(spec, vals, np.ones(spec.dims), truncation)


def ground_truth_mesh(scene: SdfScene, margin: float = 0.2, voxel: float = GT_MESH_VOXEL) -> TriangleMesh:
    return _gt_mesh_cached(scene, margin, voxel)


@lru_cache(maxsize=32)
def _gt_mesh_cached(scene, margin, voxel):
    spec = scene_region(scene, voxel, margin)
    return marching_cubes(analytic_volume(scene, spec, 3 * voxel))


def model_grid(data: SceneData, voxel: float = 0.04) -> GridSpec:
    lo, hi = data.gt_spec.lower, data.gt_spec.upper
    return GridSpec.covering(lo, hi, voxel)


def evaluate_model(params: M.ModelParams, data: SceneData, strategy: GuidanceStrategy, enable_pb: bool,
                   spacing: float = 0.04, occupancy_filter: bool = False):
    """Reconstruct one scene and score it. Returns (Metrics3D, mesh, info dict)."""
    spec = model_grid(data, params_voxel(params))
    ctx = prepare_inference(params, data.images, data.cameras, data.depths, spec, strategy, enable_pb,
                            data.truncation)
    vol, stats = reconstruct_grid(ctx, ReconstructionRequest(spacing, occupancy_filter, 0.5, enable_pb))
    mesh = marching_cubes(vol)
    gt = ground_truth_mesh(data.scene)
    vis = visibility_volume(data.gt_depths, data.cameras, data.gt_spec, data.truncation)
    info = {"timings": ctx.timings, **stats}
    if mesh.is_empty:
        return Metrics3D(float("inf"), float("inf"), float("inf"), 0.0, 0.0, 0.0), mesh, info
    return metrics_3d(mesh, gt, vis), mesh, info


def params_voxel(params: M.ModelParams) -> float:
    return 0.04


def mean_metrics(ms) -> dict:
    ms = list(ms)
    keys = ("acc", "comp", "chamfer", "prec", "rec", "f1")
    return {k: float(np.mean([getattr(m, k) for m in ms])) for k in keys}


def default_train_config(**kw) -> TrainConfig:
    base = TrainConfig(chunk_dims=(24, 24, 16), points_per_step=4096, views_per_step=6, epochs=1,
                       steps_per_epoch=200, lr=2e-3)
    return replace(base, **kw)


def run_variant(train_data, test_data, cfg: TrainConfig, spacing: float = 0.04):
    t0 = time.perf_counter()
    params, _, history = train(train_data, cfg)
    t1 = time.perf_counter()
    metrics = [evaluate_model(params, d, cfg.guidance, cfg.enable_pb, spacing)[0] for d in test_data]
    out = mean_metrics(metrics)
    out.update({"train_time": t1 - t0, "eval_time": time.perf_counter() - t1,
                "final_loss": history[-1]["L"] if history else float("nan")})
    return params, out
