"""Querying a trained model on output grids of any spacing, occupancy-gated, and
polygonizing TSDF volumes."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from . import backprojection as bp
from . import model as M
from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .backprojection import FeatureVolume, GuidanceStrategy
from .geometry import GridSpec
from .meshio import TriangleMesh, weld
from .tsdf import TsdfVolume, fuse_depths

EVAL_BATCH = 4096


@dataclass(frozen=True)
class ReconstructionRequest:
    spacing: float = 0.04
    occupancy_filter: bool = True
    occupancy_threshold: float = 0.5
    enable_pb: bool = True

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("output spacing must be positive")
        if not 0 < self.occupancy_threshold < 1:
            raise ValueError("occupancy threshold is a probability in (0, 1)")


@dataclass
class InferenceContext:
    """Per-scene model state that does not depend on the output spacing."""

    params: M.ModelParams
    spec: GridSpec
    cameras: list
    fine: np.ndarray | None  # stacked fine features (V*Hf*Wf, C_f)
    fine_hw: tuple
    vpsi: np.ndarray  # (N_voxels, C_psi)
    logits: np.ndarray  # dims
    timings: dict = field(default_factory=dict)

    @property
    def occupancy_probability(self) -> np.ndarray:
        return 0.5 * (1.0 + np.tanh(0.5 * self.logits))

    def feature_volume(self) -> FeatureVolume:
        return FeatureVolume(self.spec, self.vpsi.reshape(self.spec.dims + (-1,)), np.zeros(self.spec.dims))


def prepare_inference(params: M.ModelParams, images, cameras, depths, spec: GridSpec,
                      strategy: GuidanceStrategy, enable_pb: bool = True,
                      truncation: float | None = None) -> InferenceContext:
    """Per-frame work (features, fusion, back-projection) then the one-time 3D network pass."""
    tau = 3 * spec.voxel_size if truncation is None else truncation
    images = np.asarray(images, dtype=float)
    K0 = cameras[0][0]
    n_frames = len(cameras)
    t0 = time.perf_counter()
    with T.no_grad():
        x = Tensor(images)
        vol = fuse_depths(depths, cameras, spec, tau) if strategy.needs_volume else None
        coarse_hw = (K0.height // M.COARSE_STRIDE, K0.width // M.COARSE_STRIDE)
        op = bp.dense_operator(cameras, coarse_hw, M.COARSE_STRIDE, spec, strategy, vol,
                               depths if strategy.needs_depths else None)
        vg = M.guided_volume(params, x, op)
        fine = None
        fine_hw = (K0.height // M.FINE_STRIDE, K0.width // M.FINE_STRIDE)
        if enable_pb:
            fine = M.stacked(M.feature_net(params.nets["omega_f"], x, M.FINE_STRIDE)).data
        t1 = time.perf_counter()
        vpsi, logits = M.encode(params, vg, spec.dims)
        t2 = time.perf_counter()
    timings = {"per_frame": (t1 - t0) / n_frames, "frames": n_frames, "volume_network": t2 - t1}
    return InferenceContext(params, spec, list(cameras), fine, fine_hw, vpsi.data,
                            logits.data.reshape(spec.dims), timings)


def output_grid(model_spec: GridSpec, spacing: float) -> GridSpec:
    """Output grid sharing the model origin, covering the model voxel centers."""
    if spacing > model_spec.voxel_size + 1e-12:
        raise ValueError(
            f"output spacing {spacing} m exceeds the model voxel size {model_spec.voxel_size} m; "
            "only upsampling is supported"
        )
    ext = (np.asarray(model_spec.dims) - 1) * model_spec.voxel_size
    dims = np.floor(ext / spacing + 1e-9).astype(int) + 1
    return GridSpec(model_spec.origin, spacing, tuple(dims))


def evaluate_points(ctx: InferenceContext, points: np.ndarray, enable_pb: bool) -> np.ndarray:
    """Ŝ at points, in fixed-size padded batches so a point's value never depends
    on which other points share its batch."""
    out = np.empty(len(points))
    for start in range(0, len(points), EVAL_BATCH):
        chunk = points[start : start + EVAL_BATCH]
        n = len(chunk)
        if n < EVAL_BATCH:
            chunk = np.concatenate([chunk, np.repeat(chunk[:1], EVAL_BATCH - n, axis=0)])
        tri, _ = M.trilinear_operator(ctx.spec, chunk)
        with T.no_grad():
            w = None
            if enable_pb:
                if ctx.fine is None:
                    raise ValueError("context was prepared without fine features; cannot enable PB")
                op, _ = bp.point_operator(chunk, ctx.cameras, ctx.fine_hw, M.FINE_STRIDE)
                w = Tensor(np.asarray(op @ ctx.fine))
            s = M.tsdf_head(ctx.params, Tensor(ctx.vpsi), tri, w).data[:, 0]
        out[start : start + n] = s[:n]
    return out


def reconstruct_grid(ctx: InferenceContext, req: ReconstructionRequest):
    """Sample Ŝ on an output grid of spacing ``req.spacing``.

    With occupancy filtering, cells whose enclosing model voxel is predicted
    unoccupied get +1 (weight 0) without running the TSDF head. Returns the
    volume and a stats dict with the number of head evaluations and timing.
    """
    t0 = time.perf_counter()
    out_spec = output_grid(ctx.spec, req.spacing)
    pts = out_spec.centers()
    vox = np.floor(ctx.spec.to_index(pts) + 0.5).astype(np.int64)
    vox = np.clip(vox, 0, np.asarray(ctx.spec.dims) - 1)
    if req.occupancy_filter:
        occupied = ctx.occupancy_probability >= req.occupancy_threshold
        active = occupied[vox[:, 0], vox[:, 1], vox[:, 2]]
    else:
        active = np.ones(len(pts), dtype=bool)
    values = np.ones(len(pts))
    weights = np.zeros(len(pts))
    if active.any():
        s = evaluate_points(ctx, pts[active], req.enable_pb)
        values[active] = np.clip(s, -1.0, 1.0)
        weights[active] = 1.0
    vol = TsdfVolume(out_spec, values.reshape(out_spec.dims), weights.reshape(out_spec.dims),
                     3 * ctx.spec.voxel_size)
    stats = {
        "evaluations": int(active.sum()),
        "cells": len(pts),
        "extraction_time": time.perf_counter() - t0,
    }
    return vol, stats


def marching_cubes(volume: TsdfVolume, iso: float = 0.0, block_unobserved: bool = False) -> TriangleMesh:
    """Iso-surface in world meters (linear edge interpolation, welded, no degenerate faces).

    Unobserved (+1, weight 0) voxels take part as ordinary +1 samples unless
    ``block_unobserved`` is set, in which case cells touching them are skipped.
    """
    v = np.asarray(volume.values, dtype=float)
    if min(v.shape) < 2 or not v.min() <= iso <= v.max() or v.min() == v.max():
        return TriangleMesh.empty()
    mask = None
    if block_unobserved:
        # skimage tests one flag per cell, stored at the cell's far corner
        obs = np.asarray(volume.weights) > 0
        cell = obs[:-1, :-1, :-1].copy()
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    cell &= obs[dx : dx + cell.shape[0], dy : dy + cell.shape[1], dz : dz + cell.shape[2]]
        mask = np.zeros_like(obs)
        mask[1:, 1:, 1:] = cell
    try:
        verts, faces, normals, _ = measure.marching_cubes(
            v, level=iso, spacing=(volume.spec.voxel_size,) * 3, allow_degenerate=False, mask=mask
        )
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()
    mesh = TriangleMesh(verts.astype(float) + np.asarray(volume.spec.origin), faces)
    return weld(mesh, 1e-7)
