"""Numbered acceptance criteria. Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line.

Criteria 4 to 8 train desk-scale models on synthetic scene sets. Trained models and
their test-set scores are cached for the session, so a model shared by several
criteria is trained once. A criterion's runtime is charged with the scene building,
training and scoring of every model it uses, whether or not the cache already held it.
"""

import time
from dataclasses import dataclass

import numpy as np
import pytest

from _cases import layer_case, micro_batch
from _gradcheck import check
from pointrecon import benchmark as B
from pointrecon import model as M
from pointrecon.autodiff import Tensor
from pointrecon.autodiff import tensor as T
from pointrecon.autodiff.layers import KINDS, forward
from pointrecon.backprojection import GuidanceStrategy, border_weight
from pointrecon.evaluation import VisibilityVolume, metrics_2d, metrics_3d, visibility_volume
from pointrecon.geometry import GridSpec, Intrinsics, look_at
from pointrecon.meshio import TriangleMesh
from pointrecon.reconstruct import ReconstructionRequest, marching_cubes, prepare_inference, reconstruct_grid
from pointrecon.scene import DepthMap, SdfScene, Sphere, preset_scene, raycast_depth, sdf_eval, sphere_trajectory
from pointrecon.training import batch_loss, build_scene_data, preset_capture, train
from pointrecon.tsdf import TsdfVolume, fuse_depths, occupancy_ground_truth, tsdf_point_oracle

TRAIN_SEEDS = (1, 2, 3, 4, 5, 6)
TEST_SEEDS = (100, 101, 102)
STEPS = 300


def report(log, n, ok, message, seconds=None):
    tail = "" if seconds is None else f", {seconds:.1f} s"
    line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'} {message}{tail}"
    log.append(line)
    print("\n" + line)


def rel_change(a, b):
    return abs(a - b) / abs(b)


# ---------------------------------------------------------------- session model cache


@dataclass
class Variant:
    params: object
    cfg: object
    scores: dict  # mean test-set metrics at 4 cm output spacing
    seconds: float  # training plus scoring


class Bench:
    def __init__(self):
        self.sets = {}
        self.build_seconds = {}
        self.variants = {}

    def scenes(self, preset):
        if preset not in self.sets:
            t0 = time.perf_counter()
            self.sets[preset] = B.SceneSet(preset, TRAIN_SEEDS, TEST_SEEDS).build()
            self.build_seconds[preset] = time.perf_counter() - t0
        return self.sets[preset]

    def variant(self, preset, supervision="rts", dg=True, pb=False, strategy="tsdf") -> Variant:
        key = (preset, supervision, dg, pb, strategy)
        if key not in self.variants:
            train_data, test_data = self.scenes(preset)
            cfg = B.default_train_config(supervision_mode=supervision, enable_dg=dg, enable_pb=pb,
                                         strategy=GuidanceStrategy(strategy), steps_per_epoch=STEPS, seed=0)
            t0 = time.perf_counter()
            params, _, _ = train(train_data, cfg)
            scores = B.mean_metrics(B.evaluate_model(params, d, cfg.guidance, pb)[0] for d in test_data)
            self.variants[key] = Variant(params, cfg, scores, time.perf_counter() - t0)
        return self.variants[key]

    def cost(self, preset, *variants):
        return self.build_seconds[preset] + sum(v.seconds for v in variants)


@pytest.fixture(scope="session")
def bench():
    return Bench()


def chamfer_text(x):
    return "empty mesh" if not np.isfinite(x) else f"{x:.3f} cm"


# ---------------------------------------------------------------- 1


def test_01_fusion_matches_oracle(acceptance_log):
    t0 = time.perf_counter()
    K = Intrinsics(50.0, 50.0, 15.5, 11.5, 32, 24)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        spec = GridSpec(tuple(rng.uniform(-0.3, 0.0, size=3)), 0.08, (8, 8, 8))
        center = spec.lower + 0.5 * (spec.upper - spec.lower)
        depths, cams = [], []
        for _ in range(3):
            d = rng.normal(size=3)
            cams.append((K, look_at(center + 1.2 * d / np.linalg.norm(d), center + rng.normal(scale=0.05, size=3))))
            depth = rng.uniform(0.9, 1.5, size=(K.height, K.width))
            depth[rng.random(depth.shape) < 0.1] = 0
            depths.append(DepthMap(depth))
        vol = fuse_depths(depths, cams, spec, 0.12)
        oracle = np.array([tsdf_point_oracle(p, depths, cams, 0.12)[0] for p in spec.centers()])
        worst = max(worst, float(np.max(np.abs(vol.values.ravel() - oracle))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10
    report(acceptance_log, 1, ok, f"max |fused - oracle| = {worst:.1e} over 20 scenes", elapsed)
    assert ok


# ---------------------------------------------------------------- 2


def test_02_sphere_fusion_fidelity(acceptance_log):
    t0 = time.perf_counter()
    scene = SdfScene((Sphere((0.0, 0.0, 0.5), 0.5),))
    capture = preset_capture("sphere")
    K = capture.intrinsics()
    cams = [(K, p) for p in sphere_trajectory(scene, 24, capture.radius)]
    depths = [raycast_depth(scene, K, p) for _, p in cams]
    voxel = 0.02
    tau = 3 * voxel
    spec = GridSpec.covering((-0.6, -0.6, -0.1), (0.6, 0.6, 1.1), voxel)
    vol = fuse_depths(depths, cams, spec, tau)
    exact = sdf_eval(scene, spec.centers(), tau).reshape(spec.dims)
    band = (np.abs(exact) < 1) & vol.observed
    mae = float(np.mean(np.abs(vol.values[band] - exact[band])))
    mesh = marching_cubes(vol, block_unobserved=True)
    dist = float(np.max(np.abs(sdf_eval(scene, mesh.vertices))))
    euler = mesh.euler_characteristic()
    elapsed = time.perf_counter() - t0
    ok = mae < 0.2 and dist <= 0.01 and euler == 2 and elapsed < 30
    report(acceptance_log, 2, ok, f"band MAE {mae:.4f} tau, max vertex distance {100 * dist:.3f} cm, Euler {euler}", elapsed)
    assert ok


# ---------------------------------------------------------------- 3


def test_03_gradients(acceptance_log):
    t0 = time.perf_counter()
    errors = {}
    for kind in KINDS:
        rng = np.random.default_rng(7)
        layer, xs = layer_case(kind, rng)
        probe = np.random.default_rng(1)
        R = {}

        def fn(layer=layer, xs=xs, probe=probe, R=R):
            out = forward(layer, *xs)
            if "r" not in R:
                R["r"] = probe.normal(size=out.shape)
            return T.sum_all(T.mul(out, Tensor(R["r"])))

        errors[kind] = check(fn, xs + list(layer.params.values()))
    for pb in (False, True):
        params = M.init_model(seed=4)
        batch = micro_batch(np.random.default_rng(5))
        tensors = params.parameters() if pb else [t for k, t in params.named().items() if not k.startswith("omega_f.")]
        errors[f"end_to_end_pb={pb}"] = check(lambda: batch_loss(params, batch, pb)[0], tensors, max_entries=4)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 60
    report(acceptance_log, 3, ok, f"{len(errors)} checks, worst relative error {errors[worst]:.1e} ({worst})", elapsed)
    assert ok


# ---------------------------------------------------------------- 4


def test_04_rts_beats_interpolated(bench, acceptance_log):
    bench.scenes("box_corner")
    rts = bench.variant("box_corner", "rts")
    interp = bench.variant("box_corner", "interpolated")
    a, b = rts.scores["chamfer"], interp.scores["chamfer"]
    gain = (b - a) / b
    elapsed = bench.cost("box_corner", rts, interp)
    ok = gain >= 0.05 and elapsed < 15 * 60
    report(acceptance_log, 4, ok, f"DG on: rts chamfer {a:.3f} cm vs interpolated {b:.3f} cm ({100 * gain:.1f}% lower)", elapsed)
    assert ok


# ---------------------------------------------------------------- 5


def test_05_depth_guidance(bench, acceptance_log):
    bench.scenes("box_corner")
    dg = bench.variant("box_corner", dg=True)
    none = bench.variant("box_corner", dg=False)
    depth_only = bench.variant("box_corner", dg=True, strategy="depth_only")
    c_dg, c_none, c_f = (v.scores["chamfer"] for v in (dg, none, depth_only))
    elapsed = bench.cost("box_corner", dg, none, depth_only)
    ok = c_dg < c_none and c_dg < c_f and elapsed < 30 * 60
    report(acceptance_log, 5, ok, f"tsdf guidance {chamfer_text(c_dg)}, depth only {chamfer_text(c_f)}, "
                  f"no guidance {chamfer_text(c_none)}", elapsed)
    assert ok


# ---------------------------------------------------------------- 6


def test_06_point_backprojection_with_guidance(bench, acceptance_log):
    bench.scenes("box_corner")
    bench.scenes("thin")
    box_off, box_on = bench.variant("box_corner", pb=False), bench.variant("box_corner", pb=True)
    thin_off, thin_on = bench.variant("thin", pb=False), bench.variant("thin", pb=True)
    nodg_off, nodg_on = bench.variant("box_corner", dg=False, pb=False), bench.variant("box_corner", dg=False, pb=True)
    b0, b1 = box_off.scores["chamfer"], box_on.scores["chamfer"]
    t0, t1 = thin_off.scores["chamfer"], thin_on.scores["chamfer"]
    ok = b1 <= 1.02 * b0 and t1 < t0
    report(acceptance_log, 6, ok, f"DG on: box_corner PB {b1:.3f} vs {b0:.3f} cm, thin PB {t1:.3f} vs {t0:.3f} cm; "
                  f"DG off (not gated): PB {chamfer_text(nodg_on.scores['chamfer'])} "
                  f"vs {chamfer_text(nodg_off.scores['chamfer'])}")
    assert ok


# ---------------------------------------------------------------- 7


def test_07_output_resolution(bench, acceptance_log):
    train_data, test_data = bench.scenes("box_corner")
    v = bench.variant("box_corner", pb=True)
    t0 = time.perf_counter()
    rows = {0.04: [], 0.01: []}
    per_frame, extraction = {0.04: [], 0.01: []}, {0.04: [], 0.01: []}
    for d in test_data:
        spec = B.model_grid(d)
        ctx = prepare_inference(v.params, d.images, d.cameras, d.depths, spec, v.cfg.guidance, True, d.truncation)
        gt = B.ground_truth_mesh(d.scene)
        vis = visibility_volume(d.gt_depths, d.cameras, d.gt_spec, d.truncation)
        for spacing in rows:
            vol, stats = reconstruct_grid(ctx, ReconstructionRequest(spacing, False, 0.5, True))
            rows[spacing].append(metrics_3d(marching_cubes(vol), gt, vis))
            per_frame[spacing].append(ctx.timings["per_frame"])
            extraction[spacing].append(stats["extraction_time"])
    coarse, fine = B.mean_metrics(rows[0.04]), B.mean_metrics(rows[0.01])
    dc = rel_change(fine["chamfer"], coarse["chamfer"])
    df = rel_change(fine["f1"], coarse["f1"])
    same_frame = per_frame[0.04] == per_frame[0.01]
    grows = np.sum(extraction[0.01]) > np.sum(extraction[0.04])
    ok = dc < 0.05 and df < 0.05 and same_frame and grows
    report(acceptance_log, 7, ok, f"chamfer 1 cm {fine['chamfer']:.3f} vs 4 cm {coarse['chamfer']:.3f} cm ({100 * dc:.1f}%), "
                  f"f1 {fine['f1']:.2f} vs {coarse['f1']:.2f} ({100 * df:.2f}%), "
                  f"per-frame {1e3 * np.mean(per_frame[0.01]):.1f} ms at both, extraction "
                  f"{np.sum(extraction[0.04]):.2f} s -> {np.sum(extraction[0.01]):.2f} s",
           time.perf_counter() - t0)
    assert ok


# ---------------------------------------------------------------- 8


def test_08_occupancy_filtering(bench, acceptance_log):
    v = bench.variant("box_corner", pb=True)
    t0 = time.perf_counter()
    capture = preset_capture("room")
    lines, ok = [], True
    for seed in (200, 201):
        d = build_scene_data(preset_scene("room", seed), capture, seed=seed)
        spec = B.model_grid(d)
        occupied = occupancy_ground_truth(B.analytic_volume(d.scene, spec, d.truncation)).flags.mean()
        ctx = prepare_inference(v.params, d.images, d.cameras, d.depths, spec, v.cfg.guidance, True, d.truncation)
        on, s_on = reconstruct_grid(ctx, ReconstructionRequest(0.04, True, 0.5, True))
        off, s_off = reconstruct_grid(ctx, ReconstructionRequest(0.04, False, 0.5, True))
        keep = on.weights > 0
        identical = np.array_equal(on.values[keep], off.values[keep])
        drop = 1.0 - s_on["evaluations"] / s_off["evaluations"]
        ok &= occupied < 0.25 and identical and drop >= 0.5
        lines.append(f"room {seed}: occupied {100 * occupied:.1f}%, evaluations -{100 * drop:.1f}%, "
                     f"identical {identical}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    report(acceptance_log, 8, ok, "; ".join(lines), elapsed)
    assert ok


# ---------------------------------------------------------------- 9


def _square(z=0.0, size=1.0, offset=(0.0, 0.0)):
    x0, y0 = offset
    v = np.array([[x0, y0, z], [x0 + size, y0, z], [x0 + size, y0 + size, z], [x0, y0 + size, z]])
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def test_09_metric_self_tests(acceptance_log):
    t0 = time.perf_counter()
    spec = GridSpec.covering((-0.6, -0.6, -0.6), (0.6, 0.6, 0.6), 0.04)
    sphere = SdfScene((Sphere((0.0, 0.0, 0.0), 0.5),))
    vals = sdf_eval(sphere, spec.centers(), 0.12).reshape(spec.dims)
    mesh = marching_cubes(TsdfVolume(spec, vals, np.ones(spec.dims), 0.12))
    same = metrics_3d(mesh, mesh)
    self_ok = same.chamfer == 0 and same.f1 == 100

    plane = metrics_3d(_square(0.02), _square(0.0))
    plane_ok = abs(plane.chamfer - 2.0) <= 0.1

    rng = np.random.default_rng(0)
    gt = [DepthMap(rng.uniform(1, 3, size=(10, 12))) for _ in range(2)]
    scaled = metrics_2d([DepthMap(1.04 * g.values) for g in gt], gt, thresholds=(1.03,))
    delta_ok = scaled.delta_105 == 100 and scaled.deltas[1.03] == 0 and abs(scaled.absrel - 0.04) <= 1e-12

    gt_mesh = _square()
    pred = TriangleMesh.concatenate([gt_mesh, _square(0.0, 0.5, offset=(3.0, 3.0))])
    vspec = GridSpec((-0.1, -0.1, -0.1), 0.05, (90, 90, 5))
    observed = np.zeros(vspec.dims, dtype=bool)
    observed[:26, :26, :] = True
    vis = VisibilityVolume(vspec, observed)
    base, trimmed, raw = metrics_3d(gt_mesh, gt_mesh, vis), metrics_3d(pred, gt_mesh, vis), metrics_3d(pred, gt_mesh)
    trim_ok = (trimmed.acc == base.acc and trimmed.prec == base.prec and trimmed.comp == raw.comp
               and trimmed.rec == raw.rec and raw.prec < trimmed.prec)
    elapsed = time.perf_counter() - t0
    ok = self_ok and plane_ok and delta_ok and trim_ok and elapsed < 30
    report(acceptance_log, 9, ok, f"self chamfer {same.chamfer} f1 {same.f1}; offset plane {plane.chamfer:.3f} cm; "
                  f"delta example exact {delta_ok}; trimming acc {raw.acc:.1f} -> {trimmed.acc:.1f} cm "
                  f"with comp {trimmed.comp:.2f} unchanged {trim_ok}", elapsed)
    assert ok


# ---------------------------------------------------------------- 10


def test_10_closed_form_constants(acceptance_log):
    t = float(M.tsdf_transform(np.e - 1))
    bw10 = float(border_weight(10.0))
    bw0 = float(border_weight(0.0))
    sigma_m6 = 1.0 / (1.0 + np.exp(6.0))
    _, _, l_o = M.compute_loss([0.0], [0.0], [0.0], [1.0])
    ok = abs(t - 1) <= 1e-12 and bw10 == 0.5 and abs(bw0 - sigma_m6) <= 1e-12 and abs(l_o - np.log(2)) <= 1e-12
    report(acceptance_log, 10, ok, f"t(e-1)-1 = {t - 1:.1e}, border_weight(10) = {bw10!r}, "
                   f"border_weight(0)-sigmoid(-6) = {bw0 - sigma_m6:.1e}, L_O-ln2 = {l_o - np.log(2):.1e}")
    assert ok
