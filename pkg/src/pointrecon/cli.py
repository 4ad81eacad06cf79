"""Command-line entry point: scene generation, fusion, training, reconstruction,
evaluation and the ablation matrix.

Set ``POINTRECON_THREADS`` to cap BLAS/OpenMP threads (read before numpy loads).
"""

from __future__ import annotations

import os

_threads = os.environ.get("POINTRECON_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import asdict, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import benchmark as B  # noqa: E402
from . import model as M  # noqa: E402
from .autodiff import checkpoint  # noqa: E402
from .backprojection import GuidanceStrategy  # noqa: E402
from .evaluation import metrics_2d, metrics_3d, render_depth, visibility_volume  # noqa: E402
from .fileio import atomic_write_text  # noqa: E402
from .meshio import read_ply, write_ply  # noqa: E402
from .reconstruct import ReconstructionRequest, marching_cubes, prepare_inference, reconstruct_grid  # noqa: E402
from .runio import (  # noqa: E402
    RunManifest,
    load_scene_dir,
    read_config,
    save_scene_dir,
)
from .scene import PRESETS, NoiseConfig, preset_scene  # noqa: E402
from .training import CaptureConfig, TrainConfig, build_scene_data, preset_capture, scene_region, train  # noqa: E402
from .tsdf import fuse_depths, save_volume  # noqa: E402

log = logging.getLogger("pointrecon")

CHECKPOINT_FILE = "model.prck"
LOG_FILE = "train.log"
VOLUME_FILE = "volume.tsdf"
MESH_FILE = "mesh.ply"
METRICS_FILE = "metrics.jsonl"


class CliError(Exception):
    pass


# ---------------------------------------------------------------- config handling


def _config_section(path, name) -> dict:
    if path is None:
        return {}
    cp = read_config(path)
    return dict(cp[name]) if cp.has_section(name) else {}


def _pick(flag, cfg: dict, key, cast, default):
    """Flag beats config file beats default."""
    if flag is not None:
        return flag
    if key in cfg:
        return cast(cfg[key])
    return default


def _as_bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# ---------------------------------------------------------------- commands


def cmd_scene_gen(args) -> dict:
    cfg = _config_section(args.config, "capture")
    base = preset_capture(args.preset)
    noise = NoiseConfig(
        _pick(args.noise_sigma, cfg, "noise_sigma", float, base.noise.multiplicative_sigma),
        _pick(args.outlier_rate, cfg, "outlier_rate", float, base.noise.outlier_rate),
    )
    capture = CaptureConfig(
        n_views=_pick(args.views, cfg, "n_views", int, base.n_views),
        width=_pick(args.width, cfg, "width", int, base.width),
        height=_pick(args.height, cfg, "height", int, base.height),
        focal=_pick(args.focal, cfg, "focal", float, base.focal),
        radius=_pick(args.radius, cfg, "radius", float, base.radius),
        height_m=_pick(args.camera_height, cfg, "height_m", float, base.height_m),
        noise=noise,
        gt_voxel=_pick(args.gt_voxel, cfg, "gt_voxel", float, base.gt_voxel),
        margin=base.margin,
        trajectory=_pick(args.trajectory, cfg, "trajectory", str, base.trajectory),
    )
    t0 = time.perf_counter()
    scene = preset_scene(args.preset, args.seed)
    data = build_scene_data(scene, capture, seed=args.seed)
    t1 = time.perf_counter()
    gt_mesh = B.ground_truth_mesh(scene, capture.margin)
    written = save_scene_dir(args.out, data, capture, gt_mesh, {"preset": args.preset, "seed": args.seed})
    manifest = RunManifest(
        "scene gen",
        {"preset": args.preset, "capture": asdict(capture)},
        args.seed,
        timings={"render": t1 - t0, "total": time.perf_counter() - t0},
        artifacts=written,
    )
    manifest.write(args.out)
    return {"out": str(args.out), "frames": capture.n_views}


def cmd_fuse(args) -> dict:
    data, capture = load_scene_dir(args.scene)
    voxel = args.voxel
    tau = args.truncation if args.truncation is not None else 3 * voxel
    depths = data.gt_depths if args.depth == "gt" else data.depths
    spec = scene_region(data.scene, voxel, capture.margin)
    t0 = time.perf_counter()
    vol = fuse_depths(depths, data.cameras, spec, tau)
    t1 = time.perf_counter()
    mesh = marching_cubes(vol, block_unobserved=not args.keep_unobserved)
    t2 = time.perf_counter()
    out = Path(args.out)
    save_volume(vol, out / VOLUME_FILE)
    write_ply(mesh, out / MESH_FILE)
    RunManifest(
        "fuse",
        {"scene": str(args.scene), "voxel": voxel, "truncation": tau, "depth": args.depth,
         "block_unobserved": not args.keep_unobserved, "grid": asdict(spec)},
        timings={"fusion": t1 - t0, "extraction": t2 - t1},
        artifacts=[VOLUME_FILE, MESH_FILE],
        results={"vertices": len(mesh.vertices), "triangles": len(mesh.triangles)},
    ).write(out)
    return {"out": str(out), "triangles": len(mesh.triangles)}


def _train_config(args) -> TrainConfig:
    cfg = _config_section(args.config, "train")
    base = B.default_train_config()
    chunk = args.chunk or (tuple(int(x) for x in cfg["chunk_dims"].split()) if "chunk_dims" in cfg else None)
    return TrainConfig(
        supervision_mode=_pick(args.supervision, cfg, "supervision_mode", str, base.supervision_mode),
        enable_dg=_pick(args.dg, cfg, "enable_dg", _as_bool, base.enable_dg),
        enable_pb=_pick(args.pb, cfg, "enable_pb", _as_bool, base.enable_pb),
        strategy=GuidanceStrategy(_pick(args.strategy, cfg, "strategy", str, base.strategy.variant)),
        chunk_dims=tuple(chunk) if chunk else base.chunk_dims,
        points_per_step=_pick(args.points, cfg, "points_per_step", int, base.points_per_step),
        views_per_step=_pick(args.views_per_step, cfg, "views_per_step", int, base.views_per_step),
        rotation_aug=_pick(args.rotation_aug, cfg, "rotation_aug", _as_bool, base.rotation_aug),
        depth_scale_aug=_pick(args.depth_scale_aug, cfg, "depth_scale_aug", _as_bool, base.depth_scale_aug),
        epochs=_pick(args.epochs, cfg, "epochs", int, base.epochs),
        steps_per_epoch=_pick(args.steps, cfg, "steps_per_epoch", int, base.steps_per_epoch),
        lr=_pick(args.lr, cfg, "lr", float, base.lr),
        seed=_pick(args.seed, cfg, "seed", int, base.seed),
    )


def _train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["strategy"] = cfg.strategy.variant
    d["sigma"] = cfg.strategy.sigma
    d["chunk_dims"] = list(cfg.chunk_dims)
    return d


def _train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["strategy"] = GuidanceStrategy(d.pop("strategy"), d.pop("sigma"))
    d["chunk_dims"] = tuple(d["chunk_dims"])
    return TrainConfig(**d)


def cmd_train(args) -> dict:
    cfg = _train_config(args)
    scenes = [load_scene_dir(s)[0] for s in args.scenes]
    out = Path(args.out)
    buf = io.StringIO()
    t0 = time.perf_counter()
    params, state, history = train(scenes, cfg, log_file=buf)
    elapsed = time.perf_counter() - t0
    atomic_write_text(out / LOG_FILE, buf.getvalue())
    cfg_dict = _train_config_dict(cfg)
    checkpoint.save(out / CHECKPOINT_FILE, params.named(), params.layer_manifest(),
                    {"train_config": cfg_dict, "adam_step": state.step})
    RunManifest(
        "train",
        {**cfg_dict, "scenes": [str(s) for s in args.scenes]},
        cfg.seed,
        timings={"train": elapsed},
        artifacts=[CHECKPOINT_FILE, LOG_FILE],
        results={"history": history},
    ).write(out)
    return {"out": str(out), "final_loss": history[-1]["L"] if history else None}


def load_model(path):
    arrays, manifest = checkpoint.load(path)
    cfg = _train_config_from_dict(manifest["extra"]["train_config"])
    params = M.init_model(cfg.model_config(), seed=cfg.seed)
    params.load_arrays(arrays)
    return params, cfg


def cmd_reconstruct(args) -> dict:
    params, cfg = load_model(args.checkpoint)
    data, _ = load_scene_dir(args.scene)
    enable_pb = cfg.enable_pb if args.pb is None else args.pb
    if enable_pb and not cfg.enable_pb:
        raise CliError("checkpoint was trained without point back-projection; cannot enable it")
    req = ReconstructionRequest(args.spacing, not args.no_occupancy_filter, args.occupancy_threshold, enable_pb)
    spec = B.model_grid(data, cfg.voxel_size)
    ctx = prepare_inference(params, data.images, data.cameras, data.depths, spec, cfg.guidance, enable_pb,
                            cfg.truncation)
    vol, stats = reconstruct_grid(ctx, req)
    t0 = time.perf_counter()
    mesh = marching_cubes(vol)
    mc_time = time.perf_counter() - t0
    out = Path(args.out)
    save_volume(vol, out / VOLUME_FILE)
    write_ply(mesh, out / MESH_FILE)
    timings = {
        "per_frame": ctx.timings["per_frame"],
        "frames": ctx.timings["frames"],
        "volume_network": ctx.timings["volume_network"],
        "tsdf_extraction": stats["extraction_time"] + mc_time,
    }
    results = {
        "evaluations": stats["evaluations"],
        "cells": stats["cells"],
        "evaluation_reduction": 1.0 - stats["evaluations"] / max(stats["cells"], 1),
        "triangles": len(mesh.triangles),
    }
    RunManifest(
        "reconstruct",
        {"checkpoint": str(args.checkpoint), "scene": str(args.scene), "request": asdict(req),
         "grid": asdict(spec), "train_config": _train_config_dict(cfg)},
        cfg.seed,
        timings=timings,
        artifacts=[VOLUME_FILE, MESH_FILE],
        results=results,
    ).write(out)
    return {"out": str(out), **results}


def cmd_eval(args) -> dict:
    if len(args.mesh) != len(args.scene):
        raise CliError(f"--mesh given {len(args.mesh)} times but --scene {len(args.scene)} times")
    records = []
    for mesh_path, scene_dir in zip(args.mesh, args.scene):
        data, _ = load_scene_dir(scene_dir)
        pred = read_ply(mesh_path)
        gt = read_ply(Path(scene_dir) / "gt_mesh.ply")
        vis = None if args.no_trim else visibility_volume(data.gt_depths, data.cameras, data.gt_spec,
                                                           data.truncation)
        if pred.is_empty:
            raise CliError(f"{mesh_path}: mesh is empty; 3D metrics are undefined")
        rec = {"mesh": str(mesh_path), "scene": str(scene_dir)}
        rec.update({f"3d_{k}": v for k, v in asdict(metrics_3d(pred, gt, vis, args.threshold)).items()})
        if not args.no_2d:
            rendered = [render_depth(pred, K, P) for K, P in data.cameras]
            m2 = metrics_2d(rendered, data.gt_depths)
            rec.update({f"2d_{k}": v for k, v in asdict(m2).items() if k != "deltas"})
        records.append(rec)
    keys = [k for k in records[0] if k.startswith(("3d_", "2d_"))]
    agg = {"aggregate": True, **{k: float(np.nanmean([r[k] for r in records])) for k in keys}}
    lines = [json.dumps(r, sort_keys=True) for r in records + [agg]]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        atomic_write_text(out / METRICS_FILE, text)
        RunManifest("eval", {"mesh": [str(m) for m in args.mesh], "scene": [str(s) for s in args.scene],
                             "threshold": args.threshold, "trim": not args.no_trim},
                    artifacts=[METRICS_FILE], results=agg).write(out)
    sys.stdout.write(text)
    return agg


def cmd_ablate(args) -> dict:
    ss = B.SceneSet(args.preset, tuple(args.train_seeds), tuple(args.test_seeds), preset_capture(args.preset))
    t0 = time.perf_counter()
    train_data, test_data = ss.build()
    base = B.default_train_config(steps_per_epoch=args.steps, seed=args.seed)
    variants = []
    if args.which in ("main", "all"):
        for label, mode, dg, pb, strat in B.ABLATION_MAIN:
            variants.append((f"main_{label}", replace(base, supervision_mode=mode, enable_dg=dg, enable_pb=pb,
                                                      strategy=GuidanceStrategy(strat))))
    if args.which in ("guidance", "all"):
        for label, strat in B.ABLATION_GUIDANCE:
            s = GuidanceStrategy(strat)
            variants.append((f"guidance_{label}", replace(base, strategy=s, enable_dg=strat != "none",
                                                          enable_pb=s.uses_images)))
    rows = []
    for name, cfg in variants:
        _, res = B.run_variant(train_data, test_data, cfg, args.spacing)
        row = {"variant": name, "supervision": cfg.supervision_mode, "dg": cfg.enable_dg, "pb": cfg.enable_pb,
               "strategy": cfg.guidance.variant, **res}
        rows.append(row)
        log.info("%s", json.dumps(row))
    out = Path(args.out)
    header = ["variant", "supervision", "dg", "pb", "strategy", "acc", "comp", "chamfer", "prec", "rec", "f1"]
    table = ["\t".join(header)]
    for r in rows:
        table.append("\t".join(f"{r[h]:.3f}" if isinstance(r[h], float) else str(r[h]) for h in header))
    atomic_write_text(out / "ablation.tsv", "\n".join(table) + "\n")
    atomic_write_text(out / "ablation.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    RunManifest("ablate", {"preset": args.preset, "train_seeds": args.train_seeds, "test_seeds": args.test_seeds,
                           "steps": args.steps, "spacing": args.spacing, "which": args.which},
                args.seed, timings={"total": time.perf_counter() - t0},
                artifacts=["ablation.tsv", "ablation.jsonl"], results={"rows": rows}).write(out)
    sys.stdout.write("\n".join(table) + "\n")
    return {"rows": len(rows)}


# ---------------------------------------------------------------- parser


def _bool_flag(p, name, dest, help_on):
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help_on)
    g.add_argument(f"--no-{name}", dest=dest, action="store_false")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointrecon", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    scene = sub.add_parser("scene", help="synthetic scene tools")
    scene_sub = scene.add_subparsers(dest="scene_command", required=True)
    g = scene_sub.add_parser("gen", help="render a preset scene into a scene directory")
    g.add_argument("--preset", choices=PRESETS, required=True)
    g.add_argument("--views", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--focal", type=float)
    g.add_argument("--radius", type=float)
    g.add_argument("--camera-height", type=float)
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--outlier-rate", type=float)
    g.add_argument("--gt-voxel", type=float)
    g.add_argument("--trajectory", choices=("orbit", "sphere"),
                   help="camera path (default depends on the preset)")
    g.add_argument("--config", type=Path, help="config file with a [capture] section")
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_scene_gen)

    f = sub.add_parser("fuse", help="fuse depth maps into a TSDF volume and mesh")
    f.add_argument("--scene", type=Path, required=True)
    f.add_argument("--voxel", type=float, default=0.02)
    f.add_argument("--truncation", type=float)
    f.add_argument("--depth", choices=("noisy", "gt"), default="noisy")
    f.add_argument("--keep-unobserved", action="store_true",
                   help="let never-observed voxels (+1, weight 0) take part in meshing")
    f.add_argument("--out", type=Path, required=True)
    f.set_defaults(func=cmd_fuse)

    t = sub.add_parser("train", help="train a model on scene directories")
    t.add_argument("--scenes", type=Path, nargs="+", required=True)
    t.add_argument("--config", type=Path, help="config file with a [train] section")
    t.add_argument("--supervision", choices=("rts", "interpolated", "analytic"))
    _bool_flag(t, "dg", "dg", "depth guidance")
    _bool_flag(t, "pb", "pb", "point back-projection")
    t.add_argument("--strategy", choices=("tsdf", "density", "gaussian_weight", "tsdf_plus_gaussian", "none",
                                          "depth_only"))
    t.add_argument("--chunk", type=int, nargs=3)
    t.add_argument("--points", type=int)
    t.add_argument("--views-per-step", type=int)
    _bool_flag(t, "rotation-aug", "rotation_aug", "rotation augmentation")
    _bool_flag(t, "depth-scale-aug", "depth_scale_aug", "depth-scale augmentation")
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", type=Path, required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="query a trained model on an output grid and mesh it")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--scene", type=Path, required=True)
    r.add_argument("--spacing", type=float, default=0.04)
    r.add_argument("--no-occupancy-filter", action="store_true")
    r.add_argument("--occupancy-threshold", type=float, default=0.5)
    _bool_flag(r, "pb", "pb", "point back-projection (default: as trained)")
    r.add_argument("--out", type=Path, required=True)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="3D and rendered-depth metrics against a scene's ground truth")
    e.add_argument("--mesh", type=Path, action="append", required=True)
    e.add_argument("--scene", type=Path, action="append", required=True)
    e.add_argument("--threshold", type=float, default=0.05)
    e.add_argument("--no-trim", action="store_true")
    e.add_argument("--no-2d", action="store_true")
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score the ablation variants")
    a.add_argument("--preset", choices=PRESETS, default="box_corner")
    a.add_argument("--train-seeds", type=int, nargs="+", default=[1, 2, 3, 4])
    a.add_argument("--test-seeds", type=int, nargs="+", default=[100, 101])
    a.add_argument("--steps", type=int, default=300)
    a.add_argument("--spacing", type=float, default=0.04)
    a.add_argument("--which", choices=("main", "guidance", "all"), default="all")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", type=Path, required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, FileNotFoundError, ValueError, KeyError, OSError) as e:
        print(f"pointrecon {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
