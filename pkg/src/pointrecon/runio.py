"""On-disk layout: scene directories, the cameras text file, sectioned configs and
run manifests. Every file is written atomically."""

from __future__ import annotations

import configparser
import io
import json
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .fileio import atomic_write_bytes, atomic_write_text
from .geometry import GridSpec, Intrinsics, Pose
from .meshio import write_ply
from .scene import DepthMap, NoiseConfig, scene_from_text, scene_to_text
from .training import CaptureConfig, SceneData
from .tsdf import TsdfVolume, load_volume, save_volume

SCENE_FILE = "scene.cfg"
CONFIG_FILE = "config.cfg"
CAMERAS_FILE = "cameras.txt"
GT_MESH_FILE = "gt_mesh.ply"
GT_SAMPLES_FILE = "gt_samples.tsdf"
MANIFEST_FILE = "manifest.json"


# ---------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    code_version: str = __version__
    timings: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    results: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["python"] = platform.python_version()
        d["numpy"] = np.__version__
        return json.dumps(d, indent=2, sort_keys=True, default=_jsonable) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_FILE
        atomic_write_text(path, self.to_json())
        return path

    @classmethod
    def read(cls, directory) -> "RunManifest":
        d = json.loads((Path(directory) / MANIFEST_FILE).read_text())
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    return str(o)


# ---------------------------------------------------------------- configs


def write_config(path, sections: dict) -> None:
    """``{section: {key: value}}`` as a plain-text, sectioned key-value file."""
    cp = configparser.ConfigParser()
    for name, values in sections.items():
        cp[name] = {k: _cfg_str(v) for k, v in values.items()}
    buf = io.StringIO()
    cp.write(buf)
    atomic_write_text(path, buf.getvalue())


def read_config(path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.read(path)
    return cp


def _cfg_str(v) -> str:
    if isinstance(v, (tuple, list, np.ndarray)):
        return " ".join(repr(float(x)) if not isinstance(x, (int, np.integer)) else str(int(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def capture_to_section(capture: CaptureConfig) -> dict:
    return {
        "n_views": capture.n_views,
        "width": capture.width,
        "height": capture.height,
        "focal": capture.focal,
        "radius": capture.radius,
        "height_m": capture.height_m,
        "noise_sigma": capture.noise.multiplicative_sigma,
        "outlier_rate": capture.noise.outlier_rate,
        "noise_seed": capture.noise.seed,
        "gt_voxel": capture.gt_voxel,
        "margin": capture.margin,
        "trajectory": capture.trajectory,
    }


def capture_from_section(sec) -> CaptureConfig:
    noise = NoiseConfig(float(sec["noise_sigma"]), float(sec["outlier_rate"]), seed=int(sec["noise_seed"]))
    return CaptureConfig(
        n_views=int(sec["n_views"]),
        width=int(sec["width"]),
        height=int(sec["height"]),
        focal=float(sec["focal"]),
        radius=float(sec["radius"]),
        height_m=float(sec["height_m"]),
        noise=noise,
        gt_voxel=float(sec["gt_voxel"]),
        margin=float(sec["margin"]),
        trajectory=sec.get("trajectory", "orbit"),
    )


# ---------------------------------------------------------------- cameras


def cameras_to_text(cameras) -> str:
    lines = ["# per frame: size W H / 3x3 intrinsics row-major / 4x4 world-from-camera row-major",
             f"frames {len(cameras)}"]
    for i, (K, P) in enumerate(cameras):
        lines.append(f"frame {i}")
        lines.append(f"size {K.width} {K.height}")
        lines.append("K " + " ".join(repr(float(x)) for x in K.matrix.ravel()))
        lines.append("pose " + " ".join(repr(float(x)) for x in P.matrix.ravel()))
    return "\n".join(lines) + "\n"


def cameras_from_text(text: str) -> list:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or rows[0][0] != "frames":
        raise ValueError("cameras file: first line must be 'frames N'")
    n = int(rows[0][1])
    body = rows[1:]
    if len(body) != 4 * n:
        raise ValueError(f"cameras file: expected {4 * n} frame lines for {n} frames, found {len(body)}")
    cams = []
    for i in range(n):
        tag, size, k, pose = body[4 * i : 4 * i + 4]
        if tag[0] != "frame" or size[0] != "size" or k[0] != "K" or pose[0] != "pose":
            raise ValueError(f"cameras file: malformed block for frame {i}")
        if len(k) != 10 or len(pose) != 17:
            raise ValueError(f"cameras file: frame {i} needs 9 intrinsics and 16 pose values")
        K = Intrinsics.from_matrix(np.array(k[1:], dtype=float).reshape(3, 3), int(size[1]), int(size[2]))
        P = Pose.from_matrix(np.array(pose[1:], dtype=float).reshape(4, 4))
        cams.append((K, P))
    return cams


# ---------------------------------------------------------------- raw float32 frames


def write_f32(path, array) -> None:
    atomic_write_bytes(path, np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_f32(path, shape) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {data.size} floats, expected {int(np.prod(shape))} for shape {tuple(shape)}")
    return data.astype(float).reshape(shape)


# ---------------------------------------------------------------- scene directory


def save_scene_dir(directory, data: SceneData, capture: CaptureConfig, gt_mesh, extra: dict | None = None) -> list:
    """Write one scene directory; returns the written paths (relative)."""
    d = Path(directory)
    written = []

    def rel(p):
        written.append(str(Path(p).relative_to(d)))

    atomic_write_text(d / SCENE_FILE, scene_to_text(data.scene))
    rel(d / SCENE_FILE)
    write_config(d / CONFIG_FILE, {"capture": capture_to_section(capture), "scene": extra or {}})
    rel(d / CONFIG_FILE)
    atomic_write_text(d / CAMERAS_FILE, cameras_to_text(data.cameras))
    rel(d / CAMERAS_FILE)
    for i, (gt, noisy, img) in enumerate(zip(data.gt_depths, data.depths, data.images)):
        for sub, arr in (("depth", noisy.values), ("gt_depth", gt.values), ("images", img)):
            p = d / sub / f"{i:06d}.f32"
            write_f32(p, arr)
            rel(p)
    write_ply(gt_mesh, d / GT_MESH_FILE)
    rel(d / GT_MESH_FILE)
    save_volume(TsdfVolume(data.gt_spec, data.gt_values, np.ones(data.gt_spec.dims), data.truncation),
                d / GT_SAMPLES_FILE)
    rel(d / GT_SAMPLES_FILE)
    return written


def load_scene_dir(directory) -> tuple:
    """Returns ``(SceneData, CaptureConfig)``."""
    d = Path(directory)
    for name in (SCENE_FILE, CONFIG_FILE, CAMERAS_FILE, GT_SAMPLES_FILE):
        if not (d / name).exists():
            raise FileNotFoundError(f"scene directory {d} lacks {name}")
    scene = scene_from_text((d / SCENE_FILE).read_text())
    capture = capture_from_section(read_config(d / CONFIG_FILE)["capture"])
    cameras = cameras_from_text((d / CAMERAS_FILE).read_text())
    hw = (cameras[0][0].height, cameras[0][0].width)
    gt_depths, depths, images = [], [], []
    for i, (K, P) in enumerate(cameras):
        depths.append(DepthMap(read_f32(d / "depth" / f"{i:06d}.f32", hw), K, P))
        gt_depths.append(DepthMap(read_f32(d / "gt_depth" / f"{i:06d}.f32", hw), K, P))
        images.append(read_f32(d / "images" / f"{i:06d}.f32", (3,) + hw))
    gt = load_volume(d / GT_SAMPLES_FILE)
    data = SceneData(scene, cameras, np.stack(images), gt_depths, depths, gt.spec, gt.values, gt.truncation)
    return data, capture


def grid_from_config(sec) -> GridSpec:
    return GridSpec(tuple(float(x) for x in sec["origin"].split()), float(sec["voxel_size"]),
                    tuple(int(x) for x in sec["dims"].split()))
