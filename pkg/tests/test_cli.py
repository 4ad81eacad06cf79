import json

import numpy as np
import pytest

from pointrecon.cli import main
from pointrecon.meshio import read_ply
from pointrecon.runio import RunManifest
from pointrecon.tsdf import load_volume

SMALL = ["--views", "6", "--width", "32", "--height", "24", "--focal", "25"]


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["scene", "gen", "--preset", "box_corner", "--seed", "2", *SMALL, "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_scene):
    out = tmp_path_factory.mktemp("cli") / "model"
    argv = ["train", "--scenes", str(small_scene), "--steps", "2", "--chunk", "8", "8", "8", "--points", "128",
            "--views-per-step", "2", "--out", str(out)]
    assert main(argv) == 0
    return out


def _files(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_scene_gen_deterministic(tmp_path, small_scene):
    again = tmp_path / "again"
    assert main(["scene", "gen", "--preset", "box_corner", "--seed", "2", *SMALL, "--out", str(again)]) == 0
    a, b = _files(small_scene), _files(again)
    assert a.keys() == b.keys()
    for name in a:
        if name.name != "manifest.json":
            assert a[name] == b[name], name
    ma, mb = RunManifest.read(small_scene), RunManifest.read(again)
    assert ma.config == mb.config and ma.artifacts == mb.artifacts


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("[capture]\nn_views = 4\nwidth = 16\nheight = 12\nfocal = 12\n")
    out = tmp_path / "s"
    assert main(["scene", "gen", "--preset", "sphere", "--config", str(cfg), "--views", "3", "--out", str(out)]) == 0
    cap = RunManifest.read(out).config["capture"]
    assert cap["n_views"] == 3 and cap["width"] == 16 and cap["trajectory"] == "sphere"


def test_fuse_then_eval_sphere(tmp_path, capsys):
    scene = tmp_path / "sphere"
    assert main(["scene", "gen", "--preset", "sphere", "--views", "16", "--out", str(scene)]) == 0
    fused = tmp_path / "fused"
    assert main(["fuse", "--scene", str(scene), "--voxel", "0.02", "--depth", "gt", "--out", str(fused)]) == 0
    vol = load_volume(fused / "volume.tsdf")
    assert vol.truncation == pytest.approx(0.06)
    assert read_ply(fused / "mesh.ply").euler_characteristic() == 2
    capsys.readouterr()
    assert main(["eval", "--mesh", str(fused / "mesh.ply"), "--scene", str(scene), "--out", str(fused)]) == 0
    lines = [json.loads(s) for s in capsys.readouterr().out.splitlines()]
    assert lines[-1]["aggregate"] and lines[-1]["3d_f1"] > 99.0
    assert (fused / "metrics.jsonl").exists()


def test_train_outputs(trained):
    m = RunManifest.read(trained)
    assert m.command == "train" and len(m.results["history"]) == 1
    assert (trained / "model.prck").exists()
    log = [json.loads(s) for s in (trained / "train.log").read_text().splitlines()]
    assert len(log) == 2 and all(np.isfinite(r["L"]) for r in log)


def test_reconstruct_filter_on_off(tmp_path, trained, small_scene):
    on, off = tmp_path / "on", tmp_path / "off"
    base = ["reconstruct", "--checkpoint", str(trained / "model.prck"), "--scene", str(small_scene)]
    assert main([*base, "--out", str(on)]) == 0
    assert main([*base, "--no-occupancy-filter", "--out", str(off)]) == 0
    r_on, r_off = RunManifest.read(on).results, RunManifest.read(off).results
    assert r_off["evaluations"] == r_off["cells"]
    assert r_on["evaluations"] <= r_off["evaluations"]
    assert set(RunManifest.read(on).timings) >= {"per_frame", "tsdf_extraction"}
    v_on, v_off = load_volume(on / "volume.tsdf"), load_volume(off / "volume.tsdf")
    keep = v_on.weights > 0
    np.testing.assert_array_equal(v_on.values[keep], v_off.values[keep])


def test_reconstruct_rejects_pb_without_training(tmp_path, small_scene, capsys):
    model = tmp_path / "m"
    assert main(["train", "--scenes", str(small_scene), "--steps", "1", "--chunk", "8", "8", "8", "--points", "64",
                 "--views-per-step", "2", "--no-pb", "--out", str(model)]) == 0
    base = ["reconstruct", "--checkpoint", str(model / "model.prck"), "--scene", str(small_scene)]
    assert main([*base, "--out", str(tmp_path / "ok")]) == 0
    capsys.readouterr()
    code = main([*base, "--pb", "--out", str(tmp_path / "x")])
    assert code == 1
    assert "without point back-projection" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv, fragment",
    [
        (["fuse", "--scene", "/nonexistent", "--out", "/tmp/x"], "lacks scene.cfg"),
        (["eval", "--mesh", "a.ply", "--mesh", "b.ply", "--scene", "s", "--out", "/tmp/x"], "--mesh given 2 times"),
        (["scene", "gen", "--preset", "sphere", "--config", "/nonexistent.cfg", "--out", "/tmp/x"], "not found"),
    ],
)
def test_errors_exit_nonzero(argv, fragment, capsys):
    assert main(argv) == 1
    assert fragment in capsys.readouterr().err


def test_usage_error_exit_code(capsys):
    assert main(["scene", "gen"]) == 2
    assert main(["bogus"]) == 2
