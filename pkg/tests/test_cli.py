import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from featnsr.cli import main, parse_args
from featnsr.meshing import read_ply
from featnsr.scene import write_xyz


@pytest.fixture(scope="module")
def cli_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["gen-scene", "--shape", "sphere", "--views", "12", "--res", "40x40", "--channels", "4",
                 "--gt-points", "20000", "--out", str(out)]) == 0
    return out


def test_gen_scene_files(cli_scene):
    names = {p.name for p in cli_scene.iterdir()}
    assert "scene.json" in names and "manifest.json" in names and "gt_points.xyz" in names
    assert sum(n.startswith("image_") for n in names) == 12
    assert sum(n.startswith("feat_") for n in names) == 12
    manifest = json.loads((cli_scene / "manifest.json").read_text())
    assert manifest["command"] == "gen-scene" and manifest["seed"] == 0
    for path in manifest["outputs"].values():
        assert os.path.exists(path)


def test_usage_and_runtime_exit_codes(tmp_path, capsys):
    assert main(["gen-scene", "--views", "12"]) == 2  # missing --out
    assert "--out" in capsys.readouterr().err
    assert main(["gen-scene", "--views", "2", "--out", str(tmp_path / "x")]) == 3
    assert main(["mesh", "--ckpt", "nothing.nsrw", "--res", "7", "--out", str(tmp_path / "m.ply")]) == 2
    assert main(["mesh", "--ckpt", str(tmp_path / "missing.nsrw"), "--out", str(tmp_path / "m.ply")]) == 3
    assert main(["train", "--scene", str(tmp_path / "nope"), "--out", str(tmp_path / "t")]) == 3
    assert main(["bogus"]) == 2


def test_train_mesh_eval_pipeline(cli_scene, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--scene", str(cli_scene), "--loss", "none", "--steps", "0", "--out", str(run)]) == 0
    assert (run / "final.nsrw").exists() and (run / "metrics.csv").exists()
    mesh_path = tmp_path / "init.ply"
    assert main(["mesh", "--ckpt", str(run / "final.nsrw"), "--res", "48", "--out", str(mesh_path)]) == 0
    mesh = read_ply(mesh_path)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    # geometric initialization: a sphere of radius 0.5
    assert abs(np.mean(radii) - 0.5) < 0.03 and radii.std() < 0.03
    capsys.readouterr()
    assert main(["eval", "--mesh", str(mesh_path), "--gt", str(cli_scene), "--loss", "none",
                 "--samples", "20000"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "scene,loss,acc,comp,mean"
    name, loss, acc, comp, mean = lines[1].split(",")
    assert (name, loss) == ("scene", "none")
    assert float(mean) == pytest.approx((float(acc) + float(comp)) / 2, abs=2e-6)
    assert float(mean) < 0.05


def test_train_writes_metrics_rows(cli_scene, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--scene", str(cli_scene), "--steps", "2", "--rays", "16", "--samples", "8",
                 "--patch", "3", "--out", str(run)]) == 0
    rows = (run / "metrics.csv").read_text().splitlines()
    assert rows[0] == "step,L_color,L_eik,L_feat,L,lr,crossing_frac" and len(rows) == 3
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["train"]["loss_kind"] == "patch_ncc"


def test_bad_train_flags_are_usage_errors(cli_scene, tmp_path):
    assert main(["train", "--scene", str(cli_scene), "--topk", "11", "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--scene", str(cli_scene), "--patch", "4", "--out", str(tmp_path / "r")]) == 2


def test_eval_self_bound(tmp_path, capsys):
    # a fine sphere mesh evaluated against 100k points on the same sphere (radius 0.5, as in the
    # generator's sphere scene); two independent 100k samples are ~0.0028 apart on average
    from featnsr.meshing import marching_cubes, write_ply
    mesh = marching_cubes(lambda p: np.linalg.norm(p, axis=1) - 0.5, 96)
    write_ply(tmp_path / "s.ply", mesh)
    g = np.random.default_rng(0).normal(size=(100_000, 3))
    write_xyz(tmp_path / "gt.xyz", 0.5 * g / np.linalg.norm(g, axis=1, keepdims=True))
    assert main(["eval", "--mesh", str(tmp_path / "s.ply"), "--gt", str(tmp_path / "gt.xyz")]) == 0
    assert float(capsys.readouterr().out.splitlines()[1].split(",")[-1]) < 0.005
    # shifted copy: mean CD close to the offset
    mesh.vertices = 0.2 * mesh.vertices + np.array([1.0, 0, 0])
    write_ply(tmp_path / "far.ply", mesh)
    write_xyz(tmp_path / "small.xyz", 0.1 * g / np.linalg.norm(g, axis=1, keepdims=True))
    assert main(["eval", "--mesh", str(tmp_path / "far.ply"), "--gt", str(tmp_path / "small.xyz")]) == 0
    assert float(capsys.readouterr().out.splitlines()[1].split(",")[-1]) == pytest.approx(1.0, abs=0.1)


def test_eval_empty_gt(tmp_path, cli_scene):
    from featnsr.meshing import marching_cubes, write_ply
    write_ply(tmp_path / "s.ply", marching_cubes(lambda p: np.linalg.norm(p, axis=1) - 0.5, 16))
    (tmp_path / "empty.xyz").write_text("")
    assert main(["eval", "--mesh", str(tmp_path / "s.ply"), "--gt", str(tmp_path / "empty.xyz")]) == 3


def test_check_warp_passes_on_fresh_scene(cli_scene, capsys):
    assert main(["check-warp", "--scene", str(cli_scene), "--samples", "60"]) == 0
    assert "check-warp: pass" in capsys.readouterr().out


def test_check_warp_noise(tmp_path, capsys):
    out = tmp_path / "noisy"
    assert main(["gen-scene", "--views", "8", "--res", "32x32", "--channels", "4", "--feature-noise", "0.5",
                 "--gt-points", "0", "--out", str(out)]) == 0
    assert main(["check-warp", "--scene", str(out), "--samples", "40"]) == 3
    capsys.readouterr()
    assert main(["check-warp", "--scene", str(out), "--samples", "40", "--lenient"]) == 0
    assert "lenient" in capsys.readouterr().out


def _edit_camera(src, dst, fn, views=(0,)):
    shutil.copytree(src, dst)
    doc = json.loads((dst / "scene.json").read_text())
    for k in views:
        view = doc["views"][k]
        view["R"] = fn(np.array(view["R"]).reshape(3, 3)).ravel().tolist()
    (dst / "scene.json").write_text(json.dumps(doc))
    return dst


def test_check_warp_corrupted_rotation(cli_scene, tmp_path):
    # not a rotation at all: rejected while loading
    bad = _edit_camera(cli_scene, tmp_path / "a", lambda R: 1.5 * R)
    assert main(["check-warp", "--scene", str(bad), "--samples", "20"]) == 3
    # valid but wrong rotations (every camera rolled by 10 degrees): features no longer line up
    turn = Rotation.from_euler("z", 10, degrees=True).as_matrix()
    bad = _edit_camera(cli_scene, tmp_path / "b", lambda R: turn @ R, views=range(12))
    assert main(["check-warp", "--scene", str(bad), "--samples", "100"]) == 3


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("# defaults\nviews = 6\nseed = 4\nraw = true\n")
    args = parse_args(["gen-scene", "--config", str(cfg), "--seed", "9", "--out", "x"])
    assert (args.views, args.seed, args.raw) == (6, 9, True)
    args = parse_args(["gen-scene", "--out", "x"])
    assert (args.views, args.seed, args.raw) == (12, 0, False)
    (tmp_path / "bad.toml").write_text("views 6\n")
    assert main(["gen-scene", "--config", str(tmp_path / "bad.toml"), "--out", "x"]) == 2


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("NSR_THREADS", "3")
    assert parse_args(["gen-scene", "--out", "x"]).threads == 3
    assert parse_args(["gen-scene", "--out", "x", "--threads", "2"]).threads == 2
    assert main(["gen-scene", "--out", "x", "--threads", "0"]) == 2


def test_console_script(tmp_path):
    out = tmp_path / "s"
    proc = subprocess.run([sys.executable, "-m", "featnsr.cli", "gen-scene", "--views", "4", "--res", "16x16",
                           "--gt-points", "10", "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "featnsr.cli", "gen-scene"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_generation_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-scene", "--views", "4", "--res", "16x16", "--raw", "--gt-points", "100",
                     "--out", str(tmp_path / name)]) == 0
    for f in (tmp_path / "a").iterdir():
        if f.name != "manifest.json":
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
