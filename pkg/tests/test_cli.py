import json
import subprocess
import sys

import numpy as np
import pytest

from satmpi.cli import main
from satmpi.geo import GeoRef, meters_per_degree
from satmpi.io import read_dsm, read_pfm, read_points_csv, write_pfm, write_points_csv
from satmpi.rpc import RpcModel, write_rpc
from satmpi.synth import fixture_spec, make_affine_rpc, make_scene

REF = GeoRef(30.3, -81.7, 15.5)


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_scene")
    make_scene(fixture_spec("flat", size=(16, 16), n_targets=2, slope=0.1), root)
    return root / "manifest.json"


def test_eval_identical_images(tmp_path, rng, capsys):
    img = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    write_pfm(tmp_path / "a.pfm", img)
    assert main(["eval", "--pred-rgb", str(tmp_path / "a.pfm"), "--truth-rgb",
                 str(tmp_path / "a.pfm"), "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["psnr"] == 99.0 and out["ssim"] == pytest.approx(1.0, abs=1e-12)


def test_eval_dsm_text_report(scene_dirs, capsys):
    dsm = str(scene_dirs["ramp"].parent / "truth_dsm.bin")
    assert main(["eval", "--pred-dsm", dsm, "--truth-dsm", dsm]) == 0
    assert capsys.readouterr().out == "mae=0.0\nme=0.0\n"


def test_rpc_project_matches_closed_form(tmp_path, rng):
    slope, az, gsd = 0.4, 90.0, 0.5
    rpc = make_affine_rpc(REF, (64, 64), gsd, (0.0, 31.0), slope, az)
    write_rpc(rpc, tmp_path / "cam.rpc")
    lat = REF.lat + rng.uniform(-1e-4, 1e-4, 200)
    lon = REF.lon + rng.uniform(-1e-4, 1e-4, 200)
    hei = rng.uniform(0, 31, 200)
    write_points_csv(tmp_path / "in.csv", ("lat", "lon", "hei"), (lat, lon, hei))
    assert main(["rpc", "project", str(tmp_path / "cam.rpc"), "-i", str(tmp_path / "in.csv"),
                 "-o", str(tmp_path / "out.csv")]) == 0
    samp, line = read_points_csv(tmp_path / "out.csv", ("samp", "line"))
    # oracle: ground meters from the reference, shifted against the lean by slope*dh
    m_lat, m_lon = meters_per_degree(REF.lat)
    east = (lon - REF.lon) * m_lon - slope * np.sin(np.deg2rad(az)) * (hei - 15.5)
    north = (lat - REF.lat) * m_lat + slope * np.cos(np.deg2rad(az)) * (hei - 15.5)
    assert np.abs(samp - (31.5 + east / gsd)).max() <= 1e-6
    assert np.abs(line - (31.5 - north / gsd)).max() <= 1e-6


def test_rpc_localize_round_trip(tmp_path):
    rpc = make_affine_rpc(REF, (64, 64), 0.5, (0.0, 31.0), 0.4, 30.0)
    write_rpc(rpc, tmp_path / "cam.rpc")
    write_points_csv(tmp_path / "px.csv", ("samp", "line", "hei"),
                     (np.array([3.0, 40.5]), np.array([10.0, 60.0]), np.array([0.0, 20.0])))
    assert main(["rpc", "localize", str(tmp_path / "cam.rpc"), "-i", str(tmp_path / "px.csv"),
                 "-o", str(tmp_path / "geo.csv")]) == 0
    lat, lon, hei = read_points_csv(tmp_path / "geo.csv", ("lat", "lon", "hei"))
    s, l = rpc.project(lat, lon, hei)
    assert np.allclose(s, [3.0, 40.5], atol=1e-6) and np.allclose(l, [10.0, 60.0], atol=1e-6)


def test_localize_failure_exits_2(tmp_path, capsys):
    ns, one = np.zeros((4, 4, 4)), np.zeros((4, 4, 4))
    one[0, 0, 0] = 1.0
    ns[0, 0, 2], ns[0, 0, 1], ns[0, 0, 0] = 1.0, -1.0, 0.25  # (lon_n - 0.5)^2 >= 0
    nl = np.zeros((4, 4, 4))
    nl[0, 1, 0] = 1.0
    rpc = RpcModel(ns, one, nl, one, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 100.0, 0.0, 100.0)
    write_rpc(rpc, tmp_path / "bad.rpc")
    write_points_csv(tmp_path / "px.csv", ("samp", "line", "hei"),
                     (np.array([-50.0]), np.array([0.0]), np.array([0.0])))
    code = main(["rpc", "localize", str(tmp_path / "bad.rpc"), "-i", str(tmp_path / "px.csv"),
                 "-o", str(tmp_path / "out.csv")])
    assert code == 2
    assert "computation failed" in capsys.readouterr().err


def test_unknown_subcommand_exits_1():
    p = subprocess.run([sys.executable, "-m", "satmpi.cli", "frobnicate"], capture_output=True,
                       text=True)
    assert p.returncode == 1
    assert "invalid choice" in p.stderr


@pytest.mark.parametrize("argv", [
    ["eval"],
    ["eval", "--pred-rgb", "x.pfm"],
    ["render", "missing.json", "--mpi", "m.bin", "-o", "out"],
    ["--threads", "0", "eval"],
    ["synth", "flat"],
])
def test_usage_and_input_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_synth_fit_render_warp(small_scene, tmp_path):
    root = small_scene.parent
    out = tmp_path / "fit"
    assert main(["--deterministic", "fit", str(small_scene), "-o", str(out), "--iterations", "5"]) == 0
    for name in ("mpi.bin", "rgb.pfm", "rgb.ppm", "altitude.pfm", "pan.pfm", "trace.csv",
                 "config.json", "dsm.bin", "dsm.bin.json"):
        assert (out / name).exists(), name
    assert json.loads((out / "config.json").read_text())["iterations"] == 5
    dsm, grid = read_dsm(out / "dsm.bin")
    assert dsm.values.shape == (grid.rows, grid.cols)

    r = tmp_path / "render"
    assert main(["render", str(small_scene), "--mpi", str(out / "mpi.bin"), "-o", str(r)]) == 0
    assert read_pfm(r / "rgb.pfm").shape == (16, 16, 3)
    w = tmp_path / "warp"
    assert main(["warp", str(small_scene), "--mpi", str(out / "mpi.bin"), "--rpc",
                 str(root / "east.rpc"), "--size", "8", "12", "-o", str(w)]) == 0
    assert read_pfm(w / "altitude.pfm").shape == (8, 12)


def test_deterministic_fit_is_byte_identical(small_scene, tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["--deterministic", "--seed", "7", "fit", str(small_scene), "-o", str(out),
                     "--iterations", "8"]) == 0
        runs.append(out)
    for name in ("mpi.bin", "trace.csv", "rgb.pfm", "dsm.bin", "config.json"):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes(), name


def test_fit_config_file(small_scene, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 3, "weights": {"lambda3": 0.0}, "optimizer": "gd",
                               "learning_rate": 0.5}))
    out = tmp_path / "o"
    assert main(["fit", str(small_scene), "-o", str(out), "--config", str(cfg),
                 "--preset", "default"]) == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["weights"]["lambda3"] == 0.0 and saved["color_sharing"] == "plane"
    cfg.write_text(json.dumps({"iterations": 3, "bogus": 1}))
    assert main(["fit", str(small_scene), "-o", str(out), "--config", str(cfg)]) == 1


def test_synth_command(tmp_path):
    assert main(["synth", "hill", "-o", str(tmp_path / "s"), "--size", "16", "16",
                 "--targets", "1"]) == 0
    m = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert m["schema"] == 1 and len(m["targets"]) == 1 and m["size"] == [16, 16]


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert capsys.readouterr().out.startswith("satmpi ")
