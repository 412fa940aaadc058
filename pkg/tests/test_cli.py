import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from fieldforge.cli import load_frame_dir, main
from fieldforge.evaluation import read_kv
from fieldforge.frames import read_pgm
from fieldforge.learn import load_params
from fieldforge.plantsim import PlantStructure, grow
from fieldforge.pipeline import PipelineConfig
from fieldforge.scene import plant_seed

FF = [sys.executable, "-m", "fieldforge.cli"]


def _scene(tmp_path, master=5):
    ranges = tmp_path / "ranges.toml"
    ranges.write_text("width = [32, 32]\nheight = [32, 32]\nframe_count = [2, 2]\n")
    assert main(["scene", "--master", str(master), "--count", "2", "--ranges", str(ranges),
                 "--out-dir", str(tmp_path / "scenes")]) == 0
    return tmp_path / "scenes" / "scene_0000.toml"


def test_grow(tmp_path, capsys):
    out = tmp_path / "p.txt"
    assert main(["grow", "--seed", "9", "--days", "12", "--out", str(out)]) == 0
    params = PipelineConfig(master_seed=0).load_plant_params()
    assert PlantStructure.load(out).to_text() == grow(params, 9, 12.0).to_text()
    assert "nodes" in capsys.readouterr().out


def test_scene_and_render(tmp_path):
    scene = _scene(tmp_path)
    assert (tmp_path / "scenes" / "scene_0001.toml").exists()
    assert main(["render", "--scene", str(scene), "--out", str(tmp_path / "r")]) == 0
    frames = load_frame_dir(tmp_path)
    assert len(frames) == 2 and frames[0].rgb.shape == (32, 32, 3)
    assert main(["render", "--scene", str(scene), "--time", "0.0", "--out", str(tmp_path / "one")]) == 0
    assert (tmp_path / "one.ppm").read_bytes() == (tmp_path / "r_frame_00.ppm").read_bytes()


def test_render_missing_plant_file(tmp_path, capsys):
    scene = _scene(tmp_path)
    (tmp_path / "empty").mkdir()
    assert main(["render", "--scene", str(scene), "--plants", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "r")]) == 1
    assert "missing plant file" in capsys.readouterr().err


def test_validate_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("master_seed = 1\n")
    assert main(["validate", "--config", str(cfg)]) == 0
    assert "workers = 1" in capsys.readouterr().out
    cfg.write_text("master_seed = 1\nwokers = 2\n")
    assert main(["validate", "--config", str(cfg)]) == 2
    assert "did you mean 'workers'" in capsys.readouterr().err


def test_seeds(capsys):
    assert main(["seeds", "--master", "42", "--fields", "growth_seed"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[:2] == ["# master_seed=42", "scene plant field seed"]
    assert lines[2] == f"0 0 growth_seed {plant_seed(42, 0, 0, 'growth_seed')}"
    assert main(["seeds", "--master", "42", "--scenes", "0"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2


def test_coordinator_worker_predict_eval(tmp_path):
    scene = _scene(tmp_path)
    fdir = tmp_path / "frames"
    fdir.mkdir()
    assert main(["render", "--scene", str(scene), "--out", str(fdir / "scene_0000")]) == 0

    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    params_out = tmp_path / "params.bin"
    codes = {}
    coord = threading.Thread(target=lambda: codes.setdefault("c", main(
        ["coordinator", "--bind", f"127.0.0.1:{port}", "--workers", "1", "--steps", "3",
         "--lr", "0.3", "--seed", "1", "--out", str(params_out)])))
    coord.start()
    worker = ["worker", "--coordinator", f"127.0.0.1:{port}", "--frames", str(fdir), "--batch", "2"]
    for _ in range(100):  # until the coordinator listens
        if main(worker) == 0:
            break
        time.sleep(0.05)
    coord.join(timeout=30)
    assert codes.get("c") == 0
    assert len(load_params(params_out)) == 835

    pred = tmp_path / "pred"
    assert main(["predict", "--params", str(params_out), "--frames", str(fdir), "--out-dir", str(pred)]) == 0
    assert len(list(pred.glob("*.pgm"))) == 2
    report = tmp_path / "rep.kv"
    assert main(["eval", "--pred", str(pred), "--gt", str(fdir), "--depth", str(fdir),
                 "--out", str(report)]) == 0
    kv = read_kv(report)
    assert 0 <= float(kv["mean_iou"]) <= 1
    assert report.with_suffix(".txt").exists()
    assert len(list((tmp_path / "rep_diff").glob("*.pgm"))) == 2


def test_eval_perfect_prediction(tmp_path):
    scene = _scene(tmp_path)
    fdir = tmp_path / "frames"
    fdir.mkdir()
    main(["render", "--scene", str(scene), "--out", str(fdir / "scene_0000")])
    report = tmp_path / "rep.kv"
    assert main(["eval", "--pred", str(fdir), "--gt", str(fdir), "--depth", str(fdir), "--out", str(report)]) == 0
    kv = read_kv(report)
    assert float(kv["mean_iou"]) == 1.0 and float(kv["boundary_f1"]) == 1.0
    for p in (tmp_path / "rep_diff").glob("*.pgm"):
        assert not read_pgm(p).any()


def test_broker_stream_collect(tmp_path):
    scene = _scene(tmp_path)
    broker = subprocess.Popen(FF + ["broker"], stdout=subprocess.PIPE, text=True)
    try:
        addr = broker.stdout.readline().split()[-1]
        stream = subprocess.Popen(FF + ["stream", "--broker", addr, "--scene", str(scene), "--fps", "100"],
                                  stdout=subprocess.PIPE, text=True)
        session = stream.stdout.readline().split()[-1]
        out = tmp_path / "got"
        assert main(["collect", "--broker", addr, "--session", session, "--out-dir", str(out)]) == 0
        assert stream.wait(timeout=30) == 0
    finally:
        broker.terminate()
        broker.wait(timeout=10)
    main(["render", "--scene", str(scene), "--out", str(tmp_path / "ref")])
    for k in range(2):
        got = (out / f"scene_0000_frame_{k:02d}.ppm").read_bytes()
        assert got == (tmp_path / f"ref_frame_{k:02d}.ppm").read_bytes()
        assert np.array_equal(read_pgm(out / f"scene_0000_frame_{k:02d}.pgm"),
                              read_pgm(tmp_path / f"ref_frame_{k:02d}.pgm"))


def test_pipeline_command(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("master_seed = 3\nimage_width = 24\nimage_height = 24\nframes_per_scene = 1\n"
                   "steps = 3\nbatch_size = 1\nfps = 500.0\n")
    assert main(["pipeline", "--config", str(cfg), "--output-dir", str(tmp_path / "run")]) == 0
    assert "fieldforge pipeline report" in capsys.readouterr().out
    assert int(read_kv(tmp_path / "run" / "report.kv")["steps"]) == 3


def test_pipeline_command_failure_exit(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("master_seed = 3\nworkers = 0\n")
    assert main(["pipeline", "--config", str(cfg)]) == 2
    assert "workers" in capsys.readouterr().err


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["nope"])
