import io
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from carparse.cli import run


def _run(argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def _manifest(d):
    return json.loads((Path(d) / "manifest.json").read_text())


def test_synth_zero_scenes(tmp_path):
    code, out, _ = _run(["synth-scenes", "--count", "0", "--out", tmp_path])
    assert code == 0
    m = _manifest(tmp_path)
    assert m["outputs"] == [] and m["command"] == "synth-scenes"
    assert "timestamp" not in json.dumps(m)


def test_gradcheck_command(tmp_path):
    code, out, _ = _run(["gradcheck", "--points", "10", "--out", tmp_path])
    assert code == 0
    report = json.loads(out)
    assert report["passed"] and all(r["max_relative_error"] < 1e-4 for r in report["table"])


def test_error_json_and_exit_code(tmp_path):
    code, out, err = _run(["eval", "aos", "--pred", tmp_path / "nope.json", "--gt", tmp_path / "nope.json",
                           "--out", tmp_path])
    assert code == 2
    e = json.loads(err)
    assert e["command"] == "eval" and e["error"] and e["message"]
    code, _, err = _run(["not-a-command"])
    assert code == 2 and json.loads(err)["error"] == "usage"
    code, _, err = _run(["eval", "a3dp", "--out", tmp_path])
    assert code == 2 and "--scenes" in json.loads(err)["message"]


def test_bad_config_is_reported(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": True}))
    code, _, err = _run(["stats", "--count", "1", "--config", cfg, "--out", tmp_path / "o"])
    assert code == 2 and "bogus" in json.loads(err)["message"]


def test_eval_aos_and_iou(tmp_path):
    boxes = {"images": [[{"box": [0, 0, 10, 10], "azimuth": 0.5, "score": 0.9}]]}
    (tmp_path / "b.json").write_text(json.dumps(boxes))
    code, out, _ = _run(["eval", "aos", "--pred", tmp_path / "b.json", "--gt", tmp_path / "b.json",
                         "--out", tmp_path, "--format", "csv"])
    assert code == 0
    assert out.splitlines() == ["AP,AOS,OS", "1.0,1.0,1.0"]
    lab = np.zeros((20, 20), np.uint16)
    lab[5:10, 5:10] = 3
    Image.fromarray(lab).save(tmp_path / "l.png")
    code, out, _ = _run(["eval", "iou", "--pred", tmp_path / "l.png", "--gt", tmp_path / "l.png",
                         "--out", tmp_path])
    assert code == 0 and json.loads(out)["mIoU"] == 1.0


def test_geometry_commands(tmp_path, car_mesh):
    from carparse.geometry import save_obj

    save_obj(car_mesh, tmp_path / "car.obj")
    code, out, _ = _run(["remesh", tmp_path / "car.obj", "--spacing", "0.1", "--out", tmp_path / "r"])
    assert code == 0 and json.loads(out)["points"] > 0
    code, out, _ = _run(["sample-shape", "--count", "2", "--out", tmp_path / "s"])
    assert code == 0
    with np.load(tmp_path / "s" / "shapes.npz") as f:
        assert f["params"].shape == (2, 22)


def _pipeline(root, seed):
    root = Path(root)
    assert _run(["build-space", "--seed", seed, "--out", root / "space"])[0] == 0
    space = root / "space" / "space.cpss"
    assert _run(["synth-scenes", "--seed", seed, "--count", 2, "--space", space, "--out", root / "synth"])[0] == 0
    assert _run(["solve-pose", "--seed", seed, "--space", space, "--scenes", root / "synth" / "scenes",
                 "--out", root / "solve"])[0] == 0
    code, table, _ = _run(["eval", "a3dp", "--seed", seed, "--space", space, "--scenes", root / "synth" / "scenes",
                           "--poses", root / "solve" / "poses.json", "--format", "csv", "--out", root / "eval"])
    assert code == 0
    return table


def test_pipeline_is_deterministic(tmp_path):
    a = _pipeline(tmp_path / "a", 42)
    b = _pipeline(tmp_path / "b", 42)
    assert a == b
    assert a.splitlines()[0] == "mode,mean,c-l,c-s,predictions,ground_truth"
    for name in ("scene_00000_part.png", "scene_00001_instance.png", "scene_00001_depth.f32"):
        assert (tmp_path / "a/synth/scenes" / name).read_bytes() == (tmp_path / "b/synth/scenes" / name).read_bytes()


def test_rerun_from_manifest(tmp_path):
    assert _run(["stats", "--seed", 9, "--count", 3, "--out", tmp_path / "a"])[0] == 0
    assert _run(["stats", "--config", tmp_path / "a" / "manifest.json", "--count", 3, "--out", tmp_path / "b"])[0] == 0
    assert (tmp_path / "a/stats.json").read_bytes() == (tmp_path / "b/stats.json").read_bytes()
    assert _manifest(tmp_path / "a")["config_hash"] == _manifest(tmp_path / "b")["config_hash"]
