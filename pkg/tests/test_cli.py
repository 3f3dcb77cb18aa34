import os

import numpy as np
import pytest

from pgscam.cli import main
from pgscam.io import load_ply, read_config, read_csv
from pgscam.segnet import Checkpoint


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--count", 3, "--seed", 7, "--out", root / "scenes") == 0
    assert run("train", "--data", root / "scenes", "--epochs", 2, "--out-checkpoint", root / "m.pgsc") == 0
    return root


def test_synth_writes_reloadable_scenes(workspace, tmp_path):
    files = sorted(os.listdir(workspace / "scenes"))
    assert [f for f in files if f.endswith(".ply")] == ["scene_0000.ply", "scene_0001.ply", "scene_0002.ply"]
    run("synth", "--count", 3, "--seed", 7, "--out", tmp_path)
    for f in ("scene_0000.ply", "scene_0002.ply"):
        assert (tmp_path / f).read_bytes() == (workspace / "scenes" / f).read_bytes()
    cloud = load_ply(workspace / "scenes" / "scene_0001.ply", 5)
    assert cloud.labels is not None and len(cloud) > 1000


def test_train_outputs(workspace):
    ckpt = Checkpoint.load(workspace / "m.pgsc")
    assert ckpt.spec.num_classes == 5
    header, rows = read_csv(workspace / "m_loss.csv")
    assert len(rows) == 2
    assert (workspace / "m_loss.png").read_bytes()[:4] == b"\x89PNG"


def test_explain_all_layers_writes_eight_ply(workspace, tmp_path):
    code = run("explain", "--scene", workspace / "scenes" / "scene_0000.ply", "--checkpoint",
               workspace / "m.pgsc", "--class", "ground", "--layers", "all", "--out", tmp_path)
    assert code == 0
    plys = sorted(f for f in os.listdir(tmp_path) if f.endswith(".ply"))
    assert len(plys) == 8
    header, rows = read_csv(next(tmp_path.glob("*_saliency_*.csv")))
    assert header[:5] == ["index", "x", "y", "z", "A1"]
    values = np.array([[float(v) for v in r[4::2]] for r in rows])
    assert values.min() >= 0 and values.max() <= 1
    assert any(f.endswith(".png") for f in os.listdir(tmp_path))
    assert read_config(tmp_path / "explain_config.txt")["layers"] == "all"


def test_pointdrop_zero_budget_is_baseline(workspace, tmp_path):
    code = run("pointdrop", "--scene", workspace / "scenes" / "scene_0001.ply", "--checkpoint",
               workspace / "m.pgsc", "--class", "0", "--budget", "0", "--mode", "both", "--out", tmp_path)
    assert code == 0
    for mode in ("high", "low"):
        header, rows = read_csv(next(tmp_path.glob(f"*_pointdrop_{mode}.csv")))
        assert header[:4] == ["step", "removed", "target_iou", "miou"]
        assert len(rows) == 1 and rows[0][1] == "0"


def test_embed(workspace, tmp_path):
    code = run("embed", "--scene", workspace / "scenes" / "scene_0002.ply", "--checkpoint",
               workspace / "m.pgsc", "--layer", "A3", "--out", tmp_path)
    assert code == 0
    header, rows = read_csv(next(tmp_path.glob("*_embed_A3.csv")))
    assert header == ["x2d", "y2d", "pred", "gt", "point_index", "m_index"]


@pytest.mark.parametrize("extra", [["--class", "spaceship"], ["--class", "9"],
                                   ["--class", "car", "--layers", "A1,B2"]])
def test_usage_errors_exit_2(workspace, tmp_path, extra):
    code = run("explain", "--scene", workspace / "scenes" / "scene_0000.ply", "--checkpoint",
               workspace / "m.pgsc", "--out", tmp_path, *extra)
    assert code == 2


def test_missing_file_exits_1(workspace, tmp_path):
    code = run("explain", "--scene", tmp_path / "nope.ply", "--checkpoint", workspace / "m.pgsc",
               "--class", "car", "--out", tmp_path)
    assert code == 1


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 2


def test_config_file_supplies_and_flags_override(workspace, tmp_path):
    cfg = tmp_path / "synth.txt"
    cfg.write_text("count = 2\nseed = 7\n")
    assert run("--config", cfg, "synth", "--out", tmp_path / "a") == 0
    assert len(list((tmp_path / "a").glob("*.ply"))) == 2
    assert run("--config", cfg, "synth", "--count", 1, "--out", tmp_path / "b") == 0
    assert len(list((tmp_path / "b").glob("*.ply"))) == 1
    cfg.write_text("colour = red\n")
    with pytest.raises(SystemExit) as exc:
        run("--config", cfg, "synth", "--out", tmp_path / "c")
    assert exc.value.code == 2


def test_gradcheck_passes_and_detects_sabotage(capsys):
    assert run("gradcheck") == 0
    assert "RESULT: PASS" in capsys.readouterr().out
    assert run("gradcheck", "--inject-fault", "relu") == 1
    assert "FAIL" in capsys.readouterr().out
