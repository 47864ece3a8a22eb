import io
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from asbunet.cli import main, read_mask, read_rgb, write_gray, write_rgb


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    return code, out.getvalue()


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and " " not in line)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", d / "data", "--n", 3, "--size", 32, "--seed", 5)[0] == 0
    assert run("build", "--out", d / "m.asbu", "--input-size", 32)[0] == 0
    return d


def test_rf_report_default(tmp_path):
    code, text = run("rf-report", "--scaling", "1/16", "--plot", tmp_path / "rf.svg")
    assert code == 0
    values = kv(text)
    assert values["final_rf"] == "393" and values["near_linear"] == "true"
    assert "conv1" in text
    assert (tmp_path / "rf.svg").read_text().startswith("<?xml")


def test_rf_report_geometric_flagged():
    code, text = run("rf-report", "--geometric-stack", "--dilations", "1,2,4,8,16,32,64")
    assert code == 0 and kv(text)["near_linear"] == "false"


def test_build_reports_shapes(tmp_path):
    code, text = run("build", "--scaling", "1/8", "--input-size", 64, "--spec-out", tmp_path / "s.json")
    values = kv(text)
    assert code == 0 and values["bottleneck"].endswith("x8x8")
    assert (tmp_path / "s.json").read_text().startswith("{")
    code, _ = run("build", "--input-size", 100)
    assert code == 1


@pytest.mark.parametrize("argv", [["frobnicate"], ["rf-report", "--bogus"], [], ["build", "--scaling", "1/4"],
                                  ["rf-report", "--dilations", "a,b"]])
def test_usage_errors(argv, capsys):
    assert run(*argv)[0] == 2
    assert capsys.readouterr().err


def test_eval_mismatch(workdir, tmp_path, capsys):
    preds = tmp_path / "preds"
    preds.mkdir()
    write_gray(preds / "other.png", np.zeros((32, 32)))
    code, _ = run("eval", "--labels", workdir / "data" / "labels", "--preds", preds)
    assert code == 1
    assert "pair" in capsys.readouterr().err


def test_eval_identical_scores_one(workdir, tmp_path):
    labels = workdir / "data" / "labels"
    code, text = run("eval", "--labels", labels, "--preds", labels, "--plot", tmp_path / "h.png")
    values = kv(text)
    assert code == 0 and float(values["mean_score"]) == 1.0 and values["count"] == "3"
    assert (tmp_path / "h.png").read_bytes()[:4] == b"\x89PNG"


def test_eval_rejects_grey_masks(workdir, tmp_path):
    preds = tmp_path / "grey"
    preds.mkdir()
    for p in (workdir / "data" / "labels").glob("*.png"):
        write_gray(preds / p.name, np.full((32, 32), 128))
    assert run("eval", "--labels", workdir / "data" / "labels", "--preds", preds)[0] == 1


def test_infer_mask_has_input_dims(workdir, tmp_path):
    image = workdir / "data" / "images" / "0000.png"
    code, text = run("infer", "--ckpt", workdir / "m.asbu", "--image", image, "--out", tmp_path / "mask.png",
                     "--heatmap", tmp_path / "heat.png")
    assert code == 0
    mask = np.asarray(Image.open(tmp_path / "mask.png"))
    assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0, 255}
    assert np.asarray(Image.open(tmp_path / "heat.png")).shape == (32, 32)


def test_threshold_zero_is_full_foreground(workdir, tmp_path):
    image = workdir / "data" / "images" / "0001.png"
    code, text = run("infer", "--ckpt", workdir / "m.asbu", "--image", image, "--out", tmp_path / "m.png",
                     "--threshold", 0.0)
    assert code == 0 and float(kv(text)["foreground_fraction"]) == 1.0
    assert read_mask(tmp_path / "m.png").all()


def test_indivisible_image(workdir, tmp_path):
    write_rgb(tmp_path / "odd.png", np.random.default_rng(0).random((3, 30, 37)))
    argv = ["infer", "--ckpt", workdir / "m.asbu", "--image", tmp_path / "odd.png", "--out", tmp_path / "o.png"]
    assert run(*argv)[0] == 1
    assert run(*argv, "--resize")[0] == 0
    assert read_mask(tmp_path / "o.png").shape == (30, 37)


def test_corrupt_checkpoint(workdir, tmp_path):
    data = bytearray((workdir / "m.asbu").read_bytes())
    data[100] ^= 1
    (tmp_path / "bad.asbu").write_bytes(bytes(data))
    image = workdir / "data" / "images" / "0000.png"
    assert run("infer", "--ckpt", tmp_path / "bad.asbu", "--image", image, "--out", tmp_path / "x.png")[0] == 1


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 8, 9)) / 255.0
    write_rgb(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_rgb(tmp_path / "a.png"), img)


def test_background_dataset(tmp_path):
    code, _ = run("gen-data", "--out", tmp_path, "--n", 2, "--size", 32, "--background")
    assert code == 0
    assert not read_mask(tmp_path / "labels" / "0000.png").any()


def test_train_quantize_infer_pipeline(tmp_path):
    (tmp_path / "cfg.txt").write_text("batch_size = 2\nepochs = 1\nsplit = 80:20\n")
    code, text = run("train", "--config", tmp_path / "cfg.txt", "--out", tmp_path / "t.asbu", "--samples", 5,
                     "--image-size", 32, "--log", tmp_path / "log.csv", "--plot", tmp_path / "loss.png")
    values = kv(text)
    assert code == 0 and (values["train_images"], values["test_images"], values["steps"]) == ("4", "1", "2")
    # misdetections can push an untrained model's score below zero
    assert float(values["heldout_score"]) <= 1.0
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss" and len(lines) == 3
    assert (tmp_path / "loss.png").exists()

    code, text = run("quantize", "--ckpt", tmp_path / "t.asbu", "--out", tmp_path / "q.asbu", "--calib-samples", 2,
                     "--image-size", 32, "--eval-samples", 2)
    values = kv(text)
    assert code == 0 and float(values["size_ratio"]) < 0.3
    assert float(values["mean_abs_deviation"]) < 0.05

    write_rgb(tmp_path / "in.png", np.random.default_rng(1).random((3, 32, 32)))
    code, _ = run("infer", "--ckpt", tmp_path / "q.asbu", "--image", tmp_path / "in.png", "--out", tmp_path / "qm.png")
    assert code == 0 and read_mask(tmp_path / "qm.png").shape == (32, 32)


def test_bad_config_is_domain_error(tmp_path):
    (tmp_path / "cfg.txt").write_text("batch = 2\n")
    assert run("train", "--config", tmp_path / "cfg.txt", "--out", tmp_path / "t.asbu")[0] == 1


def test_outputs_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        run("gen-data", "--out", d, "--n", 1, "--size", 32, "--seed", 9)
        run("build", "--out", d / "m.asbu", "--seed", 3)
        run("infer", "--ckpt", d / "m.asbu", "--image", d / "images" / "0000.png", "--out", d / "mask.png",
            "--heatmap", d / "heat.png")
        run("rf-report", "--plot", d / "rf.svg")
        outs.append([(d / p).read_bytes() for p in ("images/0000.png", "labels/0000.png", "m.asbu", "mask.png",
                                                     "heat.png", "rf.svg")])
    assert outs[0] == outs[1]


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "asbunet.cli", "rf-report", "--scaling", "1/8"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and "final_rf=305" in res.stdout
    res = subprocess.run([sys.executable, "-m", "asbunet.cli", "nope"], capture_output=True, text=True, check=False)
    assert res.returncode == 2 and res.stderr and not res.stdout
