import itertools
import json

import numpy as np
import pytest

from gapvision.cli import main
from gapvision.imageio import read_netpbm, write_netpbm
from gapvision.saliency import compute_saliency

from conftest import interior_texture


@pytest.fixture
def image(tmp_path):
    path = tmp_path / "img.pgm"
    write_netpbm(path, interior_texture(np.random.default_rng(0)))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    assert main(["gen-data", "--out", str(root), "--counts", "16,8,8", "--image-size", "40",
                 "--scale", "4", "--seed", "2"]) == 0
    return root


def test_saliency_writes_map_and_sidecar(tmp_path, image, capsys):
    out = tmp_path / "s.pgm"
    assert main(["saliency", "--in", str(image), "--out", str(out)]) == 0
    raw = np.frombuffer((tmp_path / "s.f64").read_bytes(), dtype="<f8").reshape(64, 64)
    assert np.array_equal(raw, compute_saliency(read_netpbm(image)).values)
    assert read_netpbm(out).shape == (64, 64, 1)
    assert "resolved config" in capsys.readouterr().err


def test_trace_hard_mask(tmp_path, image):
    js = tmp_path / "t.json"
    code = main(["trace", "--in", str(image), "--T", "15", "--mask", "hard:5", "--json", str(js),
                 "--overlay", str(tmp_path / "o.ppm"), "--dump-glimpses", str(tmp_path / "g")])
    assert code == 0
    trace = json.loads(js.read_text())
    assert set(trace) >= {"locations", "exhausted", "config"}
    locs = trace["locations"]
    assert len(locs) == 15 and not trace["exhausted"]
    for a, b in itertools.combinations(locs, 2):
        assert np.hypot(a[0] - b[0], a[1] - b[1]) > 5
    assert read_netpbm(tmp_path / "o.ppm").shape == (64, 64, 3)
    assert (tmp_path / "g" / "g_14_2.pgm").exists() and not (tmp_path / "g" / "g_15_0.pgm").exists()


def test_trace_soft_mask_and_log_polar(tmp_path, image):
    js = tmp_path / "t.json"
    assert main(["trace", "--in", str(image), "--mask", "soft:450", "--T", "3", "--json", str(js),
                 "--sensor", "log-polar", "--size", "16", "--radius", "12",
                 "--dump-glimpses", str(tmp_path / "g")]) == 0
    assert json.loads(js.read_text())["config"]["gap"]["mask"] == "soft"
    assert read_netpbm(tmp_path / "g" / "g_2_0.pgm").shape == (16, 16, 1)


def test_identical_runs_identical_bytes(tmp_path, image):
    outs = []
    for k in range(2):
        js = tmp_path / f"t{k}.json"
        main(["trace", "--in", str(image), "--json", str(js), "--policy", "random", "--seed", "4"])
        outs.append(js.read_bytes())
    assert outs[0] == outs[1]


def test_config_file_and_flag_override(tmp_path, image):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"gap": {"T": 4, "radius": 3.0}}))
    js = tmp_path / "t.json"
    assert main(["trace", "--in", str(image), "--json", str(js), "--config", str(cfg)]) == 0
    got = json.loads(js.read_text())
    assert len(got["locations"]) == 4 and got["config"]["gap"]["radius"] == 3.0
    assert main(["trace", "--in", str(image), "--json", str(js), "--config", str(cfg), "--T", "6"]) == 0
    assert len(json.loads(js.read_text())["locations"]) == 6


def test_usage_errors(capsys):
    assert main(["trace", "--in", "x.pgm", "--jsn", "t.json"]) == 1
    assert "--json" in capsys.readouterr().err
    assert main(["trian"]) == 1
    assert "train" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["trace", "--in", "x.pgm", "--json", "t.json", "--mask", "round"]) == 1


def test_runtime_errors(tmp_path, image):
    assert main(["saliency", "--in", str(tmp_path / "missing.pgm"), "--out", str(tmp_path / "s.pgm")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"gap": {"T": 0}}))
    assert main(["trace", "--in", str(image), "--json", str(tmp_path / "t.json"), "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"gap": {"colour": 1}}))
    assert main(["trace", "--in", str(image), "--json", str(tmp_path / "t.json"), "--config", str(bad)]) == 2


def test_gradcheck_exit_code(capsys):
    assert main(["gradcheck", "--model", "abstractor", "--dims", "toy"]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert main(["gradcheck", "--dims", "toy", "--tol", "1e-30"]) == 2


def test_gen_data_layout(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["splits"] == {"train": 16, "val": 8, "test": 8} and manifest["seed"] == 2
    assert (dataset / "train" / "labels.csv").read_text().startswith("filename,label,seed")


def test_gen_data_ood_and_rmts(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "o"), "--counts", "4,2,2",
                 "--test-family", "blob"]) == 0
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["test_family"] == "blob"
    assert main(["gen-data", "--out", str(tmp_path / "r"), "--counts", "2,2,2", "--task", "rmts"]) == 0


def test_train_eval_round_trip(tmp_path, dataset):
    run = tmp_path / "run"
    argv = ["train", "--data", str(dataset), "--out", str(run), "--dims", "toy", "--epochs", "2",
            "--lr", "1e-3", "--batch-size", "8", "--seed", "3"]
    assert main(argv) == 0
    report = json.loads((run / "report.json").read_text())
    assert main(["eval", "--checkpoint", str(run / "best.ckpt"), "--data", str(dataset)]) == 0
    ev = json.loads((run / "eval-test.json").read_text())
    assert ev["accuracy"]["test"] == report["accuracy"]["test"]
    first = {p.name: p.read_bytes() for p in run.iterdir() if p.name != "timing.json"}
    assert main(argv) == 0
    again = {p.name: p.read_bytes() for p in run.iterdir() if p.name != "timing.json"}
    assert first == again


def test_eval_geometry_mismatch(tmp_path, dataset):
    run = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out", str(run), "--dims", "toy", "--epochs", "1"]) == 0
    other = tmp_path / "big"
    assert main(["gen-data", "--out", str(other), "--counts", "2,2,2"]) == 0
    assert main(["eval", "--checkpoint", str(run / "best.ckpt"), "--data", str(other)]) == 2


def test_ablate(tmp_path, dataset):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(dataset), "--out", str(out), "--dims", "toy", "--epochs", "1",
                 "--modes", "both,where-only", "--seeds", "0,1"]) == 0
    table = json.loads((out / "ablation.json").read_text())
    assert set(table) == {"both", "where-only"} and len(table["both"]["runs"]) == 2
    assert main(["ablate", "--data", str(dataset), "--out", str(out), "--modes", "bothh"]) == 2
