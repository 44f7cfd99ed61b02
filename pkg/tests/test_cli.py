import json
import subprocess
import sys

import numpy as np
import pytest

from muc.body_model import read_obj
from muc.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from muc.metrics import read_reports_csv
from muc.pipeline import read_sweep_csv

TINY = {
    "data": {"n_cameras": 3, "train_scenes": 12, "val_scenes": 4, "test_scenes": 5},
    "srn": {"shape_res": [16, 16], "face_res": [8, 8], "base_channels": 4, "attn_dim": 4, "reducer_hidden": [8]},
    "jrn": {"hidden": [8]},
    "optimizer": {"epochs": 1},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps({**TINY, "out_dir": str(root / "out")}))
    assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    return cfg, root / "out"


def test_gen_data_and_train_outputs(run):
    _, out = run
    for name in ("asset.muca", "config.json", "train.jsonl", "val.jsonl", "test.jsonl", "checkpoint.mucw",
                 "loss_log.csv"):
        assert (out / name).exists(), name
    assert len((out / "loss_log.csv").read_text().splitlines()) == 2


def test_eval_writes_sweep(run):
    cfg, out = run
    assert main(["eval", "--config", str(cfg), "--cameras", "1,3"]) == EXIT_OK
    rows = read_sweep_csv(out / "eval_sweep.csv")
    assert [r["n_cameras"] for r in rows] == [1, 3]
    assert len(read_reports_csv(out / "eval_scenes.csv")) == 10


def test_fuse_and_export(run):
    cfg, out = run
    assert main(["fuse", "--config", str(cfg), "--scene", "test-00002", "--cameras", "2"]) == EXIT_OK
    v, vn, f = read_obj(out / "fused_test-00002_k2.obj")
    assert len(v) == len(vn) == 200
    assert set(np.load(out / "fused_test-00002_k2.npz")) == {"p_body", "p_hand", "p_shape", "p_face"}
    assert main(["export", "--config", str(cfg), "--scene", "test-00001"]) == EXIT_OK
    assert (out / "gt_test-00001.obj").exists()


def test_export_template_without_data(tmp_path):
    assert main(["export", "--out", str(tmp_path)]) == EXIT_OK
    assert len(read_obj(tmp_path / "template.obj")[0]) == 200


def test_config_errors(run, tmp_path):
    cfg, _ = run
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optimizer": {"momentum": 1}}))
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["eval", "--config", str(cfg), "--cameras", "a,b"]) == EXIT_CONFIG
    assert main(["fuse", "--config", str(cfg), "--cameras", "9"]) == EXIT_CONFIG
    assert main(["fuse", "--config", str(cfg), "--scene", "nope"]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_io_errors(run, tmp_path):
    cfg, out = run
    assert main(["train", "--out", str(tmp_path / "empty")]) == EXIT_IO
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == EXIT_IO
    broken = tmp_path / "b"
    broken.mkdir()
    (broken / "checkpoint.mucw").write_bytes(b"MUCWjunk")
    (broken / "test.jsonl").write_text((out / "test.jsonl").read_text())
    assert main(["eval", "--out", str(broken)]) == EXIT_IO


def test_numeric_failure_exit(monkeypatch, tmp_path):
    import muc.cli as cli
    from muc.pipeline import GradcheckEntry
    monkeypatch.setattr(cli, "run_gradcheck", lambda cfg, seed: [GradcheckEntry("conv2d", 0.5)])
    assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_NUMERIC
    assert (tmp_path / "gradcheck.csv").read_text().splitlines()[1].startswith("conv2d,0.5,0")


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "muc.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train", "fuse", "eval", "gradcheck", "export"):
        assert cmd in res.stdout
