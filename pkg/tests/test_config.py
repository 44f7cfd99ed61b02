import json

import pytest

from muc.config import REFERENCE_EPOCHS, REFERENCE_LR, ConfigError, RunConfig, load_config, save_config


def test_defaults():
    cfg = RunConfig()
    assert (cfg.optimizer.lr, cfg.optimizer.epochs, cfg.optimizer.batch_size) == (1e-3, 30, 8)
    assert cfg.temperature == 0.5 and cfg.procrustes_scale
    assert (REFERENCE_LR, REFERENCE_EPOCHS) == (3e-5, 20)
    assert cfg.srn.shape_res == (32, 32) and cfg.srn.face_res == (16, 16)


def test_json_round_trip(tmp_path):
    cfg = RunConfig(seed=7).replace(noise={"sigma_shape": 0.25}, srn={"shape_res": [16, 16]})
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.srn.shape_res == (16, 16) and back.noise.sigma_shape == 0.25


def test_partial_file_takes_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"optimizer": {"epochs": 3}}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.optimizer.epochs == 3 and cfg.optimizer.lr == 1e-3


@pytest.mark.parametrize("bad", [
    {"colour": 1},
    {"optimizer": {"epochs": 2, "momentum": 0.9}},
    {"optimizer": {"epochs": "ten"}},
    {"optimizer": {"lr": -1.0}},
    {"noise": {"distance_gain": 0.9}},
    {"srn": {"shape_res": [30, 32]}},
    {"jrn": {"hand_mode": "finger"}},
    {"loss_weights": {"smplx": 0, "joint2d": 0, "jrn": 0, "surface": 0}},
    {"temperature": 0},
    {"procrustes_scale": "yes"},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")
