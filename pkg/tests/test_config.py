import json

import pytest

from shadowsplat.config import DgsmSettings, TrainConfig, load_config
from shadowsplat.errors import InvalidInputError, InvalidParameterError


def test_defaults():
    """No config file gives the reduced default schedule."""
    cfg = load_config(None)
    assert cfg == TrainConfig()
    assert (cfg.stage1_steps, cfg.stage2_steps) == (3000, 2000)
    assert cfg.weights.normal_consistency == 0.05
    assert cfg.weights.novel == 0.2
    assert cfg.refinement.refresh_steps() == [500, 1000, 1500]
    assert cfg.dgsm.shadow_resolution == 128
    assert cfg.visibility == "fixed"


def test_full_scale_schedule():
    """The long schedule refreshes the material priors every 6000 steps."""
    cfg = TrainConfig.full_scale()
    assert (cfg.stage1_steps, cfg.stage2_steps) == (30000, 20000)
    assert cfg.refinement.refresh_steps() == [6000, 12000, 18000]


def test_save_and_load(tmp_path):
    """A saved config reads back equal, nested sections included."""
    cfg = TrainConfig(stage1_steps=10, stage2_steps=20, frozen=["positions", "sun_intensity"],
                      visibility="editable", threads=2)
    cfg.weights.distortion = 0.5
    cfg.dgsm.sampling = "nearest"
    path = tmp_path / "run.json"
    cfg.save(path)
    assert json.loads(path.read_text())["version"] == 1
    assert load_config(path) == cfg


def test_partial_document(tmp_path):
    """Keys left out keep their defaults."""
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"stage1_steps": 5, "lr": {"position": 1e-3}}))
    cfg = load_config(path)
    assert cfg.stage1_steps == 5
    assert cfg.lr.position == 1e-3
    assert cfg.lr.scale == TrainConfig().lr.scale


class TestInvalidConfigs:
    """Malformed documents are input errors."""

    def _write(self, tmp_path, data):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(data) if not isinstance(data, str) else data)
        return path

    def test_missing_file(self, tmp_path):
        with pytest.raises(InvalidInputError):
            load_config(tmp_path / "missing.json")

    def test_bad_json(self, tmp_path):
        with pytest.raises(InvalidInputError):
            load_config(self._write(tmp_path, "{not json"))

    def test_not_an_object(self, tmp_path):
        with pytest.raises(InvalidInputError):
            load_config(self._write(tmp_path, [1, 2]))

    def test_unknown_key(self, tmp_path):
        with pytest.raises(InvalidInputError, match="stage3_steps"):
            load_config(self._write(tmp_path, {"stage3_steps": 1}))

    def test_unknown_nested_key(self, tmp_path):
        with pytest.raises(InvalidInputError, match="config.weights"):
            load_config(self._write(tmp_path, {"weights": {"colour": 1.0}}))

    def test_section_must_be_object(self, tmp_path):
        with pytest.raises(InvalidInputError):
            load_config(self._write(tmp_path, {"densify": 3}))

    def test_unsupported_version(self, tmp_path):
        with pytest.raises(InvalidInputError):
            load_config(self._write(tmp_path, {"version": 2}))

    def test_invalid_values(self, tmp_path):
        with pytest.raises(InvalidParameterError):
            load_config(self._write(tmp_path, {"visibility": "soft"}))
        with pytest.raises(InvalidParameterError):
            load_config(self._write(tmp_path, {"weights": {"color": -1.0}}))
        with pytest.raises(InvalidParameterError):
            TrainConfig(threads=0)


class TestDgsmSettings:
    """Scene-relative shadow parameters."""

    def test_warmup(self):
        settings = DgsmSettings()
        assert settings.at(2.0, step=0).sharpness_k == pytest.approx(25.0)
        assert settings.at(2.0, step=4000).sharpness_k == pytest.approx(100.0)
        assert settings.at(2.0).sharpness_k == pytest.approx(400.0)

    def test_warmup_disabled(self):
        settings = DgsmSettings(warmup=False)
        assert settings.at(2.0, step=0).sharpness_k == pytest.approx(400.0)

    def test_invalid(self):
        with pytest.raises(InvalidParameterError):
            DgsmSettings(sampling="cubic")
        with pytest.raises(InvalidParameterError):
            DgsmSettings(shadow_resolution=0)
