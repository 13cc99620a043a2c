import json

import pytest

from poiloc.config import ExperimentConfig, apply_overrides, load_config
from poiloc.errors import InvalidConfig


def test_defaults_validate_and_roundtrip():
    cfg = ExperimentConfig().validate()
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg


def test_overrides():
    cfg = apply_overrides(ExperimentConfig(), ["filter.tau_r=7", "scene.trajectory=walk",
                                               "regressor.hidden=[32, 32]"])
    assert cfg.filter.tau_r == 7.0 and isinstance(cfg.filter.tau_r, float)
    assert cfg.scene.trajectory == "walk"
    assert cfg.regressor.hidden == (32, 32)


@pytest.mark.parametrize("item", ["filter.nope=1", "nosection.x=1", "filter.tau_r"])
def test_bad_override(item):
    with pytest.raises(InvalidConfig):
        apply_overrides(ExperimentConfig(), [item])


def test_type_checks():
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict({"filter": {"tau_r": "five"}})
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict({"filter": 3})


def test_validation_errors():
    with pytest.raises(InvalidConfig):
        load_config(None, ["filter.bernoulli_p=0"])
    with pytest.raises(InvalidConfig):
        load_config(None, ["render.corruption_fraction=2"])


def test_load_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 4, "pipeline": {"n_iter": 10}}))
    cfg = load_config(p, ["seed=5"])
    assert cfg.seed == 5 and cfg.pipeline.n_iter == 10 and cfg.train_config().n_iter == 10
    p.write_text("{not json")
    with pytest.raises(InvalidConfig):
        load_config(p)
