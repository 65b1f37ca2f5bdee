import json

import pytest

from waydcm.config import ConfigError, RunConfig, from_dict, load
from waydcm.synth import GenConfig


def test_defaults_round_trip():
    cfg = RunConfig()
    assert from_dict(cfg.to_dict()) == cfg
    assert from_dict(json.loads(json.dumps(cfg.to_dict()))).hash() == cfg.hash()


def test_generator_defaults_agree():
    assert RunConfig().gen_config() == GenConfig()


def test_hash_tracks_content():
    a = RunConfig()
    assert len(a.hash()) == 12 and a.hash() == RunConfig().hash()
    assert a.with_overrides(seed=1).hash() != a.hash()
    assert from_dict({"train": {"epochs": 3}}).hash() != a.hash()


@pytest.mark.parametrize(
    "doc",
    [
        {"bogus": 1},
        {"train": {"epochz": 3}},
        {"train": {"epochs": "3"}},
        {"train": {"epochs": 2.5}},
        {"train": {"variant": "GRU"}},
        {"train": {"lr": True}},
        {"generate": {"speed": [1.0]}},
        {"generate": {"noise_sigma": -1.0}},
        {"generate": {"true_beta": {"dir": -1.0}}},
        {"seed": "0"},
        {"grid": []},
        [],
    ],
)
def test_invalid_documents_rejected(doc):
    with pytest.raises(ConfigError):
        from_dict(doc)


def test_overrides_win(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "train": {"variant": "LSTM"}, "paths": {"out": "x"}}))
    cfg = load(p).with_overrides(seed=5, variant="TrajDCM", out=str(tmp_path / "o"), scenes=None)
    assert cfg.seed == 5 and cfg.train.variant == "TrajDCM" and cfg.paths.out == str(tmp_path / "o")
    assert cfg.gen_config().seed == 5 and cfg.train_config().seed == 5
    assert cfg.model_base().features == ("dir", "occ", "coll")


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load(bad)


def test_int_accepted_for_float_setting():
    assert from_dict({"train": {"lr": 1}}).train.lr == 1.0


def test_hash_ignores_paths():
    assert RunConfig().with_overrides(out="elsewhere", scenes="x.jsonl").hash() == RunConfig().hash()
