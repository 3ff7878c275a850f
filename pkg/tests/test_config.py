import pytest
import yaml

from renderflow.config import RunConfig, build_config, load_config, parse_override
from renderflow.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_config(path).to_dict() == RunConfig().to_dict()
    assert load_config().to_dict() == RunConfig().to_dict()


def test_sigma_override_reaches_the_dump():
    cfg = load_config(overrides=["bridge.sigma=0.005"])
    assert yaml.safe_load(cfg.dump())["bridge"]["sigma"] == 0.005
    cfg = load_config(overrides=["bridge.sigma=0.02"])
    assert cfg.train_config().bridge.sigma == 0.02
    assert cfg.inverse_config().bridge.sigma == 0.02


def test_dump_round_trip(tmp_path):
    cfg = load_config(overrides=["train.lr=0.001", "net.dim=32", "infer.steps=4", "eval.gaps=[8, 32]"])
    path = tmp_path / "dump.yaml"
    path.write_text(cfg.dump())
    assert load_config(path).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("override,path", [
    ("train.clip_frames=0", "train.clip_frames"),
    ("train.lr=-1", "train.lr"),
    ("train.steps=many", "train.steps"),
    ("train.learning_rate=0.1", "train.learning_rate"),
    ("bridge.sigma=-0.5", "bridge.sigma"),
    ("infer.overlap=9", "infer.overlap"),
    ("net.heads=3", "net.heads"),
    ("dataset.n_objects=20", "dataset.n_objects"),
    ("eval.split=holdout", "eval.split"),
    ("inverse.lora_rank=0", "inverse.lora_rank"),
])
def test_errors_name_the_dotted_path(override, path):
    with pytest.raises(ConfigError) as info:
        load_config(overrides=[override])
    assert path in str(info.value)


def test_unknown_section_and_bad_shapes(tmp_path):
    with pytest.raises(ConfigError, match="training"):
        build_config({"training": {}})
    with pytest.raises(ConfigError):
        build_config({"train": [1, 2]})
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_type_checks():
    with pytest.raises(ConfigError, match="infer.use_keyframes"):
        load_config(overrides=["infer.use_keyframes=3"])
    assert load_config(overrides=["train.lr=1"]).train.lr == 1.0


def test_parse_override():
    assert parse_override("train.betas=[0.8, 0.9]") == (["train", "betas"], [0.8, 0.9])
    for bad in ("train.lr", "lr=1", "a.b.c=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_file_and_overrides_merge(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  lr: 0.002\n  steps: 10\n")
    cfg = load_config(path, ["train.steps=20"])
    assert cfg.train.lr == 0.002 and cfg.train.steps == 20
