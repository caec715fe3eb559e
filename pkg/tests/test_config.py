import json

import pytest

from promptiqa.config import RunConfig, build_model, load_config
from promptiqa.errors import ConfigError, InputError
from promptiqa.model import ImageInputMode
from promptiqa.prompting import PromptScheme, TaskKind
from promptiqa.regression import AlphaMode

TOML = """
task = "alignment"
alpha_mode = "fixed_0"
patches_n = 3
output_dir = "out"

[backend]
kind = "stub"

[train]
epochs = 4

[[datasets]]
name = "d"
manifest = "data/data.csv"
"""


class TestLoad:
    def test_toml(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text(TOML)
        cfg = load_config(path)
        assert cfg.task is TaskKind.ALIGNMENT and cfg.scheme is PromptScheme.ADVERB
        assert cfg.alpha_mode is AlphaMode.FIXED_0 and cfg.train.epochs == 4
        assert cfg.datasets[0].manifest == str(tmp_path / "data" / "data.csv")
        assert cfg.output_dir == str(tmp_path / "out")

    def test_json_round_trip(self, tmp_path):
        cfg = RunConfig(task="perception", scheme="antonym", image_input="only_patches")
        path = tmp_path / "run.json"
        path.write_text(json.dumps(cfg.to_dict()))
        again = load_config(path)
        assert again.hash() == cfg.hash()
        assert again.output_dir == str(tmp_path / "runs")
        assert again.image_input is ImageInputMode.ONLY_PATCHES

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"lerning_rate": 1})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"train": {"lerning_rate": 1}})

    def test_parse_error_and_missing(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("task = ")
        with pytest.raises(ConfigError):
            load_config(bad)
        with pytest.raises(InputError):
            load_config(tmp_path / "none.toml")

    @pytest.mark.parametrize("data", [{"task": "alignment", "scheme": "adjective"},
                                      {"patches_n": 0}, {"temperature": 0.0},
                                      {"split_ratio": 1.5}, {"task": "color"}])
    def test_invalid_values(self, data):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(data)

    def test_per_task_schemes(self):
        cfg = RunConfig.from_dict({"tasks": ["perception", "alignment"],
                                   "schemes": {"perception": "antonym"}})
        assert cfg.for_task("perception").scheme is PromptScheme.ANTONYM
        assert cfg.for_task("alignment").scheme is PromptScheme.ADVERB


class TestHash:
    def test_stable_and_sensitive(self):
        a = RunConfig()
        assert a.hash() == RunConfig().hash()
        assert a.hash() != RunConfig(patches_n=4).hash()

    def test_ignores_output_location(self):
        assert RunConfig(output_dir="a").hash() == RunConfig(output_dir="b", save_checkpoints=True).hash()


def test_build_model_uses_config(stub):
    cfg = RunConfig(task="perception", scheme="antonym", alpha_mode="fixed_1")
    model = build_model(cfg, stub)
    assert model.levels == 2 and model.alpha.mode is AlphaMode.FIXED_1
