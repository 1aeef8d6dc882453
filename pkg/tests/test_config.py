import math

import pytest

from dptrain.config import (
    ConfigError,
    RunConfig,
    SweepGrid,
    parse_config_file,
    run_config_from_mapping,
    sweep_grid_from_mapping,
)


def write(tmp_path, text):
    path = tmp_path / "run.conf"
    path.write_text(text, encoding="utf-8")
    return path


class TestParseConfigFile:
    def test_basic_pairs_and_comments(self, tmp_path):
        path = write(
            tmp_path,
            "# experiment\nlr = 0.08   # learning rate\n\nepochs = 30\nwidths = 16,16,1\n",
        )
        mapping = parse_config_file(path)
        assert mapping == {"lr": "0.08", "epochs": "30", "widths": "16,16,1"}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config_file(tmp_path / "nope.conf")

    def test_bad_line(self, tmp_path):
        path = write(tmp_path, "lr 0.08\n")
        with pytest.raises(ConfigError, match=":1"):
            parse_config_file(path)

    def test_duplicate_key(self, tmp_path):
        path = write(tmp_path, "lr = 1\nlr = 2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_file(path)


class TestRunConfig:
    def test_defaults_are_valid(self):
        config = RunConfig()
        assert config.privacy == "target-epsilon"
        assert config.delta == 1e-5

    def test_mapping_round_trip(self, tmp_path):
        path = write(
            tmp_path,
            "dataset = synthetic\nn = 500\ndim = 8\nwidths = 8,1\n"
            "privacy = fixed-sigma\nsigma = 1.5\nbudget_eps = 2.0\n"
            "noise_placement = on-sum\nbias_correction = false\n",
        )
        config = run_config_from_mapping(parse_config_file(path))
        assert config.n == 500
        assert config.widths == (8, 1)
        assert config.sigma == 1.5
        assert config.noise_placement == "on-sum"
        assert config.bias_correction is False

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys: leraning_rate"):
            run_config_from_mapping({"leraning_rate": "0.1"})

    def test_sweep_keys_rejected_unless_allowed(self):
        mapping = {"sweep_target_eps": "1,10"}
        with pytest.raises(ConfigError):
            run_config_from_mapping(mapping)
        config = run_config_from_mapping(mapping, allow_sweep_keys=True)
        assert config.privacy == "target-epsilon"

    def test_mode_requirements(self):
        with pytest.raises(ConfigError, match="target_eps"):
            RunConfig(privacy="target-epsilon", target_eps=None)
        with pytest.raises(ConfigError, match="sigma"):
            RunConfig(privacy="fixed-sigma", sigma=None)
        with pytest.raises(ConfigError, match="privacy"):
            RunConfig(privacy="offish")

    def test_csv_requires_path(self):
        with pytest.raises(ConfigError, match="csv_path"):
            RunConfig(dataset="csv")

    def test_value_validation(self):
        with pytest.raises(ConfigError):
            RunConfig(delta=0.0)
        with pytest.raises(ConfigError):
            RunConfig(clip_norm=-1.0)
        with pytest.raises(ConfigError):
            RunConfig(widths=(16, 2))
        with pytest.raises(ConfigError):
            RunConfig(noise_placement="everywhere")
        with pytest.raises(ConfigError):
            RunConfig(train_fraction=1.0)

    def test_bad_typed_values(self):
        with pytest.raises(ConfigError, match="epochs"):
            run_config_from_mapping({"epochs": "thirty"})
        with pytest.raises(ConfigError, match="bias_correction"):
            run_config_from_mapping({"bias_correction": "maybe"})
        with pytest.raises(ConfigError, match="widths"):
            run_config_from_mapping({"widths": "a,b"})


class TestSweepGrid:
    def test_defaults_follow_headline_grid(self):
        grid = SweepGrid()
        assert grid.target_eps == (1.0, 2.0, 10.0, 100.0, 1000.0)
        assert grid.clip_norms == (1.0, 0.8, 0.6, 0.4)
        assert len(list(grid.cells())) == 20

    def test_from_mapping_with_inf(self):
        grid = sweep_grid_from_mapping(
            {"sweep_target_eps": "1,10,inf", "sweep_clip_norm": "1.0",
             "sweep_freeze_prefix": "0,1", "seeds_per_cell": "3"}
        )
        assert math.isinf(grid.target_eps[-1])
        assert grid.freeze_prefixes == (0, 1)
        assert len(list(grid.cells())) == 6

    def test_empty_axis_rejected(self):
        with pytest.raises(ConfigError):
            SweepGrid(target_eps=())
        with pytest.raises(ConfigError):
            SweepGrid(seeds_per_cell=0)
