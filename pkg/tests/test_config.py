"""
Config tests
Run: pytest tests/test_config.py -v
"""
import pytest

import config


class TestRunConfigs:
    """Typed config records and their JSON files."""

    def test_defaults(self):
        """Defaults follow the published setup."""
        episode = config.EpisodeConfig()
        assert (episode.t_max, episode.t_tol, episode.min_tool_calls, episode.retry_budget) == (20, 10, 4, 3)
        assert episode.turn_limit == 30
        grpo = config.GrpoConfig()
        assert (grpo.group_size, grpo.clip_eps, grpo.kl_beta) == (8, 0.2, 0.005)
        remote = config.RemotePolicyConfig()
        assert (remote.temperature, remote.max_tokens) == (0.0, 8192)
        assert config.FRAME_BUDGET == 128

    def test_load_file(self, tmp_path):
        """JSON keys map onto fields."""
        path = tmp_path / "grpo.json"
        path.write_text('{"iterations": 5, "seed": 3}', encoding="utf-8")
        cfg = config.load_config_file(path, config.GrpoConfig)
        assert (cfg.iterations, cfg.seed, cfg.group_size) == (5, 3, 8)

    def test_unknown_keys(self, tmp_path):
        """Unknown keys are rejected."""
        path = tmp_path / "episode.json"
        path.write_text('{"t_max": 20, "tmax": 3}', encoding="utf-8")
        with pytest.raises(config.ConfigError, match="tmax"):
            config.load_config_file(path, config.EpisodeConfig)

    def test_unreadable_file(self, tmp_path):
        """Missing or broken files are config errors."""
        with pytest.raises(config.ConfigError):
            config.load_config_file(tmp_path / "missing.json", config.EpisodeConfig)
        broken = tmp_path / "broken.json"
        broken.write_text("{", encoding="utf-8")
        with pytest.raises(config.ConfigError):
            config.load_config_file(broken, config.EpisodeConfig)

    @pytest.mark.parametrize("cls,kwargs", [
        (config.EpisodeConfig, {"t_max": 0}),
        (config.EpisodeConfig, {"min_tool_calls_mode": "strict"}),
        (config.RewardConfig, {"iou_threshold": 0.0}),
        (config.GrpoConfig, {"group_size": 1}),
        (config.GrpoConfig, {"clip_eps": 1.5}),
        (config.RemotePolicyConfig, {"max_tokens": 0}),
        (config.GeneratorKnobs, {"video_count": 1}),
    ])
    def test_invalid_values(self, cls, kwargs):
        """Out-of-range values fail at construction."""
        with pytest.raises(config.ConfigError):
            cls(**kwargs)

    def test_round_trip_dict(self):
        """config_to_dict and config_from_dict agree."""
        cfg = config.RewardConfig(iou_threshold=0.3, strict_format=True)
        assert config.config_from_dict(config.RewardConfig, config.config_to_dict(cfg)) == cfg

    @pytest.mark.parametrize("payload", [
        {"t_max": "20"},
        {"t_max": "abc"},
        {"t_max": 2.5},
        {"t_max": True},
        {"min_tool_calls_mode": 1},
    ])
    def test_wrong_types_are_config_errors(self, payload):
        """Values are never coerced across types, and every failure is a ConfigError."""
        with pytest.raises(config.ConfigError, match="t_max|min_tool_calls_mode"):
            config.config_from_dict(config.EpisodeConfig, payload)

    def test_integers_fill_float_fields(self):
        """A JSON integer is a valid float value."""
        cfg = config.config_from_dict(config.GeneratorKnobs, {"min_duration_s": 10, "max_duration_s": 12})
        assert (cfg.min_duration_s, cfg.max_duration_s) == (10.0, 12.0)

    def test_configs_are_frozen(self):
        """Configs cannot be changed after construction."""
        cfg = config.EpisodeConfig()
        with pytest.raises(Exception):
            cfg.t_max = 3
