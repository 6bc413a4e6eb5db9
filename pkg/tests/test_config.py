"""Configuration round trips, validation, and override layering."""

import pytest

from spkmsa.config import ConfigError, RunConfig, desk_scale_config, paper_scale_config


class TestRoundTrip:
    def test_text_round_trip_is_lossless(self):
        cfg = RunConfig().with_overrides({"aggregation": "msea", "lr_initial": 0.05,
                                          "fpm_smooth_bn_relu": False, "log_floor": 1e-10})
        back = RunConfig.from_text(cfg.to_text())
        assert back == cfg
        assert back.to_text() == cfg.to_text()

    def test_every_key_present_in_text(self):
        text = RunConfig().to_text()
        from dataclasses import fields
        for f in fields(RunConfig):
            assert f"{f.name}=" in text

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            RunConfig.from_text("bogus_key=1\n")

    def test_comments_and_blanks_ignored(self):
        cfg = RunConfig.from_text("# a comment\n\nepochs=5\n")
        assert cfg.epochs == 5

    def test_bad_value_type_reported(self):
        with pytest.raises(ConfigError, match="epochs"):
            RunConfig.from_text("epochs=many\n")

    def test_file_round_trip(self, tmp_path):
        cfg = RunConfig().with_overrides({"pooling": "sap", "seed": 42})
        p = tmp_path / "run.cfg"
        p.write_text(cfg.to_text())
        assert RunConfig.from_file(p) == cfg


class TestValidation:
    def test_defaults_valid(self):
        RunConfig().validate()

    def test_embedding_dim_constrained(self):
        with pytest.raises(ConfigError, match="embedding_dim"):
            RunConfig().with_overrides({"embedding_dim": 64}).validate()

    def test_msfa_requires_three_stage_set(self):
        with pytest.raises(ConfigError, match="msfa"):
            RunConfig().with_overrides({"aggregation": "msfa", "stages": "3,4"}).validate()

    def test_bad_enum_rejected(self):
        with pytest.raises(ConfigError, match="pooling"):
            RunConfig().with_overrides({"pooling": "max"}).validate()

    def test_auto_stage_resolution(self):
        assert RunConfig().resolved_stages() == (4,)
        msfa = RunConfig().with_overrides({"aggregation": "msfa"})
        assert msfa.resolved_stages() == (2, 3, 4)
        lde = RunConfig().with_overrides({"aggregation": "msea", "pooling": "lde"})
        assert lde.resolved_stages() == (3, 4)
        gap = RunConfig().with_overrides({"aggregation": "msea"})
        assert gap.resolved_stages() == (2, 3, 4)

    def test_msfa_top_upsample_auto(self):
        plain = RunConfig().with_overrides({"aggregation": "msfa"})
        assert plain.resolved_msfa_top_upsample() == "tc"
        fpm = RunConfig().with_overrides({"aggregation": "msfa", "fpm": "tc"})
        assert fpm.resolved_msfa_top_upsample() == "bilinear"

    def test_lde_projection_forced_to_lde_channels(self):
        cfg = RunConfig().with_overrides({"pooling": "lde"})
        assert cfg.resolved_proj_channels() == 64


class TestOverrides:
    def test_env_overrides(self):
        cfg = RunConfig().with_env_overrides({"SPKMSA_EPOCHS": "9", "SPKMSA_POOLING": "sap"})
        assert cfg.epochs == 9
        assert cfg.pooling == "sap"

    def test_env_unknown_keys_ignored(self):
        cfg = RunConfig().with_env_overrides({"SPKMSA_NOT_A_KEY": "1", "PATH": "/bin"})
        assert cfg == RunConfig()

    def test_override_precedence(self):
        cfg = RunConfig().with_env_overrides({"SPKMSA_SEED": "2"}).with_overrides({"seed": "3"})
        assert cfg.seed == 3

    def test_duration_list_parsing(self):
        cfg = RunConfig().with_overrides({"durations": "1,2.5,full"})
        assert cfg.duration_list() == [1.0, 2.5, "full"]


class TestPresets:
    def test_paper_scale_defaults(self):
        cfg = paper_scale_config()
        assert cfg.stage_channels_tuple() == (32, 64, 128, 256)
        assert cfg.resolved_pyramid_channels() == 32
        assert cfg.num_speakers == 1211

    def test_desk_scale_is_small_and_valid(self):
        cfg = desk_scale_config()
        assert cfg.stage_channels_tuple()[-1] <= 64
        assert cfg.crop_frames <= 128
        assert cfg.aggregation == "msea" and cfg.fpm == "tc"
