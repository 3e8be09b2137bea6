#!/usr/bin/env python3
"""Tests for configuration module."""

from pathlib import Path

import pytest
import yaml

from src.config import (
    Config,
    ConfigValidationError,
    DatasetConfig,
    EvalConfig,
    LoggingConfig,
    ModelConfig,
    TrainConfig,
)

PRESET_DIR = Path(__file__).parent.parent / "config" / "presets"
PRESETS = sorted(PRESET_DIR.glob("*.yaml"))


class TestSectionDefaults:
    """Tests for section dataclass defaults."""

    def test_dataset_defaults(self):
        """Test default dataset sizes follow the synthetic experiments."""
        config = DatasetConfig()

        assert config.name == "wrapped_normals_s2"
        assert config.train_size == 50000
        assert config.val_size == 10000
        assert config.train_fraction == 0.8

    def test_model_defaults(self):
        """Test default architecture is the wrapped-normals row."""
        config = ModelConfig()

        assert config.ambient_dim == 3
        assert config.latent_dim == 2
        assert config.num_charts == 4
        assert config.index_dim == 2
        assert config.chart_layers == 6
        assert config.spline_range == 6.0
        assert config.linear_transform == "permutation"

    def test_train_defaults(self):
        """Test default two-phase schedule."""
        config = TrainConfig()

        assert config.recon_epochs == 150
        assert config.ml_epochs == 500
        assert config.batch_size == 128
        assert config.learning_rate == 2e-4
        assert config.recon_grad_clip is None
        assert config.ml_grad_clip == 1.0
        assert config.max_nonfinite_steps == 5

    def test_eval_defaults(self):
        """Test evaluation defaults."""
        config = EvalConfig()

        assert config.bandwidth == 0.1
        assert (config.n_lat, config.n_lon) == (200, 400)
        assert config.modes == ["exact", "bound", "hutchinson", "coarse"]

    def test_eval_modes_not_shared(self):
        """Test the modes default list is not shared between instances."""
        a, b = EvalConfig(), EvalConfig()
        a.modes.append("exact")

        assert len(b.modes) == 4

    def test_logging_defaults(self):
        """Test logging defaults."""
        config = LoggingConfig()

        assert config.level == "INFO"
        assert config.file == "./logs/mcf.log"


class TestConfigLoading:
    """Tests for YAML loading."""

    def test_missing_file_returns_defaults(self, tmp_path):
        """Test a missing config file gives the default config."""
        config = Config.from_yaml(str(tmp_path / "missing.yaml"))

        assert config == Config()

    def test_partial_file_keeps_defaults(self, tmp_path):
        """Test keys absent from the file keep their defaults."""
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump({"model": {"num_charts": 5}}))

        config = Config.from_yaml(str(path))

        assert config.model.num_charts == 5
        assert config.model.chart_layers == 6
        assert config.train == TrainConfig()

    def test_empty_file(self, tmp_path):
        """Test an empty YAML file gives defaults."""
        path = tmp_path / "config.yaml"
        path.write_text("")

        assert Config.from_yaml(str(path)) == Config()

    def test_unknown_keys_are_errors(self, tmp_path):
        """Test unknown keys and sections are reported by validation."""
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump({"model": {"charts": 5}, "extra": {}}))

        config = Config.from_yaml(str(path))
        result = config.check()

        assert not result.is_valid
        assert "Unknown config key: model.charts" in result.errors
        assert "Unknown config key: extra" in result.errors

    def test_default_config_file_is_valid(self):
        """Test the shipped default config validates."""
        path = Path(__file__).parent.parent / "config" / "config.yaml"
        config = Config.from_yaml(str(path))

        config.validate()
        assert config.dataset.name == "wrapped_normals_s2"


class TestValidation:
    """Tests for exhaustive validation."""

    def test_default_is_valid(self):
        """Test the default config is valid."""
        result = Config().check()

        assert result.is_valid
        assert result.errors == []

    def test_lists_every_error(self):
        """Test validation reports all problems at once."""
        config = Config()
        config.dataset.name = "torus"
        config.model.chart_bins = 1
        config.train.batch_size = 0
        config.eval.bandwidth = -1.0

        with pytest.raises(ConfigValidationError) as exc_info:
            config.validate()

        errors = exc_info.value.errors
        assert len(errors) == 4
        assert any("torus" in e for e in errors)
        assert any("bin counts" in e for e in errors)
        assert any("batch_size" in e for e in errors)
        assert any("bandwidth" in e for e in errors)

    def test_validation_error_is_value_error(self):
        """Test ConfigValidationError is a ValueError."""
        config = Config()
        config.model.latent_dim = 3

        with pytest.raises(ValueError, match="ambient_dim must exceed latent_dim"):
            config.validate()

    def test_ambient_dim_must_match_dataset(self):
        """Test a model dimension that differs from the dataset's is rejected."""
        config = Config()
        config.model.ambient_dim = 40
        config.model.latent_dim = 14

        result = config.check()

        assert any("does not match dataset" in e for e in result.errors)

    def test_geo_csv_requires_path(self):
        """Test the geolocation dataset needs a CSV path."""
        config = Config()
        config.dataset.name = "geo_csv"

        result = config.check()

        assert "csv_path is required for the geo_csv dataset" in result.errors

    def test_step_schedule_needs_interval(self):
        """Test the step schedule needs a decay interval."""
        config = Config()
        config.train.lr_schedule = "step"

        assert not config.check().is_valid

    @pytest.mark.parametrize("field", ["recon_grad_clip", "ml_grad_clip"])
    def test_clip_must_be_positive(self, field):
        """Test clipping norms must be positive when set."""
        config = Config()
        setattr(config.train, field, 0.0)

        assert not config.check().is_valid

    def test_unknown_eval_mode(self):
        """Test unknown log-likelihood modes are rejected."""
        config = Config()
        config.eval.modes = ["exact", "sloppy"]

        result = config.check()

        assert any("sloppy" in e for e in result.errors)

    def test_adam_weight_decay_warns(self):
        """Test weight decay with plain Adam is a warning, not an error."""
        config = Config()
        config.train.weight_decay = 1e-4

        result = config.check()

        assert result.is_valid
        assert len(result.warnings) == 1

    def test_invalid_logging_level(self):
        """Test invalid log level is rejected."""
        config = Config()
        config.logging.level = "VERBOSE"

        assert not config.check().is_valid


class TestConfigHash:
    """Tests for the architecture hash."""

    def test_hash_is_stable(self):
        """Test equal configs give equal hashes."""
        assert Config().config_hash() == Config().config_hash()

    def test_hash_covers_model(self):
        """Test model changes change the hash."""
        config = Config()
        config.model.num_charts = 5

        assert config.config_hash() != Config().config_hash()

    def test_hash_ignores_training(self):
        """Test training-only changes keep the hash."""
        config = Config()
        config.train.learning_rate = 1e-3
        config.eval.bandwidth = 0.2

        assert config.config_hash() == Config().config_hash()


class TestPresets:
    """Tests for the shipped preset library."""

    def test_every_full_preset_has_desk_variant(self):
        """Test each full preset ships a reduced-schedule variant."""
        names = {p.stem for p in PRESETS}
        full = {n for n in names if not n.endswith("_desk")}

        assert full == {
            "checkerboard_s2",
            "wrapped_normals_s2",
            "five_gaussians_h2",
            "checkerboard_h2",
            "earthquakes",
            "fires",
            "lorenz",
        }
        assert {f"{n}_desk" for n in full} <= names

    @pytest.mark.parametrize("path", PRESETS, ids=lambda p: p.stem)
    def test_preset_round_trip(self, path, tmp_path):
        """Test load, validate, save, load gives an identical config."""
        config = Config.from_yaml(str(path))
        config.validate()

        out = tmp_path / "round_trip.yaml"
        config.save_to_yaml(out)
        reloaded = Config.from_yaml(str(out))

        assert reloaded == config
        assert reloaded.config_hash() == config.config_hash()

    def test_checkerboard_s2_row(self):
        """Test the checkerboard sphere preset mirrors its architecture row."""
        config = Config.from_yaml(str(PRESET_DIR / "checkerboard_s2.yaml"))

        assert config.model.num_charts == 5
        assert config.model.chart_bins == 32
        assert config.model.spline_range == 3.0
        assert config.model.hidden_units == 100

    def test_lorenz_row(self):
        """Test the Lorenz preset uses a residual conditioner and standardized data."""
        config = Config.from_yaml(str(PRESET_DIR / "lorenz.yaml"))

        assert config.model.residual_blocks == 2
        assert config.train.optimizer == "adamw"
        assert config.train.lr_schedule == "cosine"
        assert config.dataset.train_size + config.dataset.val_size == 1_000_000
        assert config.dataset.standardize


class TestSaveToYaml:
    """Tests for YAML serialization."""

    def test_to_dict_sections(self):
        """Test to_dict has one entry per section."""
        data = Config().to_dict()

        assert set(data) == {"dataset", "model", "train", "eval", "logging"}
        assert data["model"]["num_charts"] == 4

    def test_save_creates_parent(self, tmp_path):
        """Test saving creates missing directories."""
        out = tmp_path / "nested" / "dir" / "config.yaml"
        Config().save_to_yaml(out)

        assert out.exists()
        with open(out, encoding="utf-8") as f:
            assert yaml.safe_load(f)["train"]["ml_epochs"] == 500
