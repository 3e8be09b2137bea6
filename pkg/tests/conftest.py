"""Pytest configuration and shared fixtures."""

import sys
from pathlib import Path

import pytest

# Add src to path for all tests
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import Config, DatasetConfig, EvalConfig, ModelConfig, TrainConfig  # noqa: E402
from src.geometry_data import generate_dataset  # noqa: E402


@pytest.fixture
def tiny_config() -> Config:
    """A small sphere experiment that trains in well under a second per epoch."""
    return Config(
        dataset=DatasetConfig(name="wrapped_normals_s2", train_size=256, val_size=64, seed=0),
        model=ModelConfig(
            num_charts=2,
            chart_layers=2,
            base_layers=2,
            chart_bins=4,
            base_bins=4,
            spline_range=4.0,
            hidden_layers=1,
            hidden_units=8,
        ),
        train=TrainConfig(recon_epochs=2, ml_epochs=2, batch_size=64, learning_rate=1e-3),
        eval=EvalConfig(n_lat=20, n_lon=40, n_samples=200, bandwidth=0.2),
    )


@pytest.fixture
def tiny_dataset(tiny_config):
    return generate_dataset(tiny_config.dataset)
