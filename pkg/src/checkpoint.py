"""Checkpoint directories: config copy, parameters, optimizer and RNG state, metrics log."""

from pathlib import Path

import pandas as pd
import torch
from loguru import logger

from src.atlas import MultiChartFlow, build_model
from src.config import Config

CONFIG_FILE = "config.yaml"
PARAMS_FILE = "params.bin"
OPTIMIZER_FILE = "optimizer.bin"
RNG_FILE = "rng.bin"
METRICS_FILE = "metrics.csv"
METRIC_COLUMNS = ["epoch", "phase", "train_loss", "val_metric"]


class CheckpointMismatchError(RuntimeError):
    """Raised when a checkpoint does not belong to the expected configuration."""


def save_checkpoint(
    directory: str | Path,
    config: Config,
    model: MultiChartFlow,
    optimizer_state: dict | None = None,
    rng_state: dict | None = None,
    metrics: list[dict] | None = None,
) -> Path:
    """Write a checkpoint directory.

    Args:
        directory: Target directory (created if needed)
        config: Experiment configuration the model was built from
        model: Model whose parameters are stored
        optimizer_state: Optional ``optimizer.state_dict()``
        rng_state: Optional mapping of RNG names to state tensors
        metrics: Optional metric rows for ``metrics.csv``

    Returns:
        The checkpoint directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    config.save_to_yaml(directory / CONFIG_FILE)
    atlas = model.atlas
    torch.save(
        {
            "config_hash": config.config_hash(),
            "dims": {
                "ambient_dim": atlas.ambient_dim,
                "latent_dim": atlas.latent_dim,
                "num_charts": atlas.num_charts,
                "index_dim": atlas.index_dim,
            },
            "state_dict": model.state_dict(),
        },
        directory / PARAMS_FILE,
    )
    if optimizer_state is not None:
        torch.save(optimizer_state, directory / OPTIMIZER_FILE)
    torch.save(rng_state or {"torch": torch.get_rng_state()}, directory / RNG_FILE)
    if metrics is not None:
        write_metrics(directory, metrics)

    logger.debug(f"Checkpoint written to {directory}")
    return directory


def load_checkpoint(
    directory: str | Path, expected: Config | None = None
) -> tuple[Config, MultiChartFlow]:
    """Rebuild the model stored in a checkpoint directory.

    Args:
        directory: Checkpoint directory
        expected: If given, the checkpoint must have been written for this config

    Returns:
        Tuple of (stored config, model)

    Raises:
        FileNotFoundError: If the directory lacks the config or parameter file
        CheckpointMismatchError: If the stored config hash does not match
    """
    directory = Path(directory)
    for name in (CONFIG_FILE, PARAMS_FILE):
        if not (directory / name).exists():
            raise FileNotFoundError(f"Checkpoint file missing: {directory / name}")

    config = Config.from_yaml(str(directory / CONFIG_FILE))
    payload = torch.load(directory / PARAMS_FILE, weights_only=True)
    stored_hash = payload["config_hash"]

    if config.config_hash() != stored_hash:
        raise CheckpointMismatchError(
            f"{directory / CONFIG_FILE} does not match the parameters in {PARAMS_FILE} "
            f"(hash {config.config_hash()} != {stored_hash})"
        )
    if expected is not None and expected.config_hash() != stored_hash:
        raise CheckpointMismatchError(
            f"Checkpoint {directory} was written for config hash {stored_hash}, "
            f"expected {expected.config_hash()}"
        )

    model = build_model(config.model)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        logger.warning(f"Failed to load parameters from {directory}: {e}")
        raise
    model.eval()
    logger.info(f"Loaded checkpoint {directory} (config hash {stored_hash[:8]})")
    return config, model


def load_optimizer_state(directory: str | Path) -> dict | None:
    path = Path(directory) / OPTIMIZER_FILE
    return torch.load(path, weights_only=True) if path.exists() else None


def load_rng_state(directory: str | Path) -> dict | None:
    path = Path(directory) / RNG_FILE
    return torch.load(path, weights_only=True) if path.exists() else None


def write_metrics(directory: str | Path, rows: list[dict]) -> Path:
    """Write ``metrics.csv`` with columns epoch, phase, train_loss, val_metric."""
    path = Path(directory) / METRICS_FILE
    pd.DataFrame(rows, columns=METRIC_COLUMNS).to_csv(path, index=False)
    return path


def read_metrics(directory: str | Path) -> pd.DataFrame:
    path = Path(directory) / METRICS_FILE
    if not path.exists():
        return pd.DataFrame(columns=METRIC_COLUMNS)
    return pd.read_csv(path)
