"""Configuration management for multi-chart flow experiments."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

DATASET_NAMES = [
    "wrapped_normals_s2",
    "checkerboard_s2",
    "vmf_s2",
    "five_gaussians_h2",
    "checkerboard_h2",
    "lorenz",
    "geo_csv",
]

LINEAR_TRANSFORMS = ["none", "permutation", "lu"]
ACTIVATIONS = ["relu", "tanh", "elu", "leaky_relu"]
OPTIMIZERS = ["adam", "adamw"]
LR_SCHEDULES = ["constant", "cosine", "step"]
LOG_PROB_MODES = ["exact", "bound", "hutchinson", "coarse"]


class ConfigValidationError(ValueError):
    """Raised when a configuration has one or more invalid values."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("Invalid configuration:\n  - " + "\n  - ".join(self.errors))


@dataclass
class DatasetConfig:
    """Dataset generation / ingestion configuration."""

    name: str = "wrapped_normals_s2"
    train_size: int = 50000
    val_size: int = 10000
    seed: int = 0
    # Synthetic generators
    scale: float = 0.2  # tangent-space std of wrapped normals
    kappa: float = 10.0  # vMF concentration
    # Lorenz
    n_trajectories: int = 100
    t_end: float = 1000.0
    standardize: bool = False
    # Geolocation CSV
    csv_path: str = ""
    lat_column: str = "latitude"
    lon_column: str = "longitude"
    train_fraction: float = 0.8


@dataclass
class ModelConfig:
    """Architecture of the chart flow and base flow (one row of an architecture table)."""

    ambient_dim: int = 3
    latent_dim: int = 2
    num_charts: int = 4
    index_dim: int = 2
    chart_layers: int = 6
    base_layers: int = 6
    chart_bins: int = 6
    base_bins: int = 6
    spline_range: float = 6.0
    linear_transform: str = "permutation"
    hidden_layers: int = 2
    hidden_units: int = 64
    activation: str = "tanh"
    residual_blocks: int = 0
    seed: int = 0


@dataclass
class TrainConfig:
    """Two-phase training schedule."""

    recon_epochs: int = 150
    ml_epochs: int = 500
    batch_size: int = 128
    learning_rate: float = 2e-4
    optimizer: str = "adam"
    weight_decay: float = 0.0
    lr_schedule: str = "constant"
    step_decay_every: int = 0
    step_factor: float = 0.1
    recon_grad_clip: float | None = None
    ml_grad_clip: float | None = 1.0
    reg_weight: float = 0.5
    recon_patience: int | None = None
    ml_patience: int | None = None
    max_nonfinite_steps: int = 5
    seed: int = 0


@dataclass
class EvalConfig:
    """Evaluation settings."""

    bandwidth: float = 0.1
    n_lat: int = 200
    n_lon: int = 400
    modes: list[str] = field(default_factory=lambda: list(LOG_PROB_MODES))
    n_probes: int = 1
    n_samples: int = 10000
    seed: int = 0


@dataclass
class LoggingConfig:
    """Logging configuration."""

    level: str = "INFO"
    file: str = "./logs/mcf.log"
    format: str = (
        "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan> - <level>{message}</level>"
    )


@dataclass
class ValidationResult:
    """Result of configuration validation."""

    is_valid: bool
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "logging": LoggingConfig,
}


@dataclass
class Config:
    """Main experiment configuration."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    unknown_keys: list[str] = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        """Build a config from a nested dictionary, keeping defaults for missing keys.

        Unknown sections or keys are recorded and reported by ``check()``.
        """
        unknown: list[str] = []
        sections = {}
        for name, section_cls in _SECTIONS.items():
            section_data = dict(data.get(name) or {})
            known = {f.name for f in fields(section_cls)}
            for key in sorted(set(section_data) - known):
                unknown.append(f"{name}.{key}")
                section_data.pop(key)
            sections[name] = section_cls(**section_data)

        for name in sorted(set(data) - set(_SECTIONS)):
            unknown.append(name)

        return cls(**sections, unknown_keys=unknown)

    @classmethod
    def from_yaml(cls, config_path: str | None = None) -> "Config":
        """Load configuration from YAML file.

        Args:
            config_path: Path to config file. If None, uses default location.

        Returns:
            Config instance
        """
        if config_path is None:
            config_path = "config/config.yaml"

        config_file = Path(config_path)

        if not config_file.exists():
            # Return default config if file doesn't exist
            return cls()

        with open(config_file, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}

        return cls.from_dict(data)

    def check(self) -> ValidationResult:
        """Collect every validation problem instead of stopping at the first one.

        Returns:
            ValidationResult with is_valid, errors, and warnings
        """
        errors: list[str] = [f"Unknown config key: {key}" for key in self.unknown_keys]
        warnings: list[str] = []

        # Dataset
        ds = self.dataset
        if ds.name not in DATASET_NAMES:
            errors.append(f"Invalid dataset name: {ds.name}. Must be one of {DATASET_NAMES}")
        if ds.train_size < 1:
            errors.append(f"train_size must be >= 1: {ds.train_size}")
        if ds.val_size < 1:
            errors.append(f"val_size must be >= 1: {ds.val_size}")
        if ds.scale <= 0:
            errors.append(f"scale must be positive: {ds.scale}")
        if ds.kappa < 0:
            errors.append(f"kappa must be non-negative: {ds.kappa}")
        if ds.n_trajectories < 1:
            errors.append(f"n_trajectories must be >= 1: {ds.n_trajectories}")
        if ds.t_end <= 0:
            errors.append(f"t_end must be positive: {ds.t_end}")
        if not 0 < ds.train_fraction < 1:
            errors.append(f"train_fraction must be in (0, 1): {ds.train_fraction}")
        if ds.name == "geo_csv" and not ds.csv_path:
            errors.append("csv_path is required for the geo_csv dataset")

        # Model
        m = self.model
        if m.latent_dim < 1:
            errors.append(f"latent_dim must be >= 1: {m.latent_dim}")
        if m.ambient_dim <= m.latent_dim:
            errors.append(
                f"ambient_dim must exceed latent_dim: ambient_dim={m.ambient_dim}, "
                f"latent_dim={m.latent_dim}"
            )
        if m.num_charts < 1:
            errors.append(f"num_charts must be >= 1: {m.num_charts}")
        if m.index_dim < 1:
            errors.append(f"index_dim must be >= 1: {m.index_dim}")
        if m.chart_layers < 0 or m.base_layers < 0:
            errors.append(
                f"flow layer counts must be >= 0: chart_layers={m.chart_layers}, "
                f"base_layers={m.base_layers}"
            )
        if m.chart_bins < 2 or m.base_bins < 2:
            errors.append(
                f"bin counts must be >= 2: chart_bins={m.chart_bins}, base_bins={m.base_bins}"
            )
        if m.spline_range <= 0:
            errors.append(f"spline_range must be positive: {m.spline_range}")
        if m.linear_transform not in LINEAR_TRANSFORMS:
            errors.append(
                f"Invalid linear_transform: {m.linear_transform}. Must be one of {LINEAR_TRANSFORMS}"
            )
        if m.hidden_layers < 1 or m.hidden_units < 1:
            errors.append(
                f"conditioner needs hidden layers and units: hidden_layers={m.hidden_layers}, "
                f"hidden_units={m.hidden_units}"
            )
        if m.activation not in ACTIVATIONS:
            errors.append(f"Invalid activation: {m.activation}. Must be one of {ACTIVATIONS}")
        if m.residual_blocks < 0:
            errors.append(f"residual_blocks must be >= 0: {m.residual_blocks}")

        # Every bundled dataset lives in R^3
        if m.ambient_dim != 3:
            errors.append(
                f"ambient_dim={m.ambient_dim} does not match dataset {ds.name} (ambient dimension 3)"
            )

        # Training
        t = self.train
        if t.recon_epochs < 0 or t.ml_epochs < 0:
            errors.append(
                f"epochs must be >= 0: recon_epochs={t.recon_epochs}, ml_epochs={t.ml_epochs}"
            )
        if t.batch_size < 1:
            errors.append(f"batch_size must be >= 1: {t.batch_size}")
        if t.learning_rate <= 0:
            errors.append(f"learning_rate must be positive: {t.learning_rate}")
        if t.optimizer not in OPTIMIZERS:
            errors.append(f"Invalid optimizer: {t.optimizer}. Must be one of {OPTIMIZERS}")
        if t.weight_decay < 0:
            errors.append(f"weight_decay must be >= 0: {t.weight_decay}")
        if t.lr_schedule not in LR_SCHEDULES:
            errors.append(f"Invalid lr_schedule: {t.lr_schedule}. Must be one of {LR_SCHEDULES}")
        if t.lr_schedule == "step" and t.step_decay_every < 1:
            errors.append(
                f"step_decay_every must be >= 1 for the step schedule: {t.step_decay_every}"
            )
        for name in ("recon_grad_clip", "ml_grad_clip"):
            value = getattr(t, name)
            if value is not None and value <= 0:
                errors.append(f"{name} must be positive when set: {value}")
        if t.reg_weight < 0:
            errors.append(f"reg_weight must be >= 0: {t.reg_weight}")
        for name in ("recon_patience", "ml_patience"):
            value = getattr(t, name)
            if value is not None and value < 1:
                errors.append(f"{name} must be >= 1 when set: {value}")
        if t.max_nonfinite_steps < 1:
            errors.append(f"max_nonfinite_steps must be >= 1: {t.max_nonfinite_steps}")
        if t.optimizer == "adam" and t.weight_decay > 0:
            warnings.append("weight_decay with adam is L2 regularization; use adamw for decoupled decay")

        # Evaluation
        e = self.eval
        if e.bandwidth <= 0:
            errors.append(f"bandwidth must be positive: {e.bandwidth}")
        if e.n_lat < 2 or e.n_lon < 2:
            errors.append(f"quadrature grid too small: n_lat={e.n_lat}, n_lon={e.n_lon}")
        for mode in e.modes:
            if mode not in LOG_PROB_MODES:
                errors.append(f"Invalid eval mode: {mode}. Must be one of {LOG_PROB_MODES}")
        if e.n_probes < 1:
            errors.append(f"n_probes must be >= 1: {e.n_probes}")
        if e.n_samples < 1:
            errors.append(f"n_samples must be >= 1: {e.n_samples}")

        # Logging validation
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if self.logging.level.upper() not in valid_levels:
            errors.append(
                f"Invalid logging level: {self.logging.level}. Must be one of {valid_levels}"
            )

        return ValidationResult(is_valid=not errors, errors=errors, warnings=warnings)

    def validate(self) -> None:
        """Validate configuration values.

        Raises:
            ConfigValidationError: If configuration is invalid (lists every problem)
        """
        result = self.check()
        if not result.is_valid:
            raise ConfigValidationError(result.errors)

    def to_dict(self) -> dict:
        """Convert configuration to dictionary.

        Returns:
            Dictionary representation of config
        """
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def config_hash(self) -> str:
        """MD5 of the dataset and model blocks; identifies a checkpoint's architecture."""
        payload = {"dataset": asdict(self.dataset), "model": asdict(self.model)}
        canonical = json.dumps(payload, sort_keys=True)
        return hashlib.md5(canonical.encode(), usedforsecurity=False).hexdigest()

    def save_to_yaml(self, config_path: str | Path) -> None:
        """Save configuration to YAML file.

        Args:
            config_path: Path to save config file
        """
        config_file = Path(config_path)
        config_file.parent.mkdir(parents=True, exist_ok=True)

        with open(config_file, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, default_flow_style=False, sort_keys=False)
