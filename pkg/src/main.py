"""Command-line entry points for multi-chart flow experiments."""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from loguru import logger
from rich.console import Console
from rich.table import Table

from src.atlas import build_model
from src.checkpoint import load_checkpoint
from src.config import LOG_PROB_MODES, Config
from src.density import log_prob_manifold
from src.evaluation import UNIFORM_SPHERE_NLL, EvalReport, evaluate, sphere_grid
from src.geometry_data import (
    HYPERBOLIC_DATASETS,
    SPHERE_DATASETS,
    Dataset,
    generate_dataset,
    poincare_to_hyperboloid,
)
from src.plotting import (
    PROJECTIONS,
    plot_mollweide_density,
    plot_mollweide_scatter,
    plot_poincare_density,
    plot_poincare_scatter,
    plot_scatter3d,
    poincare_grid,
)
from src.training import TrainState
from src.training import train as train_model

DEFAULT_CONFIG = "config/config.yaml"
DATASET_SIDECAR = "dataset.json"
PLOT_SAMPLES = 5000
PLOT_CHUNK = 4096


class ExperimentRunner:
    """Runs the generate / train / sample / eval / plot commands for one configuration."""

    def __init__(self, config: Config, check_checkpoints: bool = False):
        """Initialize runner.

        Args:
            config: Experiment configuration
            check_checkpoints: Refuse checkpoints written for a different dataset/model config
        """
        self.config = config
        self.check_checkpoints = check_checkpoints
        self.stats = {"commands": 0}

    def _load(self, checkpoint: str | Path):
        expected = self.config if self.check_checkpoints else None
        return load_checkpoint(checkpoint, expected=expected)

    def generate(self, out_dir: str | Path) -> Dataset:
        """Generate (or ingest) the configured dataset and write it to ``out_dir``."""
        self.stats["commands"] += 1
        dataset = generate_dataset(self.config.dataset)
        dataset.save(out_dir)
        return dataset

    def _load_or_generate(self, data_dir: Path) -> Dataset:
        if (data_dir / "metadata.json").exists():
            dataset = Dataset.load(data_dir)
            if dataset.name != self.config.dataset.name:
                logger.warning(
                    f"Dataset in {data_dir} is '{dataset.name}', "
                    f"config expects '{self.config.dataset.name}'"
                )
            return dataset
        logger.info(f"No dataset in {data_dir}; generating it")
        return self.generate(data_dir)

    def train(self, data_dir: str | Path, out_dir: str | Path) -> TrainState:
        """Train a fresh model on the dataset in ``data_dir``; checkpoints go to ``out_dir``."""
        self.stats["commands"] += 1
        out_dir = Path(out_dir)
        dataset = self._load_or_generate(Path(data_dir))
        model = build_model(self.config.model)

        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / DATASET_SIDECAR, "w", encoding="utf-8") as f:
            json.dump({"name": dataset.name, "seed": dataset.seed, **dataset.metadata}, f, indent=2)

        return train_model(model, dataset, self.config, checkpoint_dir=out_dir)

    def sample(self, checkpoint: str | Path, n: int, seed: int, out: str | Path) -> Path:
        """Write ``n`` model samples as CSV (header ``x0,...``), undoing any standardization."""
        self.stats["commands"] += 1
        if n < 0:
            raise ValueError(f"n must be >= 0: {n}")
        _, model = self._load(checkpoint)
        samples = model.sample(n, seed=seed).numpy()

        sidecar = Path(checkpoint) / DATASET_SIDECAR
        if sidecar.exists():
            with open(sidecar, encoding="utf-8") as f:
                standardization = json.load(f).get("standardization")
            if standardization is not None:
                samples = samples * np.asarray(standardization["scale"]) + np.asarray(
                    standardization["mean"]
                )

        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        columns = [f"x{i}" for i in range(model.ambient_dim)]
        pd.DataFrame(samples, columns=columns).to_csv(out, index=False, float_format="%.17g")
        logger.info(f"Wrote {n} samples to {out}")
        return out

    def evaluate(
        self, checkpoint: str | Path, data_dir: str | Path, out: str | Path, modes=None
    ) -> EvalReport:
        """Evaluate a checkpoint on the validation split in ``data_dir``."""
        self.stats["commands"] += 1
        config, model = self._load(checkpoint)
        eval_config = config.eval
        eval_config.seed = self.config.eval.seed
        if modes:
            eval_config.modes = list(modes)
        report = evaluate(model, Dataset.load(data_dir), eval_config)
        report.save(out)
        print_report(report)
        return report

    def plot(
        self,
        projection: str,
        out: str | Path,
        checkpoint: str | Path | None = None,
        data_dir: str | Path | None = None,
        mode: str = "exact",
    ) -> Path:
        """Render a model density map (from a checkpoint) or a dataset scatter."""
        self.stats["commands"] += 1
        if projection not in PROJECTIONS:
            raise ValueError(f"Unknown projection: {projection}. Must be one of {PROJECTIONS}")
        if checkpoint is not None:
            return self._plot_model(Path(checkpoint), projection, out, mode)
        if data_dir is None:
            raise ValueError("plot needs --checkpoint or --data-dir")

        dataset = Dataset.load(data_dir)
        _check_projection(projection, dataset.name, dataset.ambient_dim)
        title = f"{dataset.name} (train)"
        if projection == "mollweide":
            return plot_mollweide_scatter(dataset.train, out, title)
        if projection == "poincare":
            return plot_poincare_scatter(dataset.train, out, title)
        return plot_scatter3d(dataset.train, out, title=title)

    def _plot_model(self, checkpoint: Path, projection: str, out, mode: str) -> Path:
        config, model = self._load(checkpoint)
        _check_projection(projection, config.dataset.name, model.ambient_dim)
        title = f"{config.dataset.name} model density ({mode})"

        def log_density(points: np.ndarray) -> np.ndarray:
            values = []
            for chunk in torch.as_tensor(points, dtype=torch.float64).split(PLOT_CHUNK):
                with torch.no_grad():
                    snapped = model.atlas.reconstruct(chunk)
                values.append(log_prob_manifold(model, snapped, mode, strict=False))
            return torch.cat(values).numpy()

        if projection == "mollweide":
            lat_grid, lon_grid, points = sphere_grid(config.eval.n_lat // 2, config.eval.n_lon // 2)
            values = np.exp(log_density(points.reshape(-1, 3))).reshape(lat_grid.shape)
            return plot_mollweide_density(lat_grid, lon_grid, values, out, title)
        if projection == "poincare":
            coords, inside = poincare_grid()
            values = np.full(inside.shape, np.nan)
            values[inside] = np.exp(log_density(poincare_to_hyperboloid(coords[inside])))
            return plot_poincare_density(values, out, title)

        samples = model.sample(PLOT_SAMPLES, seed=self.config.eval.seed)
        colors = log_density(samples.numpy())
        return plot_scatter3d(samples.numpy(), out, colors=colors, title=title)


def _check_projection(projection: str, dataset_name: str, ambient_dim: int) -> None:
    if projection == "mollweide" and dataset_name not in SPHERE_DATASETS:
        raise ValueError(f"Mollweide projection needs a sphere dataset, got '{dataset_name}'")
    if projection == "poincare" and dataset_name not in HYPERBOLIC_DATASETS:
        raise ValueError(f"Poincaré projection needs a hyperboloid dataset, got '{dataset_name}'")
    if ambient_dim != 3:
        raise ValueError(f"{projection} plots need ambient dimension 3, got {ambient_dim}")


def print_report(report: EvalReport, console: Console | None = None) -> None:
    """Render an evaluation report as a table."""
    console = console or Console(stderr=True)
    table = Table(title="Evaluation")
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    for mode, value in report.mean_nll.items():
        table.add_row(f"NLL ({mode})", f"{value:.4f}")
    if "uniform_sphere_nll" in report.extras:
        table.add_row("NLL (uniform sphere)", f"{UNIFORM_SPHERE_NLL:.4f}")
    table.add_row("Reconstruction error", f"{report.mean_recon_error:.6f}")
    table.add_row("KDE score", f"{report.kde_score:.4f}")
    table.add_row("KDE score (transposed)", f"{report.kde_score_transposed:.4f}")
    if report.normalization_integral is not None:
        table.add_row("Normalization integral", f"{report.normalization_integral:.4f}")
    table.add_row("Points", str(report.n_points))
    console.print(table)


def setup_logging(config: Config):
    """Setup logging configuration.

    Args:
        config: Configuration object
    """
    # Remove default logger
    logger.remove()

    # Add console logger
    logger.add(
        sys.stderr,
        format=config.logging.format,
        level=config.logging.level,
        colorize=True,
    )

    # Add file logger
    if config.logging.file:
        log_file = Path(config.logging.file)
        log_file.parent.mkdir(parents=True, exist_ok=True)

        logger.add(
            config.logging.file,
            format=config.logging.format,
            level=config.logging.level,
            rotation="10 MB",
            retention="7 days",
            compression="zip",
        )

    logger.info(f"Logging configured: level={config.logging.level}")


def configure_threads() -> None:
    """Apply ``MCF_NUM_THREADS`` to torch's intra-op thread pool."""
    value = os.environ.get("MCF_NUM_THREADS")
    if not value:
        return
    threads = int(value)
    if threads < 1:
        raise ValueError(f"MCF_NUM_THREADS must be >= 1: {value}")
    torch.set_num_threads(threads)
    logger.info(f"Torch threads limited to {threads}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcf", description="Multi-chart flows: density estimation on learned manifolds"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument(
            "--config",
            type=str,
            default=None,
            help=f"Path to config file (default: $MCF_CONFIG or {DEFAULT_CONFIG})",
        )
        sub.add_argument("--seed", type=int, default=None, help="Override the command's seed")
        sub.add_argument(
            "--log-level",
            choices=["DEBUG", "INFO", "WARNING", "ERROR"],
            help="Override log level from config",
        )

    generate = subparsers.add_parser("generate", help="Generate or ingest a dataset")
    common(generate)
    generate.add_argument("--out", type=str, default=None, help="Dataset directory")

    train = subparsers.add_parser("train", help="Train a model (two phases)")
    common(train)
    train.add_argument("--data-dir", type=str, default=None, help="Dataset directory")
    train.add_argument("--out", type=str, default=None, help="Checkpoint directory")

    sample = subparsers.add_parser("sample", help="Sample points from a checkpoint")
    common(sample)
    sample.add_argument("--checkpoint", type=str, required=True, help="Checkpoint directory")
    sample.add_argument("--n", type=int, default=1000, help="Number of samples")
    sample.add_argument("--out", type=str, default="samples.csv", help="Output CSV file")

    evaluate_cmd = subparsers.add_parser("eval", help="Evaluate a checkpoint")
    common(evaluate_cmd)
    evaluate_cmd.add_argument("--checkpoint", type=str, required=True, help="Checkpoint directory")
    evaluate_cmd.add_argument("--data-dir", type=str, required=True, help="Dataset directory")
    evaluate_cmd.add_argument(
        "--mode", choices=LOG_PROB_MODES, action="append", help="Log-likelihood mode (repeatable)"
    )
    evaluate_cmd.add_argument("--out", type=str, default=None, help="Report JSON path")

    plot = subparsers.add_parser("plot", help="Render a dataset or model density figure")
    common(plot)
    plot.add_argument("--checkpoint", type=str, default=None, help="Checkpoint directory")
    plot.add_argument("--data-dir", type=str, default=None, help="Dataset directory")
    plot.add_argument("--projection", choices=PROJECTIONS, default="mollweide")
    plot.add_argument("--mode", choices=LOG_PROB_MODES, default="exact")
    plot.add_argument("--out", type=str, default="plot.png", help="Output image")

    return parser


def run(args: argparse.Namespace) -> int:
    """Execute a parsed command line."""
    config_path = args.config or os.environ.get("MCF_CONFIG") or DEFAULT_CONFIG
    config = Config.from_yaml(config_path)

    # Override log level if specified
    if args.log_level:
        config.logging.level = args.log_level

    if args.seed is not None:
        if args.command == "generate":
            config.dataset.seed = args.seed
        elif args.command == "train":
            config.train.seed = args.seed
        else:
            config.eval.seed = args.seed

    # Every problem is listed before anything starts
    config.validate()
    setup_logging(config)
    configure_threads()

    logger.info("=" * 60)
    logger.info(f"mcf {args.command}")
    logger.info(f"Config: {config_path} (hash {config.config_hash()[:8]})")
    logger.info("=" * 60)

    # A user-chosen config must match the checkpoints it is used with
    explicit = bool(args.config or os.environ.get("MCF_CONFIG"))
    runner = ExperimentRunner(config, check_checkpoints=explicit)
    name = config.dataset.name
    if args.command == "generate":
        runner.generate(args.out or f"data/{name}")
    elif args.command == "train":
        runner.train(args.data_dir or f"data/{name}", args.out or f"checkpoints/{name}")
    elif args.command == "sample":
        runner.sample(args.checkpoint, args.n, config.eval.seed, args.out)
    elif args.command == "eval":
        out = args.out or str(Path(args.checkpoint) / "eval.json")
        runner.evaluate(args.checkpoint, args.data_dir, out, modes=args.mode)
    elif args.command == "plot":
        runner.plot(args.projection, args.out, args.checkpoint, args.data_dir, args.mode)
    return 0


def main():
    """Main entry point."""
    args = build_parser().parse_args()

    try:
        sys.exit(run(args))

    except KeyboardInterrupt:
        logger.info("\nInterrupted by user")
        sys.exit(0)

    except Exception as e:
        logger.error(f"Fatal error: {e}")
        logger.exception("Traceback:")
        sys.exit(1)


if __name__ == "__main__":
    main()
