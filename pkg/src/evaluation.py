"""Quantitative evaluation: NLL per mode, reconstruction error, KDE scores, sphere quadrature."""

import json
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from loguru import logger

from src.atlas import MultiChartFlow
from src.config import EvalConfig
from src.density import LogLikelihoodMode, log_prob_manifold
from src.geometry_data import SPHERE_DATASETS, Dataset, latlon_to_sphere, vmf_log_density

EVAL_CHUNK = 4096
UNIFORM_SPHERE_NLL = math.log(4 * math.pi)

__all__ = [
    "UNIFORM_SPHERE_NLL",
    "EvalReport",
    "evaluate",
    "gaussian_kde_log_density",
    "kde_score",
    "nll",
    "normalization_quadrature_sphere",
    "recon_error",
    "sphere_grid",
    "sphere_quadrature",
    "vmf_log_density",
]


@dataclass
class EvalReport:
    """Evaluation results for one checkpoint on one dataset split."""

    mean_nll: dict[str, float]
    mean_recon_error: float
    kde_score: float
    kde_score_transposed: float
    normalization_integral: float | None
    n_points: int
    seed: int
    degenerate_points: int = 0
    extras: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def is_finite(self) -> bool:
        values = [*self.mean_nll.values(), self.mean_recon_error, self.kde_score]
        if self.normalization_integral is not None:
            values.append(self.normalization_integral)
        return all(math.isfinite(v) for v in values)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        logger.info(f"Evaluation report written to {path}")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        with open(path, encoding="utf-8") as f:
            return cls(**json.load(f))


def _as_tensor(points, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    if torch.is_tensor(points):
        return points.to(dtype)
    return torch.as_tensor(np.asarray(points), dtype=dtype)


def gaussian_kde_log_density(
    points: torch.Tensor, reference: torch.Tensor, bandwidth: float
) -> torch.Tensor:
    """Log-density of an isotropic Gaussian KDE (fit on ``reference``) at ``points``."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive: {bandwidth}")
    dim = reference.shape[1]
    log_norm = math.log(len(reference)) + 0.5 * dim * math.log(2 * math.pi * bandwidth**2)
    out = []
    for chunk in points.split(EVAL_CHUNK):
        sq_dist = torch.cdist(chunk, reference, compute_mode="donot_use_mm_for_euclid_dist") ** 2
        out.append(torch.logsumexp(-sq_dist / (2 * bandwidth**2), dim=1) - log_norm)
    return torch.cat(out)


def kde_score(model_samples, reference, bandwidth: float = 0.1) -> float:
    """Mean log KDE density of ``model_samples`` under a KDE fit on ``reference``.

    Higher is better. Swapping the arguments gives the transposed score.
    """
    samples = _as_tensor(model_samples)
    reference = _as_tensor(reference)
    if len(samples) == 0 or len(reference) == 0:
        raise ValueError("kde_score needs non-empty sample and reference batches")
    if samples.shape[1] != reference.shape[1]:
        raise ValueError(
            f"Dimension mismatch: samples in R^{samples.shape[1]}, "
            f"reference in R^{reference.shape[1]}"
        )
    return gaussian_kde_log_density(samples, reference, bandwidth).mean().item()


@torch.no_grad()
def recon_error(model: MultiChartFlow, data) -> float:
    """Mean squared ambient distance between points and their projection on the manifold."""
    data = _as_tensor(data)
    total = 0.0
    for chunk in data.split(EVAL_CHUNK):
        total += ((chunk - model.atlas.reconstruct(chunk)) ** 2).sum().item()
    return total / len(data)


def _log_prob_chunks(
    model: MultiChartFlow, data: torch.Tensor, mode, n_probes: int, seed: int, strict: bool
) -> torch.Tensor:
    return torch.cat(
        [
            log_prob_manifold(model, chunk, mode, n_probes=n_probes, seed=seed + i, strict=strict)
            for i, chunk in enumerate(data.split(EVAL_CHUNK))
        ]
    )


def nll(
    model: MultiChartFlow,
    data,
    mode: str | LogLikelihoodMode = LogLikelihoodMode.EXACT,
    n_probes: int = 1,
    seed: int = 0,
    strict: bool = True,
) -> float:
    """Negative mean manifold log-likelihood."""
    log_probs = _log_prob_chunks(model, _as_tensor(data), mode, n_probes, seed, strict)
    return -log_probs.nanmean().item()


def sphere_grid(n_lat: int, n_lon: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Midpoint latitude/longitude grid (radians) and the corresponding unit vectors."""
    d_lat, d_lon = math.pi / n_lat, 2 * math.pi / n_lon
    latitude = -math.pi / 2 + (np.arange(n_lat) + 0.5) * d_lat
    longitude = -math.pi + (np.arange(n_lon) + 0.5) * d_lon
    lat_grid, lon_grid = np.meshgrid(latitude, longitude, indexing="ij")
    points = latlon_to_sphere(np.degrees(lat_grid), np.degrees(lon_grid))
    return lat_grid, lon_grid, points


def sphere_quadrature(
    log_density: Callable[[np.ndarray], np.ndarray], n_lat: int = 200, n_lon: int = 400
) -> float:
    """``∫ exp(log_density) dA`` over S² with the midpoint rule weighted by ``cos(lat)``.

    Non-finite log-densities contribute zero.
    """
    lat_grid, _, points = sphere_grid(n_lat, n_lon)
    values = np.asarray(log_density(points.reshape(-1, 3)), dtype=np.float64)
    values = values.reshape(lat_grid.shape)
    density = np.where(np.isfinite(values), np.exp(values), 0.0)
    cell = (math.pi / n_lat) * (2 * math.pi / n_lon)
    return float(np.sum(density * np.cos(lat_grid)) * cell)


def normalization_quadrature_sphere(
    model: MultiChartFlow, n_lat: int = 200, n_lon: int = 400
) -> float:
    """Integral of the exact-mode model density over the learned sphere-like surface.

    Grid points are first projected onto the learned manifold with ``reconstruct``.
    """
    if model.ambient_dim != 3 or model.latent_dim != 2:
        raise ValueError(
            f"Sphere quadrature needs D=3, d=2; got D={model.ambient_dim}, d={model.latent_dim}"
        )
    degenerate = 0

    def model_log_density(points: np.ndarray) -> np.ndarray:
        nonlocal degenerate
        grid = _as_tensor(points)
        with torch.no_grad():
            snapped = torch.cat([model.atlas.reconstruct(c) for c in grid.split(EVAL_CHUNK)])
        values = _log_prob_chunks(model, snapped, LogLikelihoodMode.EXACT, 1, 0, strict=False)
        degenerate = int(torch.isnan(values).sum().item())
        return values.numpy()

    integral = sphere_quadrature(model_log_density, n_lat, n_lon)
    if degenerate:
        logger.warning(f"Sphere quadrature: {degenerate} grid points with degenerate Jacobians")
    logger.info(f"Sphere quadrature ({n_lat}x{n_lon}): integral {integral:.4f}")
    return integral


def evaluate(model: MultiChartFlow, dataset: Dataset, config: EvalConfig) -> EvalReport:
    """Run every metric on the validation split of ``dataset``."""
    val = _as_tensor(dataset.val)
    model.eval()

    mean_nll: dict[str, float] = {}
    degenerate = 0
    for mode in config.modes:
        log_probs = _log_prob_chunks(model, val, mode, config.n_probes, config.seed, strict=False)
        if mode == LogLikelihoodMode.EXACT.value:
            degenerate = int(torch.isnan(log_probs).sum().item())
        mean_nll[mode] = -log_probs.nanmean().item()
        logger.info(f"NLL[{mode}] = {mean_nll[mode]:.4f}")

    error = recon_error(model, val)
    samples = model.sample(config.n_samples, seed=config.seed)
    score = kde_score(samples, val, config.bandwidth)
    transposed = kde_score(val, samples, config.bandwidth)
    logger.info(f"Recon error {error:.6f}, KDE score {score:.4f} (transposed {transposed:.4f})")

    on_sphere = dataset.name in SPHERE_DATASETS and dataset.standardization is None
    integral = None
    if on_sphere:
        integral = normalization_quadrature_sphere(model, config.n_lat, config.n_lon)

    return EvalReport(
        mean_nll=mean_nll,
        mean_recon_error=error,
        kde_score=score,
        kde_score_transposed=transposed,
        normalization_integral=integral,
        n_points=len(val),
        seed=config.seed,
        degenerate_points=degenerate,
        extras={"uniform_sphere_nll": UNIFORM_SPHERE_NLL} if on_sphere else {},
    )
