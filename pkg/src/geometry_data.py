"""Datasets on S², H² and the Lorenz attractor, plus the geometry they need.

Points are NumPy ``float64`` arrays of shape ``(M, 3)``. Hyperboloid points use
the Minkowski model ``-x0² + x1² + x2² = -1`` with ``x0 > 0``.
"""

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import logsumexp
from scipy.stats import vonmises_fisher

from src.config import DatasetConfig

UNIT_TOLERANCE = 1e-9
MOLLWEIDE_TOLERANCE = 1e-10
MOLLWEIDE_MAX_ITER = 100

LORENZ_SIGMA = 10.0
LORENZ_RHO = 28.0
LORENZ_BETA = 8.0 / 3.0
LORENZ_DT = 0.01
LORENZ_BURN_IN = 10.0
LORENZ_DIVERGENCE_BOUND = 1e3

# Spherical checkerboard: alternating longitude bands x equal-area latitude bands
SPHERE_CHECKERBOARD = {"lon_bands": 8, "lat_bands": 4, "max_abs_z": math.sin(math.radians(60.0))}
# Hyperbolic checkerboard: alternating cells of a square in Poincaré-disk coordinates
HYPERBOLIC_CHECKERBOARD = {"grid": 4, "half_width": 0.6}

SPHERE_DATASETS = ("wrapped_normals_s2", "checkerboard_s2", "vmf_s2", "geo_csv")
HYPERBOLIC_DATASETS = ("five_gaussians_h2", "checkerboard_h2")

FIVE_GAUSSIANS_RADIUS = 1.5
FIVE_GAUSSIANS_SCALE = 0.25


class IntegrationDivergenceError(RuntimeError):
    """Raised when the Lorenz integrator leaves the attractor's neighbourhood."""


class ProjectionConvergenceError(RuntimeError):
    """Raised when the Mollweide auxiliary-angle iteration does not converge."""


# ---------------------------------------------------------------------------
# Sphere and hyperboloid geometry
# ---------------------------------------------------------------------------


def _check_on_sphere(points: np.ndarray, what: str = "point") -> None:
    norms = np.linalg.norm(points, axis=-1)
    if not np.all(np.abs(norms - 1.0) < UNIT_TOLERANCE):
        raise ValueError(f"{what} must lie on the unit sphere, got norms {np.atleast_1d(norms)}")


def minkowski_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Lorentzian inner product ``-a0 b0 + a1 b1 + a2 b2`` over the last axis."""
    return -a[..., 0] * b[..., 0] + np.sum(a[..., 1:] * b[..., 1:], axis=-1)


def sphere_exp(base: np.ndarray, tangent: np.ndarray) -> np.ndarray:
    """Exponential map on S²: ``cos|v| x + sin|v| v/|v|``."""
    base = np.asarray(base, dtype=np.float64)
    tangent = np.asarray(tangent, dtype=np.float64)
    norm = np.linalg.norm(tangent, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.cos(norm) * base + np.sin(norm) * tangent / safe


def sphere_log(base: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Logarithm map on S²; undefined for antipodal pairs."""
    base = np.asarray(base, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    cos_angle = np.sum(base * target, axis=-1, keepdims=True)
    orthogonal = target - cos_angle * base
    sin_angle = np.linalg.norm(orthogonal, axis=-1, keepdims=True)

    antipodal = (sin_angle < 1e-12) & (cos_angle < 0)
    if np.any(antipodal):
        raise ValueError("Sphere log map is undefined for antipodal points")

    angle = np.arctan2(sin_angle, cos_angle)
    safe = np.where(sin_angle > 0, sin_angle, 1.0)
    return np.where(sin_angle > 0, angle * orthogonal / safe, 0.0)


def hyperboloid_exp(base: np.ndarray, tangent: np.ndarray) -> np.ndarray:
    """Exponential map on H²: ``cosh|v|_L x + sinh|v|_L v/|v|_L``."""
    base = np.asarray(base, dtype=np.float64)
    tangent = np.asarray(tangent, dtype=np.float64)
    norm = np.sqrt(np.clip(minkowski_dot(tangent, tangent), 0.0, None))[..., None]
    safe = np.where(norm > 0, norm, 1.0)
    point = np.cosh(norm) * base + np.sinh(norm) * tangent / safe
    return _lift_to_hyperboloid(point[..., 1:])


def hyperboloid_log(base: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Logarithm map on H²."""
    base = np.asarray(base, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    alpha = -minkowski_dot(base, target)[..., None]
    orthogonal = target - alpha * base
    sinh_dist = np.sqrt(np.clip(minkowski_dot(orthogonal, orthogonal), 0.0, None))[..., None]
    dist = np.arcsinh(sinh_dist)
    safe = np.where(sinh_dist > 0, sinh_dist, 1.0)
    return np.where(sinh_dist > 0, dist * orthogonal / safe, 0.0)


def _lift_to_hyperboloid(spatial: np.ndarray) -> np.ndarray:
    """Recompute ``x0`` from the spatial coordinates so the constraint holds to rounding."""
    x0 = np.sqrt(1.0 + np.sum(spatial**2, axis=-1, keepdims=True))
    return np.concatenate([x0, spatial], axis=-1)


def sphere_tangent_basis(point: np.ndarray) -> np.ndarray:
    """Orthonormal basis ``(2, 3)`` of the tangent plane at ``point``.

    Built by Gram–Schmidt from the reference axes e1, e2, e3 in that order, so the
    result depends only on ``point``.
    """
    point = np.asarray(point, dtype=np.float64)
    basis: list[np.ndarray] = []
    for axis in np.eye(3):
        v = axis - np.dot(axis, point) * point
        for b in basis:
            v = v - np.dot(v, b) * b
        norm = np.linalg.norm(v)
        if norm > 0.1:
            basis.append(v / norm)
        if len(basis) == 2:
            break
    return np.stack(basis)


def hyperboloid_tangent_basis(point: np.ndarray) -> np.ndarray:
    """Minkowski-orthonormal basis ``(2, 3)`` of the tangent plane of H² at ``point``."""
    point = np.asarray(point, dtype=np.float64)
    basis: list[np.ndarray] = []
    for axis in (np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])):
        v = axis + minkowski_dot(axis, point) * point
        for b in basis:
            v = v - minkowski_dot(v, b) * b
        norm_sq = minkowski_dot(v, v)
        if norm_sq > 1e-2:
            basis.append(v / math.sqrt(norm_sq))
        if len(basis) == 2:
            break
    return np.stack(basis)


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------


def tetrahedron_modes() -> list[np.ndarray]:
    """Vertices of a regular tetrahedron inscribed in S² (one at the north pole)."""
    z = -1.0 / 3.0
    r = math.sqrt(1.0 - z**2)
    modes = [np.array([0.0, 0.0, 1.0])]
    for k in range(3):
        angle = 2.0 * math.pi * k / 3.0
        modes.append(np.array([r * math.cos(angle), r * math.sin(angle), z]))
    return modes


def five_gaussian_modes() -> list[np.ndarray]:
    """Apex of H² plus four points at hyperbolic distance 1.5 along ±x1, ±x2."""
    apex = np.array([1.0, 0.0, 0.0])
    modes = [apex]
    for direction in ((1, 0), (0, 1), (-1, 0), (0, -1)):
        tangent = FIVE_GAUSSIANS_RADIUS * np.array([0.0, *direction], dtype=np.float64)
        modes.append(hyperboloid_exp(apex, tangent))
    return modes


def _component_draws(rng: np.random.Generator, n: int, n_modes: int) -> np.ndarray:
    return rng.integers(0, n_modes, size=n)


def sample_wrapped_normals_sphere(
    n: int, modes: Sequence[tuple[np.ndarray, float]], seed: int = 0
) -> np.ndarray:
    """Mixture of wrapped normals on S² with uniformly chosen components.

    Args:
        n: Number of points
        modes: ``(center, scale)`` pairs; centers must be unit vectors
        seed: Random seed

    Returns:
        Array ``(n, 3)`` of unit vectors
    """
    if n < 1:
        raise ValueError(f"n must be >= 1: {n}")
    if not modes:
        raise ValueError("At least one mode is required")
    centers = np.stack([np.asarray(c, dtype=np.float64) for c, _ in modes])
    scales = np.array([s for _, s in modes], dtype=np.float64)
    _check_on_sphere(centers, "mode center")
    if np.any(scales < 0):
        raise ValueError(f"scales must be non-negative: {scales.tolist()}")

    rng = np.random.default_rng(seed)
    component = _component_draws(rng, n, len(modes))
    coefficients = rng.standard_normal((n, 2)) * scales[component, None]

    bases = np.stack([sphere_tangent_basis(c) for c in centers])  # (K, 2, 3)
    tangents = np.einsum("ni,nij->nj", coefficients, bases[component])
    points = sphere_exp(centers[component], tangents)
    return points / np.linalg.norm(points, axis=1, keepdims=True)


def checkerboard_sphere_cells(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Longitude band, latitude band and on/off flag of each point of S².

    Latitude bands split ``z ∈ [-max_abs_z, max_abs_z]`` into equal-area slices;
    points outside that range are off. A cell is on when ``lon + lat`` is even.
    """
    layout = SPHERE_CHECKERBOARD
    lon_bands, lat_bands, max_abs_z = layout["lon_bands"], layout["lat_bands"], layout["max_abs_z"]
    longitude = np.arctan2(points[:, 1], points[:, 0])
    lon_idx = np.clip(
        np.floor((longitude + math.pi) / (2 * math.pi / lon_bands)).astype(int), 0, lon_bands - 1
    )
    z = points[:, 2]
    lat_idx = np.clip(
        np.floor((z + max_abs_z) / (2 * max_abs_z / lat_bands)).astype(int), 0, lat_bands - 1
    )
    on = (np.abs(z) <= max_abs_z) & ((lon_idx + lat_idx) % 2 == 0)
    return lon_idx, lat_idx, on


def sample_uniform_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    points = rng.standard_normal((n, 3))
    return points / np.linalg.norm(points, axis=1, keepdims=True)


def sample_checkerboard_sphere(n: int, seed: int = 0) -> np.ndarray:
    """Uniform samples on S² restricted to the "on" cells of the checkerboard."""
    if n < 1:
        raise ValueError(f"n must be >= 1: {n}")
    rng = np.random.default_rng(seed)
    accepted: list[np.ndarray] = []
    count = 0
    while count < n:
        candidates = sample_uniform_sphere(max(2 * (n - count), 64) * 2, rng)
        kept = candidates[checkerboard_sphere_cells(candidates)[2]]
        accepted.append(kept)
        count += len(kept)
    return np.concatenate(accepted)[:n]


def sample_wrapped_normals_hyperbolic(
    n: int, modes: Sequence[tuple[np.ndarray, float]], seed: int = 0
) -> np.ndarray:
    """Mixture of wrapped normals on H² (isotropic tangent Gaussians pushed by ``exp``)."""
    if n < 1:
        raise ValueError(f"n must be >= 1: {n}")
    centers = np.stack([np.asarray(c, dtype=np.float64) for c, _ in modes])
    scales = np.array([s for _, s in modes], dtype=np.float64)
    if not np.all(np.abs(minkowski_dot(centers, centers) + 1.0) < UNIT_TOLERANCE):
        raise ValueError("mode centers must lie on the hyperboloid")
    if np.any(scales < 0):
        raise ValueError(f"scales must be non-negative: {scales.tolist()}")

    rng = np.random.default_rng(seed)
    component = _component_draws(rng, n, len(modes))
    coefficients = rng.standard_normal((n, 2)) * scales[component, None]
    bases = np.stack([hyperboloid_tangent_basis(c) for c in centers])
    tangents = np.einsum("ni,nij->nj", coefficients, bases[component])
    return hyperboloid_exp(centers[component], tangents)


def sample_five_gaussians_hyperbolic(
    n: int, seed: int = 0, scale: float = FIVE_GAUSSIANS_SCALE
) -> np.ndarray:
    """Five wrapped normals on H²: the apex and four surrounding modes."""
    return sample_wrapped_normals_hyperbolic(
        n, [(mode, scale) for mode in five_gaussian_modes()], seed
    )


def poincare_to_hyperboloid(disk: np.ndarray) -> np.ndarray:
    """Inverse of ``project_poincare`` for points inside the unit disk."""
    r_sq = np.sum(disk**2, axis=-1, keepdims=True)
    if np.any(r_sq >= 1.0):
        raise ValueError("Poincaré coordinates must lie inside the unit disk")
    return _lift_to_hyperboloid(2.0 * disk / (1.0 - r_sq))


def sample_checkerboard_hyperbolic(n: int, seed: int = 0) -> np.ndarray:
    """Uniform samples (in disk coordinates) from the "on" cells of a Poincaré-square checkerboard."""
    if n < 1:
        raise ValueError(f"n must be >= 1: {n}")
    grid, half_width = HYPERBOLIC_CHECKERBOARD["grid"], HYPERBOLIC_CHECKERBOARD["half_width"]
    cell = 2.0 * half_width / grid
    on_cells = np.array([(i, j) for i in range(grid) for j in range(grid) if (i + j) % 2 == 0])

    rng = np.random.default_rng(seed)
    chosen = on_cells[rng.integers(0, len(on_cells), size=n)]
    disk = -half_width + (chosen + rng.random((n, 2))) * cell
    return poincare_to_hyperboloid(disk)


def _lorenz_rhs(state: np.ndarray) -> np.ndarray:
    x, y, z = state[:, 0], state[:, 1], state[:, 2]
    return np.stack(
        [LORENZ_SIGMA * (y - x), x * (LORENZ_RHO - z) - y, x * y - LORENZ_BETA * z], axis=1
    )


def _rk4_step(state: np.ndarray, dt: float) -> np.ndarray:
    k1 = _lorenz_rhs(state)
    k2 = _lorenz_rhs(state + 0.5 * dt * k1)
    k3 = _lorenz_rhs(state + 0.5 * dt * k2)
    k4 = _lorenz_rhs(state + dt * k3)
    return state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _check_finite_state(state: np.ndarray, t: float, dt: float) -> None:
    if not np.all(np.isfinite(state)) or np.abs(state).max() > LORENZ_DIVERGENCE_BOUND:
        raise IntegrationDivergenceError(
            f"Lorenz integration diverged at t={t:.2f} with dt={dt}; reduce the step size"
        )


def sample_lorenz(
    n_points: int,
    n_trajectories: int = 100,
    t_end: float = 1000.0,
    seed: int = 0,
    dt: float = LORENZ_DT,
    burn_in: float = LORENZ_BURN_IN,
) -> np.ndarray:
    """Positions sampled uniformly in time from pooled Lorenz trajectories.

    Trajectories start from random points, are integrated with fixed-step RK4
    and discard ``burn_in`` time units before ``t ∈ [0, t_end]`` is sampled.
    """
    if n_points < 1 or n_trajectories < 1:
        raise ValueError(f"n_points and n_trajectories must be >= 1: {n_points}, {n_trajectories}")
    if dt <= 0 or t_end <= 0:
        raise ValueError(f"dt and t_end must be positive: dt={dt}, t_end={t_end}")

    rng = np.random.default_rng(seed)
    state = rng.uniform([-15.0, -20.0, 5.0], [15.0, 20.0, 40.0], size=(n_trajectories, 3))

    for step in range(int(round(burn_in / dt))):
        state = _rk4_step(state, dt)
        _check_finite_state(state, step * dt - burn_in, dt)

    n_steps = int(round(t_end / dt))
    trajectory = rng.integers(0, n_trajectories, size=n_points)
    time_index = rng.integers(0, n_steps + 1, size=n_points)
    order = np.argsort(time_index, kind="stable")
    bounds = np.searchsorted(time_index[order], np.arange(n_steps + 2))

    points = np.empty((n_points, 3))
    for step in range(n_steps + 1):
        lo, hi = bounds[step], bounds[step + 1]
        if hi > lo:
            idx = order[lo:hi]
            points[idx] = state[trajectory[idx]]
        if step < n_steps:
            state = _rk4_step(state, dt)
            _check_finite_state(state, (step + 1) * dt, dt)

    logger.debug(
        f"Lorenz: {n_trajectories} trajectories, {n_steps} steps of dt={dt}, {n_points} points"
    )
    return points


def sample_vmf_mixture(
    n: int, modes: Sequence[np.ndarray], kappas: Sequence[float], seed: int = 0
) -> np.ndarray:
    """Equal-weight mixture of von Mises–Fisher distributions on S².

    ``kappa = 0`` is the uniform distribution, ``kappa = inf`` a point mass.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1: {n}")
    if len(modes) != len(kappas) or not modes:
        raise ValueError(f"Need one kappa per mode: {len(modes)} modes, {len(kappas)} kappas")
    centers = np.stack([np.asarray(m, dtype=np.float64) for m in modes])
    _check_on_sphere(centers, "vMF mode")
    if any(k < 0 for k in kappas):
        raise ValueError(f"kappas must be non-negative: {list(kappas)}")

    rng = np.random.default_rng(seed)
    component = _component_draws(rng, n, len(modes))
    points = np.empty((n, 3))
    for i, (center, kappa) in enumerate(zip(centers, kappas, strict=True)):
        mask = component == i
        count = int(mask.sum())
        if count == 0:
            continue
        if math.isinf(kappa):
            points[mask] = center
        elif kappa == 0:
            points[mask] = sample_uniform_sphere(count, rng)
        else:
            points[mask] = vonmises_fisher(center, kappa).rvs(count, random_state=rng)
    return points


def vmf_log_density(
    points: np.ndarray, modes: Sequence[np.ndarray], kappas: Sequence[float]
) -> np.ndarray:
    """Log-density (w.r.t. surface area) of an equal-weight vMF mixture."""
    points = np.asarray(points, dtype=np.float64)
    components = []
    for mode, kappa in zip(modes, kappas, strict=True):
        if math.isinf(kappa):
            raise ValueError("A point-mass component has no density")
        if kappa == 0:
            components.append(np.full(len(points), -math.log(4 * math.pi)))
        else:
            components.append(vonmises_fisher(np.asarray(mode, dtype=np.float64), kappa).logpdf(points))
    return logsumexp(np.stack(components), axis=0) - math.log(len(components))


# ---------------------------------------------------------------------------
# Geolocation CSV
# ---------------------------------------------------------------------------


def latlon_to_sphere(latitude: np.ndarray, longitude: np.ndarray) -> np.ndarray:
    """Decimal degrees to ``(cos λ cos φ, sin λ cos φ, sin φ)``."""
    phi = np.radians(np.asarray(latitude, dtype=np.float64))
    lam = np.radians(np.asarray(longitude, dtype=np.float64))
    return np.stack([np.cos(lam) * np.cos(phi), np.sin(lam) * np.cos(phi), np.sin(phi)], axis=-1)


def sphere_to_latlon(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors to (latitude, longitude) in radians."""
    latitude = np.arcsin(np.clip(points[..., 2], -1.0, 1.0))
    longitude = np.arctan2(points[..., 1], points[..., 0])
    return latitude, longitude


def load_geo_csv(
    path: str | Path, lat_column: str = "latitude", lon_column: str = "longitude"
) -> np.ndarray:
    """Read a CSV of decimal-degree coordinates and map each row onto S².

    Rows with missing, non-numeric or out-of-range coordinates are dropped and
    counted in the log.

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If a coordinate column is missing or no valid row remains
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")

    frame = pd.read_csv(path, encoding="utf-8")
    missing = [c for c in (lat_column, lon_column) if c not in frame.columns]
    if missing:
        raise ValueError(f"Missing columns {missing} in {path}; available: {list(frame.columns)}")

    latitude = pd.to_numeric(frame[lat_column], errors="coerce")
    longitude = pd.to_numeric(frame[lon_column], errors="coerce")
    valid = latitude.notna() & longitude.notna() & (latitude.abs() <= 90) & (longitude.abs() <= 180)

    dropped = int((~valid).sum())
    if dropped:
        logger.warning(f"Dropped {dropped} of {len(frame)} rows with invalid coordinates in {path}")
    if not valid.any():
        raise ValueError(f"No valid coordinate rows in {path}")

    points = latlon_to_sphere(latitude[valid].to_numpy(), longitude[valid].to_numpy())
    logger.info(f"Loaded {len(points)} locations from {path}")
    return points


def split_train_val(
    points: np.ndarray, train_fraction: float = 0.8, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled split with ``floor(train_fraction * n)`` training rows."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1): {train_fraction}")
    permutation = np.random.default_rng(seed).permutation(len(points))
    n_train = int(math.floor(train_fraction * len(points)))
    return points[permutation[:n_train]], points[permutation[n_train:]]


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------


def mollweide_auxiliary_angle(latitude: np.ndarray) -> np.ndarray:
    """Solve ``2θ + sin 2θ = π sin φ`` by Newton iteration on ``t = 2θ``."""
    latitude = np.asarray(latitude, dtype=np.float64)
    target = math.pi * np.sin(latitude)
    t = 2.0 * latitude
    poles = np.abs(latitude) >= math.pi / 2 - 1e-9
    t = np.where(poles, np.sign(latitude) * math.pi, t)

    for _ in range(MOLLWEIDE_MAX_ITER):
        slope = np.maximum(1.0 + np.cos(t), 1e-300)
        delta = np.where(poles, 0.0, (t + np.sin(t) - target) / slope)
        t = np.clip(t - delta, -math.pi, math.pi)
        if np.all(np.abs(delta) < MOLLWEIDE_TOLERANCE):
            return t / 2.0
    raise ProjectionConvergenceError(
        f"Mollweide iteration did not converge in {MOLLWEIDE_MAX_ITER} steps"
    )


def project_mollweide(points: np.ndarray) -> np.ndarray:
    """Mollweide coordinates ``(2√2/π λ cos θ, √2 sin θ)`` of unit vectors."""
    latitude, longitude = sphere_to_latlon(np.asarray(points, dtype=np.float64))
    theta = mollweide_auxiliary_angle(latitude)
    x = 2.0 * math.sqrt(2.0) / math.pi * longitude * np.cos(theta)
    y = math.sqrt(2.0) * np.sin(theta)
    return np.stack([x, y], axis=-1)


def project_poincare(points: np.ndarray) -> np.ndarray:
    """Poincaré-disk coordinates ``(x1, x2) / (1 + x0)`` of hyperboloid points."""
    points = np.asarray(points, dtype=np.float64)
    return points[..., 1:] / (1.0 + points[..., :1])


# ---------------------------------------------------------------------------
# Dataset container
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """A train/validation split with the metadata needed to reproduce it."""

    train: np.ndarray
    val: np.ndarray
    name: str
    seed: int
    ambient_dim: int = 3
    metadata: dict = field(default_factory=dict)

    def save(self, directory: str | Path) -> Path:
        """Write ``train/val`` as ``.npy`` and ``.csv`` plus ``metadata.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        columns = [f"x{i}" for i in range(self.ambient_dim)]
        for split, data in (("train", self.train), ("val", self.val)):
            np.save(directory / f"{split}.npy", data)
            pd.DataFrame(data, columns=columns).to_csv(
                directory / f"{split}.csv", index=False, float_format="%.17g"
            )

        metadata = {
            "name": self.name,
            "seed": self.seed,
            "ambient_dim": self.ambient_dim,
            "train_size": len(self.train),
            "val_size": len(self.val),
            **self.metadata,
        }
        with open(directory / "metadata.json", "w", encoding="utf-8") as f:
            json.dump(metadata, f, indent=2, sort_keys=True)

        logger.info(f"Dataset '{self.name}' saved to {directory}")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "Dataset":
        """Load a saved dataset; the CSV files are authoritative."""
        directory = Path(directory)
        metadata_file = directory / "metadata.json"
        if not metadata_file.exists():
            raise FileNotFoundError(f"No dataset metadata in {directory}")
        with open(metadata_file, encoding="utf-8") as f:
            metadata = json.load(f)

        train = pd.read_csv(directory / "train.csv").to_numpy(dtype=np.float64)
        val = pd.read_csv(directory / "val.csv").to_numpy(dtype=np.float64)
        name = metadata.pop("name")
        seed = metadata.pop("seed")
        ambient_dim = metadata.pop("ambient_dim")
        for key in ("train_size", "val_size"):
            metadata.pop(key, None)
        return cls(
            train=train, val=val, name=name, seed=seed, ambient_dim=ambient_dim, metadata=metadata
        )

    @property
    def standardization(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Per-coordinate ``(mean, scale)`` applied at generation time, if any."""
        info = self.metadata.get("standardization")
        if info is None:
            return None
        return np.asarray(info["mean"]), np.asarray(info["scale"])


def _standardize(train: np.ndarray, val: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
    mean = train.mean(axis=0)
    scale = train.std(axis=0)
    info = {"mean": mean.tolist(), "scale": scale.tolist()}
    return (train - mean) / scale, (val - mean) / scale, info


def generate_dataset(config: DatasetConfig) -> Dataset:
    """Build the train/validation split described by a dataset config.

    Synthetic generators draw the two splits from independent seeds
    ``seed`` and ``seed + 1``; the geolocation loader splits the file.
    """
    name, seed = config.name, config.seed
    n_train, n_val = config.train_size, config.val_size
    metadata: dict = {"generator": name}

    if name == "wrapped_normals_s2":
        modes = [(m, config.scale) for m in tetrahedron_modes()]
        train = sample_wrapped_normals_sphere(n_train, modes, seed)
        val = sample_wrapped_normals_sphere(n_val, modes, seed + 1)
        metadata["modes"] = [m.tolist() for m, _ in modes]
        metadata["scale"] = config.scale
    elif name == "checkerboard_s2":
        train = sample_checkerboard_sphere(n_train, seed)
        val = sample_checkerboard_sphere(n_val, seed + 1)
        metadata["cell_layout"] = SPHERE_CHECKERBOARD
    elif name == "vmf_s2":
        modes = [np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0])]
        kappas = [config.kappa, config.kappa]
        train = sample_vmf_mixture(n_train, modes, kappas, seed)
        val = sample_vmf_mixture(n_val, modes, kappas, seed + 1)
        metadata["modes"] = [m.tolist() for m in modes]
        metadata["kappas"] = kappas
    elif name == "five_gaussians_h2":
        train = sample_five_gaussians_hyperbolic(n_train, seed)
        val = sample_five_gaussians_hyperbolic(n_val, seed + 1)
        metadata["modes"] = [m.tolist() for m in five_gaussian_modes()]
        metadata["scale"] = FIVE_GAUSSIANS_SCALE
    elif name == "checkerboard_h2":
        train = sample_checkerboard_hyperbolic(n_train, seed)
        val = sample_checkerboard_hyperbolic(n_val, seed + 1)
        metadata["cell_layout"] = HYPERBOLIC_CHECKERBOARD
    elif name == "lorenz":
        points = sample_lorenz(n_train + n_val, config.n_trajectories, config.t_end, seed)
        train, val = points[:n_train], points[n_train:]
        metadata.update(
            n_trajectories=config.n_trajectories,
            t_end=config.t_end,
            dt=LORENZ_DT,
            burn_in=LORENZ_BURN_IN,
        )
    elif name == "geo_csv":
        points = load_geo_csv(config.csv_path, config.lat_column, config.lon_column)
        train, val = split_train_val(points, config.train_fraction, seed)
        metadata.update(csv_path=config.csv_path, train_fraction=config.train_fraction)
    else:
        raise ValueError(f"Unknown dataset: {name}")

    if config.standardize:
        train, val, metadata["standardization"] = _standardize(train, val)

    logger.info(f"Generated dataset '{name}': {len(train)} train / {len(val)} val points")
    return Dataset(train=train, val=val, name=name, seed=seed, metadata=metadata)
