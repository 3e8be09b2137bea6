"""Static figures: Mollweide and Poincaré-disk density maps, dataset scatters, 3-D scatters."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from loguru import logger  # noqa: E402

from src.geometry_data import project_poincare, sphere_to_latlon  # noqa: E402

PROJECTIONS = ["mollweide", "poincare", "scatter3d"]
DPI = 150


def _save(fig, out: str | Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Figure written to {out}")
    return out


def plot_mollweide_density(
    lat_grid: np.ndarray,
    lon_grid: np.ndarray,
    values: np.ndarray,
    out: str | Path,
    title: str = "",
) -> Path:
    """Heatmap of per-cell values on a latitude/longitude grid (radians)."""
    fig = plt.figure(figsize=(10, 5))
    ax = fig.add_subplot(111, projection="mollweide")
    mesh = ax.pcolormesh(lon_grid, lat_grid, np.ma.masked_invalid(values), shading="auto")
    ax.grid(True, alpha=0.3)
    ax.set_xticklabels([])
    fig.colorbar(mesh, ax=ax, orientation="horizontal", pad=0.05, shrink=0.6, label="density")
    if title:
        ax.set_title(title)
    return _save(fig, out)


def plot_mollweide_scatter(points: np.ndarray, out: str | Path, title: str = "") -> Path:
    """Points of S² drawn in the Mollweide projection."""
    latitude, longitude = sphere_to_latlon(points)
    fig = plt.figure(figsize=(10, 5))
    ax = fig.add_subplot(111, projection="mollweide")
    ax.scatter(longitude, latitude, s=1, alpha=0.3)
    ax.grid(True, alpha=0.3)
    ax.set_xticklabels([])
    if title:
        ax.set_title(title)
    return _save(fig, out)


def poincare_grid(resolution: int = 300, radius: float = 0.98) -> tuple[np.ndarray, np.ndarray]:
    """Square grid over the disk; returns (coordinates (R, R, 2), inside-disk mask)."""
    axis = np.linspace(-1.0, 1.0, resolution)
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    coords = np.stack([xx, yy], axis=-1)
    return coords, (xx**2 + yy**2) < radius**2


def plot_poincare_density(values: np.ndarray, out: str | Path, title: str = "") -> Path:
    """Heatmap over the Poincaré disk; ``values`` is a square grid, NaN outside the disk."""
    fig, ax = plt.subplots(figsize=(6, 6))
    image = ax.imshow(
        np.ma.masked_invalid(values), origin="lower", extent=(-1, 1, -1, 1), interpolation="nearest"
    )
    ax.add_patch(plt.Circle((0, 0), 1.0, fill=False, color="black", linewidth=1))
    ax.set_aspect("equal")
    ax.set_axis_off()
    fig.colorbar(image, ax=ax, shrink=0.8, label="density")
    if title:
        ax.set_title(title)
    return _save(fig, out)


def plot_poincare_scatter(points: np.ndarray, out: str | Path, title: str = "") -> Path:
    """Hyperboloid points drawn in the Poincaré disk."""
    disk = project_poincare(points)
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(disk[:, 0], disk[:, 1], s=1, alpha=0.3)
    ax.add_patch(plt.Circle((0, 0), 1.0, fill=False, color="black", linewidth=1))
    ax.set_xlim(-1.05, 1.05)
    ax.set_ylim(-1.05, 1.05)
    ax.set_aspect("equal")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    return _save(fig, out)


def plot_scatter3d(
    points: np.ndarray, out: str | Path, colors: np.ndarray | None = None, title: str = ""
) -> Path:
    """3-D scatter, optionally colored (brighter = higher value)."""
    fig = plt.figure(figsize=(7, 6))
    ax = fig.add_subplot(111, projection="3d")
    if colors is None:
        ax.scatter(points[:, 0], points[:, 1], points[:, 2], s=1, alpha=0.6)
    else:
        scatter = ax.scatter(
            points[:, 0], points[:, 1], points[:, 2], c=colors, s=1, cmap="inferno", alpha=0.6
        )
        fig.colorbar(scatter, ax=ax, shrink=0.6, label="log density")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_zlabel("z")
    if title:
        ax.set_title(title)
    return _save(fig, out)
