#!/usr/bin/env python3
"""Tests for plotting module."""

import numpy as np
import pytest

from src.evaluation import sphere_grid
from src.geometry_data import sample_checkerboard_sphere, sample_five_gaussians_hyperbolic
from src.plotting import (
    plot_mollweide_density,
    plot_mollweide_scatter,
    plot_poincare_density,
    plot_poincare_scatter,
    plot_scatter3d,
    poincare_grid,
)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def assert_png(path) -> None:
    assert path.exists()
    assert path.read_bytes()[:8] == PNG_MAGIC


class TestPoincareGrid:
    """Tests for the disk grid."""

    def test_shapes(self):
        """Test coordinates and mask share the grid shape."""
        coords, mask = poincare_grid(resolution=50)

        assert coords.shape == (50, 50, 2)
        assert mask.shape == (50, 50)

    def test_mask_inside_radius(self):
        """Test masked coordinates lie strictly inside the radius."""
        coords, mask = poincare_grid(resolution=60, radius=0.9)

        assert np.all(np.linalg.norm(coords[mask], axis=1) < 0.9)
        assert not mask[0, 0]


class TestFigures:
    """Tests that each figure type is written as a PNG."""

    def test_mollweide_density(self, tmp_path):
        """Test a Mollweide heatmap is written, including NaN cells."""
        lat_grid, lon_grid, _ = sphere_grid(20, 40)
        values = np.cos(lat_grid)
        values[0, 0] = np.nan

        out = plot_mollweide_density(lat_grid, lon_grid, values, tmp_path / "m.png", "density")

        assert_png(out)

    def test_mollweide_scatter(self, tmp_path):
        """Test a sphere dataset scatter is written, creating parent directories."""
        out = plot_mollweide_scatter(
            sample_checkerboard_sphere(500, seed=0), tmp_path / "nested" / "s.png"
        )

        assert_png(out)

    def test_poincare_density(self, tmp_path):
        """Test a disk heatmap with NaN outside the disk is written."""
        coords, mask = poincare_grid(resolution=40)
        values = np.where(mask, np.exp(-np.sum(coords**2, axis=-1)), np.nan)

        assert_png(plot_poincare_density(values, tmp_path / "p.png"))

    def test_poincare_scatter(self, tmp_path):
        """Test a hyperbolic dataset scatter is written."""
        points = sample_five_gaussians_hyperbolic(500, seed=1)

        assert_png(plot_poincare_scatter(points, tmp_path / "ps.png", "five gaussians"))

    @pytest.mark.parametrize("colored", [False, True])
    def test_scatter3d(self, tmp_path, colored):
        """Test a 3-D scatter is written with and without colors."""
        points = np.random.default_rng(0).standard_normal((300, 3))
        colors = points[:, 2] if colored else None

        assert_png(plot_scatter3d(points, tmp_path / "s3.png", colors=colors))
