#!/usr/bin/env python3
"""Test that all modules can be imported successfully."""

import importlib

import pytest

MODULES = [
    ("src.config", "Config"),
    ("src.flows", "FlowTransform"),
    ("src.atlas", "MultiChartFlow"),
    ("src.density", "log_prob_manifold"),
    ("src.geometry_data", "generate_dataset"),
    ("src.checkpoint", "load_checkpoint"),
    ("src.training", "Trainer"),
    ("src.evaluation", "evaluate"),
    ("src.plotting", "plot_mollweide_density"),
    ("src.main", "main"),
]


@pytest.mark.parametrize("module, name", MODULES, ids=[m for m, _ in MODULES])
def test_imports(module, name):
    """Test each module imports and exposes its entry point."""
    assert hasattr(importlib.import_module(module), name)


def test_version():
    """Test the package version is set."""
    import src

    assert src.__version__ == "0.1.0"
