"""Shared tiny-scale fixtures: a 16x16 grid, two sources and a two-level network."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from pairedinv.config import AcquisitionSection, set_threads
from pairedinv.datagen import ModelStyle, build_dataset
from pairedinv.networks import NetworkShape, build_paired_model, fit_normalization
from pairedinv.wave import Grid2D, default_acquisition

TINY_NET = {
    "latent_dim": 4,
    "widths": [2, 2],
    "dec_widths": [2, 2],
    "head_width": 2,
    "blocks_per_level": 1,
}


def tiny_acquisition_section(**overrides) -> AcquisitionSection:
    settings = {
        "n_sources": 2,
        "n_receivers": 8,
        "nt": 96,
        "record_every": 6,
        "f_peak": 25.0,
        "sponge_cells": 6,
    }
    settings.update(overrides)
    return AcquisitionSection(**settings)


@pytest.fixture(autouse=True)
def single_thread():
    """Every test starts from the default worker cap."""
    set_threads(None)
    yield
    set_threads(None)


@pytest.fixture(scope="session")
def tiny_grid():
    return Grid2D(16, 16, 10.0, 10.0)


@pytest.fixture(scope="session")
def tiny_acq(tiny_grid):
    return default_acquisition(tiny_grid, tiny_acquisition_section(), 4000.0)


@pytest.fixture(scope="session")
def tiny_style():
    return ModelStyle(family="flat_layers", layers=(2, 4))


@pytest.fixture(scope="session")
def tiny_dataset(tiny_grid, tiny_acq, tiny_style):
    return build_dataset(8, tiny_style, tiny_grid, tiny_acq, None, seed=0, dtype=np.float64)


@pytest.fixture
def tiny_net():
    return NetworkShape(**TINY_NET)


@pytest.fixture
def tiny_model(tiny_dataset, tiny_net):
    m = build_paired_model(
        tiny_dataset.models.shape[1:],
        tiny_dataset.data.shape[1:],
        tiny_net,
        seed=0,
        dtype=np.float64,
    )
    fit_normalization(m, tiny_dataset.models, tiny_dataset.data)
    return m
