"""Pytest configuration and shared fixtures for the triage engine tests."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src/ to path so tests can import the flat modules
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from networks import build_multipath_net, build_triage_net  # noqa: E402

TOY_SIZE = 32


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_triage():
    """Narrow triage network on 32x32 inputs."""
    return build_triage_net(width_scale=0.25, seed=3, input_size=TOY_SIZE, head_scale=1 / 16)


@pytest.fixture
def toy_multipath():
    """Narrow pathology network on 32x32 inputs."""
    return build_multipath_net(width_scale=0.25, seed=5, input_size=TOY_SIZE, head_scale=1 / 64)


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    """Small split synthetic dataset shared across modules."""
    from dataio import generate_synthetic, split_by_patient, write_manifest

    out = tmp_path_factory.mktemp("synthetic")
    records, ledger = generate_synthetic(n_patients=24, image_size=48, seed=7, out_dir=out)
    records = split_by_patient(records, seed=7)
    write_manifest(records, out / "manifest.csv")
    return out, records, ledger
