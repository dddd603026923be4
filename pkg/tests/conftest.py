from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from mitodet.ingest import load_manifest
from mitodet.pipeline import SyntheticSpec, save_synthetic

TESTS_DIR = Path(__file__).parent


def make_rng(seed: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory) -> Path:
    """The canonical desk-scale fixture: 10 mitoses + 5 imposters at seed 7."""
    out = tmp_path_factory.mktemp("synthetic")
    save_synthetic(SyntheticSpec(), out)
    return out


@pytest.fixture(scope="session")
def adversarial_dir(tmp_path_factory) -> Path:
    """Many imposters only slightly lighter than the mitoses, all patch-filling."""
    out = tmp_path_factory.mktemp("adversarial")
    save_synthetic(
        SyntheticSpec(
            width=2560,
            height=2048,
            n_mitoses=10,
            n_imposters=30,
            seed=11,
            radius_range=(91, 95),
            min_separation=256,
            margin=100,
            mitosis_color=(15, 15, 15),
            imposter_color=(40, 40, 40),
        ),
        out,
    )
    return out


@pytest.fixture(scope="session")
def synthetic_manifest(synthetic_dir):
    return load_manifest(synthetic_dir / "manifest.json")


class StubRng:
    """Minimal rng double: fixed normal draws, scripted integers/uniforms."""

    def __init__(self, normal=1.0, integers=0, uniform=1.0):
        self._normal = normal
        self._integers = integers
        self._uniform = uniform

    def normal(self):
        return self._normal

    def integers(self, low, high=None):
        return self._integers

    def uniform(self, low=0.0, high=1.0):
        return self._uniform
