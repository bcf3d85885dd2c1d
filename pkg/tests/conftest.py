"""Shared fixtures: the synthetic test camera used across the suite."""

import numpy as np
import pytest

from smvfuse.geometry import CameraIntrinsics


@pytest.fixture
def intr() -> CameraIntrinsics:
    """320x240 camera, fx=fy=200, principal point at the center pixel."""
    return CameraIntrinsics(fx=200.0, fy=200.0, cx=160.0, cy=120.0, width=320, height=240)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
