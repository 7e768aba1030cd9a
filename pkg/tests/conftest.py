import numpy as np
import pytest

from evfield import pipeline
from evfield.events import NoiseConfig


@pytest.fixture(scope="session")
def tiny_dataset():
    """A small sphere_plane dataset shared by pipeline-level tests."""
    return pipeline.simulate_orbit("sphere_plane", width=24, height=24,
                                   n_intervals=8, fps=48, gt_steps=96)


@pytest.fixture(scope="session")
def tiny_training_set(tiny_dataset):
    return pipeline.training_set_from_dataset(tiny_dataset, noise_ratio=0.0, seed=0)
