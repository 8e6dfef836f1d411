"""Shared fixtures: small synthetic datasets and seeded networks."""

import numpy as np
import pytest

from relmetric.dataset import default_templates, generate_dataset
from relmetric.geometry import PointCloud, Pose, Scene, quat_from_axis_angle
from relmetric.network import DESK, NetworkParams


def random_pose(rng, t_scale=0.5):
    q = rng.normal(size=4)
    return Pose(rng.uniform(-t_scale, t_scale, 3), q / np.linalg.norm(q))


def random_scene(rng, n_a=20, n_b=20, scene_id="r0"):
    """Two random clouds with random poses."""
    return Scene(scene_id, "objA", "objB",
                 PointCloud(rng.uniform(-0.1, 0.1, (n_a, 3))),
                 PointCloud(rng.uniform(-0.1, 0.1, (n_b, 3))),
                 random_pose(rng, 0.2), random_pose(rng, 0.2))


def box_scene(scene_id="box", gap=0.05):
    """Two axis-aligned boxes side by side along x, identity rotations."""
    rng = np.random.default_rng(5)
    cloud = PointCloud(rng.uniform(-0.03, 0.03, (200, 3)))
    return Scene(scene_id, "left", "right", cloud, cloud,
                 Pose([0.0, 0.0, 0.03], [1, 0, 0, 0]), Pose([0.06 + gap, 0.0, 0.03], [1, 0, 0, 0]))


@pytest.fixture(scope="session")
def templates():
    return default_templates()


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(40, seed=3)


@pytest.fixture(scope="session")
def desk_params():
    return NetworkParams.initialize(DESK, np.random.default_rng(11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def z_rotation(angle):
    return quat_from_axis_angle([0.0, 0.0, 1.0], angle)
