import sys

import numpy as np
import pytest
from hypothesis import settings

from fourdkit.geometry import Intrinsics, Pose
from fourdkit.synth import SceneConfig, build_scene

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_pose(rng, t_scale=2.0):
    q = rng.normal(size=4)
    return Pose(q / np.linalg.norm(q), rng.normal(size=3) * t_scale)


def random_intrinsics(rng, height=6, width=8):
    f = rng.uniform(0.6, 1.5) * width
    return Intrinsics(f, f * rng.uniform(0.9, 1.1), width / 2 + rng.uniform(-1, 1), height / 2 + rng.uniform(-1, 1), width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return build_scene(SceneConfig(seed=7, n_frames=4, height=24, width=32, camera_mode="orbit", n_objects=3))


@pytest.fixture(scope="session")
def small_config():
    return SceneConfig(seed=11, n_frames=3, height=16, width=20, camera_mode="linear", n_objects=2)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.summary_lines():
        terminalreporter.write_line(line)
