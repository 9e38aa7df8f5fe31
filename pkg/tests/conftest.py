import numpy as np
import pytest
import torch

from llhanet.geometry import CameraPose, CorrespondenceSet, rotation_about_axis


def random_pose(rng, max_deg=40.0):
    R = rotation_about_axis(rng.normal(size=3), np.radians(rng.uniform(1.0, max_deg)))
    t = rng.normal(size=3)
    return CameraPose(R, t / np.linalg.norm(t))


def project_points(pose, n, rng, depth=(2.0, 6.0)):
    """Noiseless correspondences: 3D points in front of both cameras projected into each view."""
    rows = []
    while len(rows) < n:
        X1 = np.append(rng.uniform(-1, 1, 2), 1.0) * rng.uniform(*depth)
        X2 = pose.rotation @ X1 + pose.translation
        if X2[2] > 0.1 and np.all(np.abs(X2[:2] / X2[2]) < 5):
            rows.append(np.concatenate([X1[:2] / X1[2], X2[:2] / X2[2]]))
    return np.array(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scene(rng):
    pose = random_pose(rng)
    return pose, CorrespondenceSet(project_points(pose, 64, rng), pose=pose)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.LINES):
        terminalreporter.write_line(mod.LINES[num])
