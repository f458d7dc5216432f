import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dashgs.scene import Camera, GaussianCloud, logit  # noqa: E402
from dashgs.synth import generate_scene, preset  # noqa: E402


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_cloud(rng, n, center=(0.0, 0.0, 0.0), spread=0.4, scale=(0.05, 0.2)):
    return GaussianCloud(
        rng.normal(size=(n, 3)) * spread + np.asarray(center),
        np.log(rng.uniform(*scale, size=(n, 3))),
        random_quats(rng, n),
        logit(rng.uniform(0.2, 0.9, n)),
        logit(rng.uniform(0.1, 0.9, (n, 3))),
    )


def make_camera(width=24, height=20, eye=(0.3, -2.5, 0.4), fov=55.0):
    return Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), width, height, fov_x_deg=fov)


@pytest.fixture(scope="session")
def tiny_scene():
    return generate_scene(preset("tiny"), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def record(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
