import os

os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import settings

from muc.body_model import BodyModelAsset, make_toy_asset

settings.register_profile("muc", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("muc")


@pytest.fixture(scope="session")
def asset():
    return make_toy_asset(200, 25, 0)


@pytest.fixture(scope="session")
def chain_asset():
    return make_chain_asset()


def make_chain_asset(num_coeffs: int = 10) -> BodyModelAsset:
    """Two joints on the x axis; vertices with x < 1 follow the root, the rest the child."""
    rng = np.random.default_rng(3)
    xs = np.array([0.2, 0.5, 0.8, 1.2, 1.5, 1.8])
    ring = []
    for x in xs:
        for ang in (0.0, 2 * np.pi / 3, 4 * np.pi / 3):
            ring.append([x, 0.1 * np.cos(ang), 0.1 * np.sin(ang)])
    verts = np.array(ring)
    V = len(verts)
    faces = []
    for i in range(len(xs) - 1):
        for k in range(3):
            a, b = 3 * i + k, 3 * i + (k + 1) % 3
            c, d = a + 3, b + 3
            faces += [[a, b, c], [b, d, c]]
    child = verts[:, 0] > 1.0
    weights = np.zeros((V, 2))
    weights[~child, 0] = 1.0
    weights[child, 1] = 1.0
    reg = np.zeros((2, V))
    # root joint at x = 0.35, child joint at x = 0.95 (ring centroids)
    reg[0, :3] = 0.5 / 3
    reg[0, 3:6] = 0.5 / 3
    reg[1, 6:9] = 0.5 / 3
    reg[1, 9:12] = 0.5 / 3
    uv = np.column_stack([(verts[:, 0] - 0.2) / 1.6, (np.arctan2(verts[:, 2], verts[:, 1]) + np.pi) / (2 * np.pi)])
    return BodyModelAsset(verts, np.array(faces), rng.normal(scale=0.01, size=(V, 3, num_coeffs)),
                          rng.normal(scale=0.01, size=(V, 3, num_coeffs)), reg, [-1, 0], weights,
                          np.clip(uv, 0, 1), [0, 1, 2], [0, 1], [])


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
