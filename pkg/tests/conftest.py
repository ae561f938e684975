from __future__ import annotations

import numpy as np
import pytest

from hierhand import OrthoCamera, PoseSampler, load_skeleton


@pytest.fixture(scope="session")
def camera() -> OrthoCamera:
    return OrthoCamera()


@pytest.fixture(scope="session")
def small_camera() -> OrthoCamera:
    return OrthoCamera(width=48, height=48)


@pytest.fixture(scope="session")
def skeleton(camera):
    """Default skeleton in image units."""
    return camera.to_image(load_skeleton())


@pytest.fixture(scope="session")
def small_skeleton(small_camera):
    return small_camera.to_image(load_skeleton())


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def make_sampler(skeleton, camera, seed=0, **kw) -> PoseSampler:
    return PoseSampler(skeleton=skeleton, camera=camera, seed=seed, **kw)


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when != "call":
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if name.startswith("test_criterion"):
        tag = name.replace("test_", "")
        print(f"\n[{'PASS' if report.passed else 'FAIL'}] {tag}")
