import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

warnings.filterwarnings("ignore", message=".*TBB.*")

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from deblur_splat.gaussians import Camera, GaussianCloud, num_sh_coeffs  # noqa: E402


def simple_camera(width=32, height=32, f=30.0, eye=(0.0, 0.0, -4.0), target=(0.0, 0.0, 0.0)):
    return Camera.look_at(eye, target, fx=f, fy=f, cx=width / 2, cy=height / 2, width=width, height=height)


def random_cloud(rng, n, sh_degree=1, spread=1.0, scale=(-2.5, -1.2), opacity=(-1.0, 3.0)):
    k = num_sh_coeffs(sh_degree)
    sh = rng.normal(0, 0.4, (n, k, 3))
    sh[:, 1:] *= 0.3
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(*scale, (n, 3)),
        opacity_logits=rng.uniform(*opacity, n),
        sh=sh,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return simple_camera()


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
