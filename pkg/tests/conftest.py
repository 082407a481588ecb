import numpy as np
import pytest
import torch

from hybrid_avatar.camera import OrthoCamera
from hybrid_avatar.geometry import AvatarParams, FrameParams
from hybrid_avatar.toy import toy_model


@pytest.fixture(scope="session")
def model():
    return toy_model()


def make_frame(model, theta=None, psi=None, scale=1.8, translation=(0.0, 0.0), size=32,
               dtype=torch.float64):
    theta = torch.zeros(model.n_joints, 3, dtype=dtype) if theta is None else torch.as_tensor(theta, dtype=dtype)
    psi = torch.zeros(model.n_expr, dtype=dtype) if psi is None else torch.as_tensor(psi, dtype=dtype)
    cam = OrthoCamera(torch.tensor(scale, dtype=dtype), torch.tensor(translation, dtype=dtype), size, size)
    return FrameParams(theta, psi, cam)


def canonical_frame(model, **kw):
    return make_frame(model, theta=model.canonical_pose, **kw)


def random_pose(model, rng, scale=0.3, dtype=torch.float64):
    theta = rng.normal(0.0, scale, (model.n_joints, 3))
    theta += model.canonical_pose
    return torch.as_tensor(theta, dtype=dtype)


def zero_avatar(model, dtype=torch.float64):
    return AvatarParams.zeros(model, dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
