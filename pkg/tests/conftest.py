import numpy as np
import pytest
import torch

from fxd.scene import CameraView
from fxd.synth import SceneSpec, generate

torch.set_num_threads(1)


def pinhole(f=100.0, w=101, h=101, **kw):
    return CameraView(f, f, (w - 1) / 2 if w % 2 else w / 2, (h - 1) / 2 if h % 2 else h / 2, w, h,
                      np.eye(3), np.zeros(3), **kw)


@pytest.fixture
def view():
    return pinhole()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Three-frame street dataset at reduced resolution."""
    root = tmp_path_factory.mktemp("ds_small")
    generate(SceneSpec(seed=3, n_frames=3, width=48, height=32), root)
    return root


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds_default")
    generate(SceneSpec(), root)
    return root


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
